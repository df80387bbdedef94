"""Project configuration: one YAML file drives the whole pipeline.

Config files may layer through ``inherit_from`` (resolved relative to the
child file); child keys override parent keys, nested maps merge key-wise.
All stage randomness derives from the single root ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

VALID_STAGES = ("design", "collect", "curate", "subset")
VALID_METHODS = ("simifeat", "knn", "cl", "cores", "conf")


@dataclass
class ProjectConfig:
    taxonomy: Path
    output_dir: Path
    manifest: Path
    reports_dir: Path
    embeddings: Path | None = None
    probs: Path | None = None
    backend: str = "mock"
    workers: int = 30
    limit: int = 100
    curation_methods: list[str] = field(default_factory=lambda: ["simifeat"])
    seed: int = 0
    log_level: str = "info"
    stages: list[str] = field(default_factory=lambda: ["collect", "curate", "subset"])
    curate_options: dict = field(default_factory=dict)
    subset_options: dict = field(default_factory=dict)
    design_options: dict = field(default_factory=dict)

    def validate(self) -> None:
        for stage in self.stages:
            if stage not in VALID_STAGES:
                raise ConfigError(f"unknown stage {stage!r}")
        for method in self.curation_methods:
            if method not in VALID_METHODS:
                raise ConfigError(f"unknown curation method {method!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if ("collect" in self.stages or "design" in self.stages) and not self.taxonomy.exists():
            raise ConfigError(f"taxonomy file not found: {self.taxonomy}")
        if "curate" in self.stages:
            needs_embeddings = any(m in ("simifeat", "knn") for m in self.curation_methods)
            needs_probs = any(m in ("cl", "cores", "conf") for m in self.curation_methods)
            if needs_embeddings and self.embeddings is None:
                raise ConfigError("curate stage needs paths.embeddings for simifeat/knn methods")
            if needs_probs and self.probs is None:
                raise ConfigError("curate stage needs paths.probs for cl/cores/conf methods")


def _merge(base: dict, child: dict) -> dict:
    out = dict(base)
    for key, value in child.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _load_tree(path: Path, seen: tuple[Path, ...] = ()) -> dict:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"inherit_from cycle through {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    parent = data.pop("inherit_from", None)
    if parent:
        parent_path = (path.parent / parent).resolve()
        base = _load_tree(parent_path, seen + (path,))
        data = _merge(base, data)
    return data


def load_config(path: str | Path) -> ProjectConfig:
    path = Path(path)
    data = _load_tree(path)
    paths = data.get("paths", {})
    if "taxonomy" not in paths:
        raise ConfigError(f"{path}: paths.taxonomy is required")
    base_dir = path.parent

    def resolve(p: str | None) -> Path | None:
        if p is None:
            return None
        candidate = Path(p)
        return candidate if candidate.is_absolute() else (base_dir / candidate)

    output_dir = resolve(paths.get("output_dir", "out"))
    config = ProjectConfig(
        taxonomy=resolve(paths["taxonomy"]),
        output_dir=output_dir,
        manifest=resolve(paths.get("manifest")) or output_dir / "manifest.jsonl",
        reports_dir=resolve(paths.get("reports_dir")) or output_dir / "reports",
        embeddings=resolve(paths.get("embeddings")),
        probs=resolve(paths.get("probs")),
        backend=str(data.get("backend", "mock")),
        workers=int(data.get("workers", 30)),
        limit=int(data.get("limit", 100)),
        curation_methods=list(data.get("curation_methods", ["simifeat"])),
        seed=int(data.get("seed", 0)),
        log_level=str(data.get("log_level", "info")),
        stages=list(data.get("stages", ["collect", "curate", "subset"])),
        curate_options=dict(data.get("curate", {})),
        subset_options=dict(data.get("subset", {})),
        design_options=dict(data.get("design", {})),
    )
    return config
