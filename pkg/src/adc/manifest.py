"""Sample manifest: per-sample provenance with append-only log semantics.

On disk the manifest is UTF-8 JSON-lines. The first line is a header
object; every following line is one sample record with a fixed key order:

    {"sample_id": ..., "class_index": ..., "option_indices": [...],
     "webly_label": ..., "uri": ..., "content_hash": ..., "byte_size": ...,
     "fetch_status": ..., "split": ..., "clean_candidate": ...}

Serialization is canonical (compact separators, fixed key order), so
serialize -> parse -> serialize is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import FormatError
from .taxonomy import SubclassKey

FETCH_STATUSES = ("pending", "fetched", "broken", "malformed", "duplicate")
SPLITS = ("train", "eval", "test", "none")

_HEADER_FORMAT = "adc-manifest"


def sample_id_for(query: str, uri: str) -> str:
    """Stable id derived from (query, uri); re-crawls map to the same record."""
    return hashlib.sha256(f"{query}\n{uri}".encode("utf-8")).hexdigest()[:16]


def content_hash_of(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


@dataclass
class SampleRecord:
    sample_id: str
    subclass_key: SubclassKey
    webly_label: int
    uri: str
    content_hash: str | None = None
    byte_size: int | None = None
    fetch_status: str = "pending"
    split: str = "none"
    clean_candidate: bool = False

    def __post_init__(self):
        if self.fetch_status not in FETCH_STATUSES:
            raise FormatError(f"bad fetch_status {self.fetch_status!r}")
        if self.split not in SPLITS:
            raise FormatError(f"bad split {self.split!r}")
        if self.webly_label != self.subclass_key.class_index:
            raise FormatError(
                f"webly_label {self.webly_label} != subclass class_index {self.subclass_key.class_index}"
            )

    def to_json(self) -> str:
        doc = {
            "sample_id": self.sample_id,
            "class_index": self.subclass_key.class_index,
            "option_indices": list(self.subclass_key.option_indices),
            "webly_label": self.webly_label,
            "uri": self.uri,
            "content_hash": self.content_hash,
            "byte_size": self.byte_size,
            "fetch_status": self.fetch_status,
            "split": self.split,
            "clean_candidate": self.clean_candidate,
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        doc = json.loads(line)
        return cls(
            sample_id=doc["sample_id"],
            subclass_key=SubclassKey(doc["class_index"], tuple(doc["option_indices"])),
            webly_label=doc["webly_label"],
            uri=doc["uri"],
            content_hash=doc["content_hash"],
            byte_size=doc["byte_size"],
            fetch_status=doc["fetch_status"],
            split=doc["split"],
            clean_candidate=doc["clean_candidate"],
        )


@dataclass
class Manifest:
    records: list[SampleRecord] = field(default_factory=list)
    taxonomy_version: str = "v1"
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}

    def status_counts(self) -> dict[str, int]:
        counts = {status: 0 for status in FETCH_STATUSES}
        for r in self.records:
            counts[r.fetch_status] += 1
        return counts

    def fetched(self) -> list[SampleRecord]:
        return [r for r in self.records if r.fetch_status == "fetched"]

    def append(self, record: SampleRecord) -> None:
        self.records.append(record)

    def filtered(self, keep_ids: set[str]) -> "Manifest":
        return Manifest(
            records=[replace(r) for r in self.records if r.sample_id in keep_ids],
            taxonomy_version=self.taxonomy_version,
            seed=self.seed,
        )

    # -- serialization ------------------------------------------------------

    def header_json(self) -> str:
        doc = {
            "format": _HEADER_FORMAT,
            "version": 1,
            "taxonomy_version": self.taxonomy_version,
            "seed": self.seed,
        }
        return json.dumps(doc, separators=(",", ":"))

    def dumps(self) -> str:
        lines = [self.header_json()]
        lines.extend(r.to_json() for r in self.records)
        return "".join(line + "\n" for line in lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "Manifest":
        lines = text.splitlines()
        if not lines:
            raise FormatError("empty manifest file")
        header = json.loads(lines[0])
        if header.get("format") != _HEADER_FORMAT:
            raise FormatError(f"not a manifest file (header format {header.get('format')!r})")
        manifest = cls(taxonomy_version=header["taxonomy_version"], seed=header["seed"])
        seen: set[str] = set()
        for ln, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            record = SampleRecord.from_json(line)
            if record.sample_id in seen:
                raise FormatError(f"line {ln}: duplicate sample_id {record.sample_id}")
            seen.add(record.sample_id)
            manifest.append(record)
        return manifest

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))
