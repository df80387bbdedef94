"""Dataset design: classes, attributes, options, and search-query expansion.

A taxonomy is a grid of classes, each carrying ordered attribute sets whose
options multiply out into subclasses. One search query is emitted per
subclass by joining the chosen option of every attribute (in declared order)
followed by the class name, e.g. ``white cotton fisherman sweater``.
"""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import yaml

from .errors import ConfigError, InsufficientOptionsError, TransportError

log = logging.getLogger(__name__)

_WS = re.compile(r"\s+")
# leading enumeration markers in completion output: "1.", "12)", "-", "*"
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def normalize_option(text: str) -> str:
    """Canonical option form: trimmed, inner whitespace collapsed, lowercased."""
    return _WS.sub(" ", text.strip()).lower()


@dataclass(frozen=True)
class AttributeSet:
    name: str
    options: tuple[str, ...]


@dataclass(frozen=True)
class TaxonomySpec:
    classes: tuple[str, ...]
    attributes: tuple[tuple[AttributeSet, ...], ...]  # one tuple per class
    version: str = "v1"

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def subclass_count(self, class_index: int) -> int:
        total = 1
        for attr in self.attributes[class_index]:
            total *= len(attr.options)
        return total

    def total_subclasses(self) -> int:
        return sum(self.subclass_count(i) for i in range(len(self.classes)))


@dataclass(frozen=True)
class SubclassKey:
    class_index: int
    option_indices: tuple[int, ...]

    def as_dict(self) -> dict:
        return {"class_index": self.class_index, "option_indices": list(self.option_indices)}


@dataclass
class Violation:
    path: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, path: str, message: str) -> None:
        self.violations.append(Violation(path, message))

    def __str__(self) -> str:
        if self.ok:
            return "taxonomy valid"
        return "\n".join(f"{v.path}: {v.message}" for v in self.violations)


def validate_taxonomy(spec: TaxonomySpec) -> ValidationReport:
    """Check every structural invariant; the report is empty iff the spec is valid."""
    report = ValidationReport()
    if not spec.classes:
        report.add("classes", "class list is empty")
    seen_classes: set[str] = set()
    for ci, name in enumerate(spec.classes):
        if not name or not name.strip():
            report.add(f"classes[{ci}]", "class name is empty")
        if name in seen_classes:
            report.add(f"classes[{ci}]", f"duplicate class name {name!r}")
        seen_classes.add(name)
    if len(spec.attributes) != len(spec.classes):
        report.add("attributes", "attribute table length differs from class list")
        return report
    for ci, attrs in enumerate(spec.attributes):
        cls = spec.classes[ci] if ci < len(spec.classes) else f"#{ci}"
        if not attrs:
            report.add(f"classes[{ci}].attributes", f"class {cls!r} has no attributes")
        seen_attrs: set[str] = set()
        for ai, attr in enumerate(attrs):
            where = f"classes[{ci}].attributes[{ai}]"
            if not attr.name:
                report.add(where, "attribute name is empty")
            if attr.name in seen_attrs:
                report.add(where, f"duplicate attribute name {attr.name!r} in class {cls!r}")
            seen_attrs.add(attr.name)
            if not attr.options:
                report.add(where, f"attribute {attr.name!r} has no options")
            seen_opts: set[str] = set()
            for oi, opt in enumerate(attr.options):
                if not opt or not opt.strip():
                    report.add(f"{where}.options[{oi}]", "empty option")
                if opt in seen_opts:
                    report.add(f"{where}.options[{oi}]", f"duplicate option {opt!r} in attribute {attr.name!r}")
                seen_opts.add(opt)
    return report


def generate_queries(spec: TaxonomySpec) -> list[tuple[SubclassKey, str]]:
    """Expand the taxonomy grid into one query per subclass.

    Output order is lexicographic over (class_index, option_indices); the
    query joins the option of every attribute in declared order, then the
    class name, with single spaces. Pure function of the spec.
    """
    report = validate_taxonomy(spec)
    if not report.ok:
        raise ConfigError(f"invalid taxonomy: {report}")
    out: list[tuple[SubclassKey, str]] = []
    for ci, cls in enumerate(spec.classes):
        option_lists = [attr.options for attr in spec.attributes[ci]]
        for combo in itertools.product(*(range(len(opts)) for opts in option_lists)):
            words = [option_lists[ai][oi] for ai, oi in enumerate(combo)]
            words.append(cls)
            out.append((SubclassKey(ci, tuple(combo)), " ".join(words)))
    return out


# ---------------------------------------------------------------------------
# Prompt-completion clients


class PromptClient(Protocol):
    """Anything that turns a prompt string into completion text."""

    def complete(self, prompt: str) -> str: ...


class CannedPromptClient:
    """Serves fixed responses; the offline stand-in used by every test.

    ``responses`` is either a single string returned for any prompt or a
    mapping from exact prompt to response.
    """

    def __init__(self, responses: str | dict[str, str]):
        self._responses = responses

    def complete(self, prompt: str) -> str:
        if isinstance(self._responses, str):
            return self._responses
        try:
            return self._responses[prompt]
        except KeyError:
            raise TransportError(f"no canned response for prompt: {prompt!r}")


class ReplayPromptClient:
    """Replays prompt/response pairs recorded to a YAML file by a live run."""

    def __init__(self, path: str | Path):
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"replay file {path} must map prompts to responses")
        self._inner = CannedPromptClient(data)

    def complete(self, prompt: str) -> str:
        return self._inner.complete(prompt)


class HttpPromptClient:
    """Minimal live client: POSTs ``{"prompt": ...}`` and expects ``{"text": ...}``.

    Endpoint and key come from the environment (ADC_PROMPT_ENDPOINT,
    ADC_PROMPT_KEY) or constructor arguments. Never exercised by tests.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, timeout: float = 60.0):
        import os

        self.endpoint = endpoint or os.environ.get("ADC_PROMPT_ENDPOINT")
        self.api_key = api_key or os.environ.get("ADC_PROMPT_KEY")
        self.timeout = timeout
        if not self.endpoint:
            raise ConfigError("no prompt endpoint configured (ADC_PROMPT_ENDPOINT)")

    def complete(self, prompt: str) -> str:
        import requests

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = requests.post(self.endpoint, json={"prompt": prompt}, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()["text"]
        except Exception as exc:  # noqa: BLE001 - everything transport-ish is retryable
            raise TransportError(f"prompt completion failed: {exc}") from exc


def _parse_options(text: str) -> list[str]:
    options: list[str] = []
    seen: set[str] = set()
    for raw_line in text.splitlines():
        line = _BULLET.sub("", raw_line)
        opt = normalize_option(line)
        if opt and opt not in seen:
            seen.add(opt)
            options.append(opt)
    return options


def expand_attributes(
    spec: TaxonomySpec,
    class_name: str,
    attribute: str,
    count_range: tuple[int, int],
    client: PromptClient,
    audit_trail: list[tuple[str, str]] | None = None,
) -> list[str]:
    """Ask the prompt client for option strings describing one attribute.

    Returns deduplicated, normalized options clamped to ``count_range``;
    the raw (prompt, response) pair is appended to ``audit_trail`` so the
    iterative design review can inspect exactly what the model said.
    """
    lo, hi = count_range
    if lo > hi or lo < 1:
        raise ConfigError(f"bad count range [{lo}, {hi}]")
    if class_name not in spec.classes:
        raise ConfigError(f"unknown class {class_name!r}")
    prompt = f"Show me {lo}-{hi} ways to describe {attribute} of {class_name}"
    response = client.complete(prompt)
    if audit_trail is not None:
        audit_trail.append((prompt, response))
    log.debug("prompt=%r response=%r", prompt, response)
    options = _parse_options(response)
    if len(options) < lo:
        raise InsufficientOptionsError(lo, options)
    return options[:hi]


# ---------------------------------------------------------------------------
# On-disk format (YAML tree: version, classes[].name, classes[].attributes[].{name,options[]})


def load_taxonomy(path: str | Path) -> TaxonomySpec:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or "classes" not in data:
        raise ConfigError(f"{path}: not a taxonomy file (missing 'classes')")
    classes: list[str] = []
    attributes: list[tuple[AttributeSet, ...]] = []
    for entry in data["classes"]:
        classes.append(str(entry["name"]))
        attrs = tuple(
            AttributeSet(name=str(a["name"]), options=tuple(str(o) for o in a["options"]))
            for a in entry.get("attributes", [])
        )
        attributes.append(attrs)
    return TaxonomySpec(
        classes=tuple(classes),
        attributes=tuple(attributes),
        version=str(data.get("version", "v1")),
    )


def save_taxonomy(spec: TaxonomySpec, path: str | Path) -> None:
    doc = {
        "version": spec.version,
        "classes": [
            {
                "name": cls,
                "attributes": [
                    {"name": a.name, "options": list(a.options)} for a in spec.attributes[ci]
                ],
            }
            for ci, cls in enumerate(spec.classes)
        ],
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False, allow_unicode=True), encoding="utf-8")
