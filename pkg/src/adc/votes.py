"""Crowdsourced vote handling: bundle export, selection import, aggregation.

Two annotation tasks are supported. The filtering task shows a group of
same-label samples and asks annotators to pick the correctly labeled ones
(at least ``min_select`` of the group); picked samples become clean
candidates. The noise-evaluation task collects per-sample yes/unsure/no
votes, which aggregate into clean/noisy verdicts and a noise-rate interval.

Vote patterns are canonicalized as multisets: three-vote records bucket
into all-yes, two-yes-one-unsure, two-yes-one-no, and everything else.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AdcError, FormatError
from .manifest import Manifest

log = logging.getLogger(__name__)

VOTE_VALUES = ("yes", "unsure", "no")
PATTERN_ALL_YES = "YYY"
PATTERN_TWO_YES_UNSURE = "YYU"
PATTERN_TWO_YES_NO = "YYN"
PATTERN_ELSE = "else"
PATTERNS = (PATTERN_ALL_YES, PATTERN_TWO_YES_UNSURE, PATTERN_TWO_YES_NO, PATTERN_ELSE)

POLICIES = ("majority", "strict")
MAX_VOTES = 16


@dataclass
class VoteRecord:
    sample_id: str
    votes: tuple[str, ...]
    annotator_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if not 1 <= len(self.votes) <= MAX_VOTES:
            raise FormatError(f"{self.sample_id}: {len(self.votes)} votes")
        for v in self.votes:
            if v not in VOTE_VALUES:
                raise FormatError(f"{self.sample_id}: bad vote value {v!r}")
        if self.annotator_ids is not None and len(self.annotator_ids) != len(self.votes):
            raise FormatError(f"{self.sample_id}: annotator ids not aligned with votes")


def vote_pattern(votes: tuple[str, ...]) -> str:
    """Canonical multiset bucket of a vote tuple (order-insensitive)."""
    if len(votes) != 3:
        return PATTERN_ELSE
    counts = Counter(votes)
    if counts["yes"] == 3:
        return PATTERN_ALL_YES
    if counts["yes"] == 2 and counts["unsure"] == 1:
        return PATTERN_TWO_YES_UNSURE
    if counts["yes"] == 2 and counts["no"] == 1:
        return PATTERN_TWO_YES_NO
    return PATTERN_ELSE


def is_clean(votes: tuple[str, ...], policy: str) -> bool:
    if policy == "strict":
        return all(v == "yes" for v in votes)
    if policy == "majority":
        return sum(v == "yes" for v in votes) >= 2
    raise AdcError(f"unknown policy {policy!r}")


@dataclass
class VoteAggregate:
    policy: str
    verdicts: dict[str, bool]  # sample_id -> clean?
    pattern_counts: dict[str, int]
    n: int

    @property
    def clean_fraction(self) -> float:
        return sum(self.verdicts.values()) / self.n if self.n else 0.0

    @property
    def noisy_fraction(self) -> float:
        return 1.0 - self.clean_fraction if self.n else 0.0

    def pattern_fractions(self) -> dict[str, float]:
        return {pat: self.pattern_counts[pat] / self.n for pat in PATTERNS} if self.n else dict.fromkeys(PATTERNS, 0.0)


def aggregate_votes(records: list[VoteRecord], policy: str = "majority") -> VoteAggregate:
    """Per-sample clean/noisy verdicts plus the canonical pattern table."""
    if policy not in POLICIES:
        raise AdcError(f"unknown policy {policy!r}")
    verdicts: dict[str, bool] = {}
    counts = dict.fromkeys(PATTERNS, 0)
    for rec in records:
        verdicts[rec.sample_id] = is_clean(rec.votes, policy)
        counts[vote_pattern(rec.votes)] += 1
    return VoteAggregate(policy=policy, verdicts=verdicts, pattern_counts=counts, n=len(records))


@dataclass
class NoiseInterval:
    lower: float
    upper: float
    ambiguity: float


def estimate_noise_interval(pattern_fractions: dict[str, float]) -> NoiseInterval:
    """Noise-rate interval from the canonical pattern table.

    The lower bound counts samples voted noisy under majority aggregation
    (the ``else`` bucket); the ambiguous mass is the majority-clean bucket
    that still contains a "no" vote; the upper bound adds the two.
    """
    total = sum(pattern_fractions.get(p, 0.0) for p in PATTERNS)
    if abs(total - 1.0) > 1e-9:
        raise AdcError(f"pattern fractions sum to {total!r}, expected 1")
    lower = pattern_fractions.get(PATTERN_ELSE, 0.0)
    ambiguity = pattern_fractions.get(PATTERN_TWO_YES_NO, 0.0)
    return NoiseInterval(lower=lower, upper=lower + ambiguity, ambiguity=ambiguity)


# ---------------------------------------------------------------------------
# Votes file: one record per line, tab-separated columns
#   sample_id <TAB> vote1,vote2,vote3 [<TAB> annot1,annot2,annot3]

VOTES_HEADER = "# adc-votes v1"


def save_votes(records: list[VoteRecord], path: str | Path) -> None:
    lines = [VOTES_HEADER]
    for rec in records:
        cols = [rec.sample_id, ",".join(rec.votes)]
        if rec.annotator_ids is not None:
            cols.append(",".join(rec.annotator_ids))
        lines.append("\t".join(cols))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_votes(path: str | Path) -> list[VoteRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != VOTES_HEADER:
        raise FormatError(f"{path}: not a votes file")
    records: list[VoteRecord] = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise FormatError(f"{path}:{ln}: expected 2 or 3 columns, got {len(cols)}")
        votes = tuple(cols[1].split(","))
        annotators = tuple(cols[2].split(",")) if len(cols) == 3 else None
        records.append(VoteRecord(sample_id=cols[0], votes=votes, annotator_ids=annotators))
    return records


def annotator_counts(records: list[VoteRecord]) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for rec in records:
        if rec.annotator_ids:
            counts.update(rec.annotator_ids)
    return dict(counts)


# ---------------------------------------------------------------------------
# Filtering-task bundles


@dataclass
class FilterBundle:
    group_id: str
    machine_label: int
    sample_ids: list[str]
    min_select: int
    tasks_per_bundle: int

    def __post_init__(self):
        if self.min_select > len(self.sample_ids):
            raise FormatError(f"group {self.group_id}: min_select exceeds group size")


BUNDLE_HEADER = "# adc-bundles v1"
SELECTIONS_HEADER = "# adc-selections v1"


def export_filter_bundles(
    manifest: Manifest,
    out_path: str | Path,
    group_size: int = 20,
    min_select: int = 4,
    tasks_per_bundle: int = 10,
    seed: int = 0,
    statuses: tuple[str, ...] = ("fetched",),
) -> list[FilterBundle]:
    """Group same-label samples into annotation bundles and write them out.

    Grouping is a seeded shuffle per class chunked into full groups;
    leftovers smaller than a group and classes without a full group are
    skipped (warned in the log line of the caller). Every exported sample
    appears in exactly one group, and the same seed reproduces the same
    file byte for byte.
    """
    rng = np.random.default_rng(seed)
    by_label: dict[int, list[str]] = {}
    for rec in manifest.records:
        if rec.fetch_status in statuses:
            by_label.setdefault(rec.webly_label, []).append(rec.sample_id)
    bundles: list[FilterBundle] = []
    skipped: list[int] = []
    for label in sorted(by_label):
        ids = by_label[label]
        if len(ids) < group_size:
            log.warning("class %d has %d candidates (< group size %d), skipped", label, len(ids), group_size)
            skipped.append(label)
            continue
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        for g in range(len(shuffled) // group_size):
            chunk = shuffled[g * group_size : (g + 1) * group_size]
            bundles.append(
                FilterBundle(
                    group_id=f"g{label:04d}-{g:05d}",
                    machine_label=label,
                    sample_ids=chunk,
                    min_select=min_select,
                    tasks_per_bundle=tasks_per_bundle,
                )
            )
    meta = {"seed": seed, "group_size": group_size, "min_select": min_select,
            "tasks_per_bundle": tasks_per_bundle, "skipped_classes": skipped}
    lines = [BUNDLE_HEADER, "# " + json.dumps(meta, separators=(",", ":"))]
    for b in bundles:
        lines.append(f"group {b.group_id} label={b.machine_label} min_select={b.min_select}")
        lines.extend(b.sample_ids)
    Path(out_path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return bundles


def load_filter_bundles(path: str | Path) -> list[FilterBundle]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != BUNDLE_HEADER:
        raise FormatError(f"{path}: not a bundle file")
    meta = json.loads(lines[1][2:]) if len(lines) > 1 and lines[1].startswith("# ") else {}
    raw: list[tuple[str, int, int, list[str]]] = []  # (group_id, label, min_select, ids)
    for line in lines[2:]:
        if not line:
            continue
        if line.startswith("group "):
            parts = line.split()
            fields = dict(p.split("=", 1) for p in parts[2:])
            raw.append((parts[1], int(fields["label"]), int(fields["min_select"]), []))
        else:
            if not raw:
                raise FormatError(f"{path}: sample line before any group header")
            raw[-1][3].append(line)
    return [
        FilterBundle(
            group_id=gid,
            machine_label=label,
            sample_ids=ids,
            min_select=min_select,
            tasks_per_bundle=int(meta.get("tasks_per_bundle", 10)),
        )
        for gid, label, min_select, ids in raw
    ]


def load_selections(path: str | Path) -> dict[str, list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SELECTIONS_HEADER:
        raise FormatError(f"{path}: not a selections file")
    out: dict[str, list[str]] = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        group_id, _, rest = line.partition("\t")
        if not rest:
            raise FormatError(f"{path}:{ln}: expected 'group_id<TAB>id,id,...'")
        out[group_id] = rest.split(",")
    return out


def save_selections(selections: dict[str, list[str]], path: str | Path) -> None:
    lines = [SELECTIONS_HEADER]
    for group_id in selections:
        lines.append(f"{group_id}\t{','.join(selections[group_id])}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


@dataclass
class ImportReport:
    marked: int = 0
    rejected_groups: list[str] = field(default_factory=list)
    unknown_groups: list[str] = field(default_factory=list)
    unknown_samples: list[str] = field(default_factory=list)


def import_filter_selections(
    bundles: list[FilterBundle],
    selections: dict[str, list[str]],
    manifest: Manifest,
) -> tuple[Manifest, ImportReport]:
    """Mark selected samples as clean candidates.

    A group whose selection count is below its min_select is rejected whole;
    unknown group ids and sample ids outside their group are reported and
    skipped. Everything else in the manifest is left untouched.
    """
    report = ImportReport()
    by_group = {b.group_id: b for b in bundles}
    by_id = manifest.by_id()
    for group_id, picked in selections.items():
        bundle = by_group.get(group_id)
        if bundle is None:
            report.unknown_groups.append(group_id)
            continue
        valid = [sid for sid in picked if sid in bundle.sample_ids]
        bad = [sid for sid in picked if sid not in bundle.sample_ids]
        report.unknown_samples.extend(bad)
        if len(valid) < bundle.min_select:
            report.rejected_groups.append(group_id)
            continue
        for sid in valid:
            record = by_id.get(sid)
            if record is not None and not record.clean_candidate:
                record.clean_candidate = True
                report.marked += 1
    return manifest, report
