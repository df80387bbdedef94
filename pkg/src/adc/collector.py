"""Concurrent sample acquisition into a deduplicated, resumable manifest.

Collection runs a bounded worker pool over fetch tasks (one per query),
downloads every candidate URI at most once, and appends records to the
manifest in a deterministic order so the resulting file is identical no
matter how many workers ran. Content identity is the SHA-256 of the raw
bytes: mirrored copies of one image collapse to a single fetched record.
"""

from __future__ import annotations

import concurrent.futures
import logging
import random
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .backends import SearchBackend
from .errors import AdcError, TransportError
from .manifest import Manifest, SampleRecord, content_hash_of, sample_id_for
from .taxonomy import SubclassKey

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FetchTask:
    subclass_key: SubclassKey
    query: str
    limit: int = 100

    def __post_init__(self):
        if self.limit < 1:
            raise ValueError(f"limit must be >= 1, got {self.limit}")


@dataclass
class FetchPolicy:
    """Retry/backoff knobs; tests zero them out for speed."""

    attempts: int = 3
    backoff_base: float = 0.1
    jitter: bool = True
    min_call_interval: float = 0.0  # per-backend rate limit, seconds between calls


@dataclass
class FetchReport:
    tasks: int = 0
    candidates: int = 0
    downloads: int = 0
    fetched: int = 0
    broken: int = 0
    duplicate: int = 0
    skipped_existing: int = 0
    search_failures: int = 0
    errors: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "tasks": self.tasks,
            "candidates": self.candidates,
            "downloads": self.downloads,
            "fetched": self.fetched,
            "broken": self.broken,
            "duplicate": self.duplicate,
            "skipped_existing": self.skipped_existing,
            "search_failures": self.search_failures,
        }


def plan_fetch(
    queries: list[tuple[SubclassKey, str]],
    limit: int = 100,
    allow_empty: bool = True,
) -> list[FetchTask]:
    """One task per query, in query order."""
    if not queries and not allow_empty:
        raise AdcError("no queries to plan")
    return [FetchTask(subclass_key=key, query=query, limit=limit) for key, query in queries]


class ContentStore:
    """Content-addressed blob store: ``<root>/<hh>/<hash>.bin``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, content_hash: str) -> Path:
        return self.root / content_hash[:2] / f"{content_hash}.bin"

    def put(self, payload: bytes) -> tuple[str, int]:
        digest = content_hash_of(payload)
        path = self.path_for(digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            # unique temp name: concurrent writers of identical bytes must not race
            tmp = path.with_name(f".{path.name}.{threading.get_ident()}.tmp")
            tmp.write_bytes(payload)
            tmp.replace(path)
        return digest, len(payload)

    def get(self, content_hash: str) -> bytes:
        return self.path_for(content_hash).read_bytes()

    def has(self, content_hash: str) -> bool:
        return self.path_for(content_hash).exists()


class _RateLimiter:
    def __init__(self, min_interval: float):
        self.min_interval = min_interval
        self._lock = threading.Lock()
        self._last = 0.0

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            delay = self._last + self.min_interval - now
            self._last = max(now, self._last + self.min_interval)
        if delay > 0:
            time.sleep(delay)


def _with_retries(fn, what: str, policy: FetchPolicy, limiter: _RateLimiter):
    last_exc: Exception | None = None
    for attempt in range(policy.attempts):
        limiter.wait()
        try:
            return fn()
        except TransportError as exc:
            last_exc = exc
            if attempt + 1 < policy.attempts:
                delay = policy.backoff_base * (2**attempt)
                if policy.jitter:
                    delay *= 0.5 + random.random()
                if delay > 0:
                    time.sleep(delay)
    raise last_exc if last_exc is not None else TransportError(f"{what}: failed")


def run_fetch(
    tasks: list[FetchTask],
    backend: SearchBackend,
    workers: int,
    manifest: Manifest,
    content_store: ContentStore,
    policy: FetchPolicy | None = None,
) -> tuple[Manifest, FetchReport]:
    """Query every task once and download each candidate URI at most once.

    Records are appended to the manifest in (task, candidate) order, so the
    final manifest does not depend on the worker count. Records whose
    sample_id already exists are skipped entirely, which makes reruns of a
    finished collection no-ops.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    policy = policy or FetchPolicy()
    limiter = _RateLimiter(policy.min_call_interval)
    report = FetchReport(tasks=len(tasks))
    existing = manifest.by_id()

    def search_one(task: FetchTask) -> list[str]:
        uris = _with_retries(
            lambda: backend.search(task.query, task.limit), f"search {task.query!r}", policy, limiter
        )
        return uris[: task.limit]  # enforce the per-query cutoff even on a misbehaving backend

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        search_results: list[list[str]] = [[] for _ in tasks]
        search_futs = {pool.submit(search_one, task): ti for ti, task in enumerate(tasks)}
        for fut in concurrent.futures.as_completed(search_futs):
            ti = search_futs[fut]
            try:
                search_results[ti] = fut.result()
            except TransportError as exc:
                report.search_failures += 1
                report.errors.append(f"search failed for {tasks[ti].query!r}: {exc}")

        # candidate list in deterministic order; skip records already present
        # and candidates repeated within this run (duplicate query or URI)
        pending: list[tuple[int, int, str, str]] = []  # (task_idx, cand_idx, uri, sample_id)
        need_download: dict[str, None] = {}
        seen_ids: set[str] = set()
        for ti, uris in enumerate(search_results):
            report.candidates += len(uris)
            for ci, uri in enumerate(uris):
                sid = sample_id_for(tasks[ti].query, uri)
                if sid in existing:
                    report.skipped_existing += 1
                    continue
                if sid in seen_ids:
                    continue
                seen_ids.add(sid)
                pending.append((ti, ci, uri, sid))
                need_download.setdefault(uri)

        def download_one(uri: str) -> tuple[str, int]:
            payload = _with_retries(lambda: backend.fetch(uri), f"fetch {uri}", policy, limiter)
            return content_store.put(payload)

        results: dict[str, tuple[str, int] | Exception] = {}
        futs = {pool.submit(download_one, uri): uri for uri in need_download}
        for fut in concurrent.futures.as_completed(futs):
            uri = futs[fut]
            try:
                results[uri] = fut.result()
            except TransportError as exc:
                results[uri] = exc
        report.downloads = len(need_download)

    fetched_hashes = {r.content_hash for r in manifest.records if r.fetch_status == "fetched"}
    for ti, _ci, uri, sid in pending:
        task = tasks[ti]
        outcome = results[uri]
        if isinstance(outcome, Exception):
            record = SampleRecord(
                sample_id=sid,
                subclass_key=task.subclass_key,
                webly_label=task.subclass_key.class_index,
                uri=uri,
                fetch_status="broken",
            )
            report.broken += 1
        else:
            digest, size = outcome
            if digest in fetched_hashes:
                status = "duplicate"
                report.duplicate += 1
            else:
                status = "fetched"
                fetched_hashes.add(digest)
                report.fetched += 1
            record = SampleRecord(
                sample_id=sid,
                subclass_key=task.subclass_key,
                webly_label=task.subclass_key.class_index,
                uri=uri,
                content_hash=digest,
                byte_size=size,
                fetch_status=status,
            )
        manifest.append(record)
    return manifest, report


# ---------------------------------------------------------------------------
# Validation and dedup


def sniff_image(payload: bytes) -> bool:
    """Cheap structural check that bytes are a plausible, complete image."""
    if len(payload) < 12:
        return False
    if payload.startswith(b"\x89PNG\r\n\x1a\n"):
        return _sniff_png(payload)
    if payload.startswith(b"\xff\xd8"):
        return payload.rstrip(b"\x00").endswith(b"\xff\xd9")
    if payload[:6] in (b"GIF87a", b"GIF89a"):
        return payload.rstrip(b"\x00").endswith(b"\x3b")
    if payload.startswith(b"BM"):
        declared = struct.unpack("<I", payload[2:6])[0]
        return declared <= len(payload)
    if payload.startswith(b"RIFF") and payload[8:12] == b"WEBP":
        return struct.unpack("<I", payload[4:8])[0] + 8 <= len(payload)
    return False


def _sniff_png(payload: bytes) -> bool:
    pos = 8
    saw_iend = False
    while pos + 8 <= len(payload):
        length, kind = struct.unpack(">I4s", payload[pos : pos + 8])
        end = pos + 8 + length + 4
        if end > len(payload):
            return False
        crc = struct.unpack(">I", payload[end - 4 : end])[0]
        if zlib.crc32(payload[pos + 4 : end - 4]) & 0xFFFFFFFF != crc:
            return False
        if kind == b"IEND":
            saw_iend = True
            break
        pos = end
    return saw_iend


@dataclass
class CleanReport:
    malformed: int = 0
    duplicate: int = 0
    missing_content: int = 0
    kept: int = 0
    integrity_errors: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "malformed": self.malformed,
            "duplicate": self.duplicate,
            "missing_content": self.missing_content,
            "kept": self.kept,
        }


def dedup_and_validate(manifest: Manifest, content_store: ContentStore) -> tuple[Manifest, CleanReport]:
    """Demote malformed payloads and repeated content among fetched records.

    Earlier records win on content collisions; later ones become
    ``duplicate``. Payloads that fail the image sniff become ``malformed``.
    Missing blobs are reported per record and leave the status untouched.
    """
    report = CleanReport()
    seen_hashes: set[str] = set()
    for record in manifest.records:
        if record.fetch_status != "fetched":
            continue
        if record.content_hash is None or not content_store.has(record.content_hash):
            report.missing_content += 1
            report.integrity_errors.append(f"{record.sample_id}: content blob missing")
            continue
        payload = content_store.get(record.content_hash)
        if not sniff_image(payload):
            record.fetch_status = "malformed"
            report.malformed += 1
            continue
        if record.content_hash in seen_hashes:
            record.fetch_status = "duplicate"
            report.duplicate += 1
            continue
        seen_hashes.add(record.content_hash)
        report.kept += 1
    return manifest, report
