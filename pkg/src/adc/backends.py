"""Search backends: where candidate sample URIs and their bytes come from.

A backend does two things: list candidate URIs for a query (best first,
never more than asked) and resolve one URI to raw bytes. The mock and
local-corpus backends are fully deterministic so collection runs can be
asserted byte-for-byte in tests; live HTTP backends read credentials from
the environment and are never exercised by the test suite.
"""

from __future__ import annotations

import hashlib
import os
import re
import struct
import zlib
from pathlib import Path
from typing import Protocol

from .errors import ConfigError, TransportError


def query_slug(query: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", query.lower()).strip("-")


def tiny_png(rgb: tuple[int, int, int], size: int = 4) -> bytes:
    """A minimal valid RGB PNG of one solid color; deterministic bytes."""

    def chunk(kind: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + kind
            + data
            + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)
        )

    ihdr = struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0)
    scanline = b"\x00" + bytes(rgb) * size
    idat = zlib.compress(scanline * size, level=9)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", idat) + chunk(b"IEND", b"")


class SearchBackend(Protocol):
    """Contract all backends satisfy; safe to call from multiple workers."""

    name: str

    def search(self, query: str, limit: int) -> list[str]:
        """Candidate URIs for the query, best-relevance-first, at most ``limit``."""
        ...

    def fetch(self, uri: str) -> bytes:
        """Raw bytes behind one URI; raises TransportError on failure."""
        ...


class MockImageBackend:
    """Deterministic synthetic backend for tests and desk-scale pipelines.

    Every (query, index) pair maps to a stable URI whose payload is a small
    PNG colored by a seeded hash. ``broken_fraction`` of URIs fail to fetch,
    chosen deterministically from the seed, and ``duplicate_fraction`` of
    URIs draw their color from a tiny palette so their bytes collide.
    """

    def __init__(
        self,
        seed: int = 0,
        results_per_query: int = 1000,
        broken_fraction: float = 0.0,
        duplicate_fraction: float = 0.0,
    ):
        self.name = "mock"
        self.seed = seed
        self.results_per_query = results_per_query
        self.broken_fraction = broken_fraction
        self.duplicate_fraction = duplicate_fraction

    def _unit(self, tag: str, uri: str) -> float:
        digest = hashlib.sha256(f"{self.seed}:{tag}:{uri}".encode()).digest()
        return int.from_bytes(digest[:8], "little") / 2**64

    def search(self, query: str, limit: int) -> list[str]:
        count = min(limit, self.results_per_query)
        slug = query_slug(query)
        return [f"mock://{slug}/{i}" for i in range(count)]

    def fetch(self, uri: str) -> bytes:
        if self._unit("broken", uri) < self.broken_fraction:
            raise TransportError(f"{uri}: simulated broken link")
        if self._unit("dup", uri) < self.duplicate_fraction:
            palette = int(self._unit("palette", uri) * 4)
            rgb = (250, 10 + palette, 10)
        else:
            digest = hashlib.sha256(f"{self.seed}:rgb:{uri}".encode()).digest()
            rgb = (digest[0], digest[1], digest[2])
        return tiny_png(rgb)


class LocalCorpusBackend:
    """Serves a directory tree ``<root>/<query-slug>/*`` as a search index."""

    def __init__(self, root: str | Path):
        self.name = "local-corpus"
        self.root = Path(root)
        if not self.root.is_dir():
            raise ConfigError(f"local corpus root {self.root} is not a directory")

    def search(self, query: str, limit: int) -> list[str]:
        folder = self.root / query_slug(query)
        if not folder.is_dir():
            return []
        files = sorted(p for p in folder.iterdir() if p.is_file())
        return [str(p) for p in files[:limit]]

    def fetch(self, uri: str) -> bytes:
        try:
            return Path(uri).read_bytes()
        except OSError as exc:
            raise TransportError(f"{uri}: {exc}") from exc


class HttpImageBackend:
    """Generic image-search API client (endpoint + key from the environment).

    The endpoint is expected to answer GET ``?q=<query>&count=<n>`` with a
    JSON body containing a list of image URLs under ``value[].contentUrl``
    or as a plain list. Credentials: ADC_SEARCH_KEY, ADC_SEARCH_ENDPOINT.
    """

    def __init__(self, service: str = "generic", endpoint: str | None = None, api_key: str | None = None):
        self.name = service
        self.endpoint = endpoint or os.environ.get("ADC_SEARCH_ENDPOINT")
        self.api_key = api_key or os.environ.get("ADC_SEARCH_KEY")
        if not self.endpoint:
            raise ConfigError("no search endpoint configured (ADC_SEARCH_ENDPOINT)")

    def search(self, query: str, limit: int) -> list[str]:
        import requests

        headers = {"Ocp-Apim-Subscription-Key": self.api_key} if self.api_key else {}
        try:
            resp = requests.get(
                self.endpoint, params={"q": query, "count": limit}, headers=headers, timeout=30
            )
            resp.raise_for_status()
            body = resp.json()
        except Exception as exc:  # noqa: BLE001
            raise TransportError(f"search {query!r} failed: {exc}") from exc
        if isinstance(body, list):
            uris = [str(u) for u in body]
        else:
            uris = [str(item["contentUrl"]) for item in body.get("value", [])]
        return uris[:limit]

    def fetch(self, uri: str) -> bytes:
        import requests

        try:
            resp = requests.get(uri, timeout=30)
            resp.raise_for_status()
            return resp.content
        except Exception as exc:  # noqa: BLE001
            raise TransportError(f"fetch {uri} failed: {exc}") from exc


def _parse_kv(spec: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for part in spec.split(","):
        if not part:
            continue
        key, _, value = part.partition("=")
        out[key.strip()] = value.strip()
    return out


def get_backend(name: str) -> SearchBackend:
    """Build a backend from a name spec.

    Examples: ``mock``, ``mock:seed=7,per_query=100,broken=0.1``,
    ``local-corpus:/path/to/corpus``, ``google``, ``bing``.
    """
    kind, _, rest = name.partition(":")
    if kind == "mock":
        opts = _parse_kv(rest)
        return MockImageBackend(
            seed=int(opts.get("seed", "0")),
            results_per_query=int(opts.get("per_query", "1000")),
            broken_fraction=float(opts.get("broken", "0")),
            duplicate_fraction=float(opts.get("dup", "0")),
        )
    if kind == "local-corpus":
        if not rest:
            raise ConfigError("local-corpus backend needs a root path: local-corpus:<dir>")
        return LocalCorpusBackend(rest)
    if kind in ("google", "bing", "http"):
        return HttpImageBackend(service=kind)
    raise ConfigError(f"unknown backend {name!r}")
