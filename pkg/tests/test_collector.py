import pytest

from adc.backends import LocalCorpusBackend, MockImageBackend, get_backend, query_slug, tiny_png
from adc.collector import (
    ContentStore,
    FetchPolicy,
    FetchTask,
    dedup_and_validate,
    plan_fetch,
    run_fetch,
    sniff_image,
)
from adc.errors import TransportError
from adc.manifest import Manifest, SampleRecord, sample_id_for
from adc.taxonomy import SubclassKey

FAST = FetchPolicy(attempts=1, backoff_base=0.0, jitter=False)


def queries_for(n, prefix="query"):
    return [(SubclassKey(0, (i,)), f"{prefix} {i}") for i in range(n)]


def collect(queries, backend, workers, tmp_path, manifest=None, limit=100):
    manifest = manifest if manifest is not None else Manifest()
    store = ContentStore(tmp_path / "content")
    tasks = plan_fetch(queries, limit=limit)
    return run_fetch(tasks, backend, workers, manifest, store, policy=FAST)


def manifest_fingerprint(manifest):
    return [(r.sample_id, r.fetch_status, r.content_hash) for r in manifest.records]


def test_plan_fetch_shapes():
    tasks = plan_fetch(queries_for(5), limit=100)
    assert len(tasks) == 5
    assert all(t.limit == 100 for t in tasks)
    assert plan_fetch([], limit=1) == []
    with pytest.raises(ValueError):
        FetchTask(SubclassKey(0, (0,)), "q", limit=0)


def test_run_fetch_counts(tmp_path):
    backend = MockImageBackend(seed=1, results_per_query=100)
    manifest, report = collect(queries_for(5), backend, 4, tmp_path)
    assert report.fetched + report.duplicate == 500
    assert len(manifest) == 500
    assert report.broken == 0


def test_rerun_is_noop(tmp_path):
    backend = MockImageBackend(seed=1, results_per_query=50)
    manifest, _ = collect(queries_for(3), backend, 4, tmp_path)
    before = manifest.dumps()
    manifest2, report2 = collect(queries_for(3), backend, 4, tmp_path, manifest=manifest)
    assert report2.downloads == 0
    assert report2.skipped_existing == 150
    assert manifest2.dumps() == before


def test_worker_count_independence(tmp_path):
    fingerprints = []
    for workers in (1, 4, 30):
        backend = MockImageBackend(seed=9, results_per_query=40, broken_fraction=0.1)
        manifest, _ = collect(queries_for(4), backend, workers, tmp_path / str(workers))
        fingerprints.append(manifest_fingerprint(manifest))
    assert fingerprints[0] == fingerprints[1] == fingerprints[2]


def test_broken_links_match_seeded_mock(tmp_path):
    backend = MockImageBackend(seed=5, results_per_query=200, broken_fraction=0.1)
    queries = queries_for(5)
    manifest, report = collect(queries, backend, 8, tmp_path, limit=200)
    # oracle: enumerate the mock's responses directly
    expected_broken = 0
    for _, q in queries:
        for uri in backend.search(q, 200):
            try:
                backend.fetch(uri)
            except TransportError:
                expected_broken += 1
    assert report.broken == expected_broken
    assert report.broken + report.fetched + report.duplicate == 1000
    assert 50 <= report.broken <= 150  # ~10% of 1000


def test_per_query_cutoff_enforced(tmp_path):
    backend = MockImageBackend(seed=2, results_per_query=1000)
    manifest, report = collect(queries_for(2), backend, 4, tmp_path, limit=100)
    assert report.candidates == 200
    assert len(manifest) == 200


def test_cutoff_enforced_against_overflowing_backend(tmp_path):
    class Overflowing(MockImageBackend):
        def search(self, query, limit):
            return super().search(query, limit * 3)

    backend = Overflowing(seed=2, results_per_query=1000)
    _, report = collect(queries_for(1), backend, 2, tmp_path, limit=10)
    assert report.candidates == 10


def test_same_uri_across_tasks_downloads_once(tmp_path):
    class SharedUri(MockImageBackend):
        def search(self, query, limit):
            return ["mock://shared/0"]

    backend = SharedUri(seed=0)
    manifest, report = collect(queries_for(3), backend, 4, tmp_path)
    assert report.downloads == 1
    assert len(manifest) == 3  # one record per (query, uri)
    statuses = [r.fetch_status for r in manifest.records]
    assert statuses == ["fetched", "duplicate", "duplicate"]


def test_duplicate_content_marked(tmp_path):
    backend = MockImageBackend(seed=3, results_per_query=100, duplicate_fraction=0.5)
    manifest, report = collect(queries_for(2), backend, 4, tmp_path)
    hashes = [r.content_hash for r in manifest.records if r.fetch_status == "fetched"]
    assert len(hashes) == len(set(hashes))
    assert report.duplicate > 0


def test_dedup_and_validate_identical_bytes(tmp_path):
    store = ContentStore(tmp_path / "content")
    digest, size = store.put(tiny_png((1, 2, 3)))
    manifest = Manifest()
    for i in range(2):
        manifest.append(
            SampleRecord(
                sample_id=f"id{i}",
                subclass_key=SubclassKey(0, (0,)),
                webly_label=0,
                uri=f"u{i}",
                content_hash=digest,
                byte_size=size,
                fetch_status="fetched",
            )
        )
    manifest, report = dedup_and_validate(manifest, store)
    assert [r.fetch_status for r in manifest.records] == ["fetched", "duplicate"]
    assert report.duplicate == 1


def test_zero_byte_payload_malformed(tmp_path):
    store = ContentStore(tmp_path / "content")
    digest, _ = store.put(b"")
    manifest = Manifest()
    manifest.append(
        SampleRecord(
            sample_id="z",
            subclass_key=SubclassKey(0, (0,)),
            webly_label=0,
            uri="u",
            content_hash=digest,
            byte_size=0,
            fetch_status="fetched",
        )
    )
    manifest, report = dedup_and_validate(manifest, store)
    assert manifest.records[0].fetch_status == "malformed"
    assert report.malformed == 1


def test_missing_content_reported(tmp_path):
    store = ContentStore(tmp_path / "content")
    manifest = Manifest()
    manifest.append(
        SampleRecord(
            sample_id="m",
            subclass_key=SubclassKey(0, (0,)),
            webly_label=0,
            uri="u",
            content_hash="ff" * 32,
            byte_size=4,
            fetch_status="fetched",
        )
    )
    _, report = dedup_and_validate(manifest, store)
    assert report.missing_content == 1
    assert report.integrity_errors


def test_sniff_image():
    assert sniff_image(tiny_png((9, 9, 9)))
    assert not sniff_image(b"")
    assert not sniff_image(b"garbage bytes here")
    assert not sniff_image(tiny_png((9, 9, 9))[:-8])  # truncated


def test_local_corpus_backend_retention(tmp_path):
    # 90 valid + 10 truncated files per query, as a deterministic fixture
    queries = queries_for(3, prefix="wool suit")
    root = tmp_path / "corpus"
    for qi, (_, q) in enumerate(queries):
        folder = root / query_slug(q)
        folder.mkdir(parents=True)
        for i in range(90):
            (folder / f"{i:03d}.png").write_bytes(tiny_png((i, qi, 0)))
        for i in range(90, 100):
            (folder / f"{i:03d}.png").write_bytes(tiny_png((i, qi, 0))[:-10])
    backend = LocalCorpusBackend(root)
    manifest, report = collect(queries, backend, 4, tmp_path)
    manifest, clean = dedup_and_validate(manifest, ContentStore(tmp_path / "content"))
    per_query = {}
    for rec in manifest.records:
        if rec.fetch_status == "fetched":
            per_query[rec.subclass_key.option_indices] = (
                per_query.get(rec.subclass_key.option_indices, 0) + 1
            )
    assert all(count == 90 for count in per_query.values())
    assert clean.malformed == 30


def test_retry_then_success(tmp_path):
    calls = {"n": 0}

    class Flaky(MockImageBackend):
        def fetch(self, uri):
            calls["n"] += 1
            if calls["n"] % 2 == 1:
                raise TransportError("transient")
            return super().fetch(uri)

    backend = Flaky(seed=0, results_per_query=4)
    store = ContentStore(tmp_path / "content")
    tasks = plan_fetch(queries_for(1), limit=4)
    manifest, report = run_fetch(
        tasks, backend, 1, Manifest(), store, policy=FetchPolicy(attempts=3, backoff_base=0.0, jitter=False)
    )
    assert report.fetched + report.duplicate == 4
    assert report.broken == 0


def test_manifest_roundtrip_byte_identical(tmp_path):
    backend = MockImageBackend(seed=4, results_per_query=20, broken_fraction=0.2)
    manifest, _ = collect(queries_for(2), backend, 4, tmp_path)
    text = manifest.dumps()
    assert Manifest.loads(text).dumps() == text


def test_get_backend_parsing(tmp_path):
    b = get_backend("mock:seed=7,per_query=10,broken=0.5")
    assert isinstance(b, MockImageBackend)
    assert b.seed == 7 and b.results_per_query == 10 and b.broken_fraction == 0.5
    (tmp_path / "c").mkdir()
    assert isinstance(get_backend(f"local-corpus:{tmp_path / 'c'}"), LocalCorpusBackend)


def test_sample_id_stability():
    assert sample_id_for("q", "u") == sample_id_for("q", "u")
    assert sample_id_for("q", "u1") != sample_id_for("q", "u2")


def test_duplicate_queries_do_not_duplicate_records(tmp_path):
    backend = MockImageBackend(seed=0, results_per_query=5)
    queries = [(SubclassKey(0, (0,)), "same query"), (SubclassKey(0, (0,)), "same query")]
    manifest, _ = collect(queries, backend, 4, tmp_path)
    ids = [r.sample_id for r in manifest.records]
    assert len(ids) == len(set(ids)) == 5
    # and the on-disk form must stay loadable (unique-id invariant)
    Manifest.loads(manifest.dumps())


def test_repeated_uri_within_one_search_kept_once(tmp_path):
    class Repeating(MockImageBackend):
        def search(self, query, limit):
            return ["mock://same/0", "mock://same/0", "mock://other/1"][:limit]

    manifest, report = collect(queries_for(1), Repeating(seed=0), 2, tmp_path, limit=3)
    assert len(manifest) == 2
    assert report.downloads == 2
