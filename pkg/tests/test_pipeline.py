import csv
import json

import numpy as np
import pytest
from _corpus import write_corpus

from fundus_qa import FundusQAError
from fundus_qa.pipeline import (
    DatasetManifest,
    ManifestEntry,
    SplitSpec,
    apply_exclusions,
    build_manifest,
    compare_report,
    compare_scores,
    read_manifest,
    read_scores,
    score_batch,
    split_dataset,
    worker_count,
    write_manifest,
    write_scores,
)
from fundus_qa.stats import paired_t_test, summarize


def _touch(d, names):
    d.mkdir(exist_ok=True)
    for n in names:
        (d / n).write_bytes(b"")


def fake_manifest(n, excluded=()):
    return DatasetManifest([ManifestEntry(f"m{i:04d}", f"r/{i}.png", f"v/{i}.png", excluded=i in excluded)
                            for i in range(n)])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("corpus"), 6, size=96)


# ---------------------------------------------------------------------------
# Manifests


def test_manifest_matching(tmp_path):
    _touch(tmp_path / "r", ["a.png", "b.png", "c.png"])
    _touch(tmp_path / "v", ["a.png", "b.png", "c.png", "notes.txt"])
    m = build_manifest(tmp_path / "r", tmp_path / "v")
    assert m.ids() == ["a", "b", "c"] and m.warnings == []
    (tmp_path / "v" / "c.png").unlink()
    m = build_manifest(tmp_path / "r", tmp_path / "v")
    assert len(m) == 2 and len(m.warnings) == 1 and "c" in m.warnings[0]


def test_manifest_grades_and_errors(tmp_path):
    _touch(tmp_path / "r", ["a.png", "b.png"])
    _touch(tmp_path / "v", ["a.png", "b.png"])
    (tmp_path / "g.csv").write_text("id,grade\na,3\nb,2\n")
    m = build_manifest(tmp_path / "r", tmp_path / "v", grade_file=tmp_path / "g.csv")
    assert [e.excluded for e in m.entries] == [True, False]
    assert [e.id for e in m.active] == ["b"]
    _touch(tmp_path / "w", ["z.png"])
    with pytest.raises(FundusQAError):
        build_manifest(tmp_path / "r", tmp_path / "w")
    with pytest.raises(FundusQAError):
        build_manifest(tmp_path / "nope", tmp_path / "w")


def test_manifest_round_trip(tmp_path):
    m = apply_exclusions(fake_manifest(5), ["m0002"])
    write_manifest(tmp_path / "m.jsonl", m)
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert json.loads(lines[0]) == {"manifest_version": 1}
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.entries == m.entries
    with pytest.raises(FundusQAError):
        apply_exclusions(m, ["unknown"])
    (tmp_path / "bad.jsonl").write_text('{"manifest_version": 9}\n')
    with pytest.raises(FundusQAError):
        read_manifest(tmp_path / "bad.jsonl")


def test_unique_ids():
    with pytest.raises(FundusQAError):
        DatasetManifest([ManifestEntry("a", "r", "v"), ManifestEntry("a", "r2", "v2")])


# ---------------------------------------------------------------------------
# Splits


def test_published_split_sizes():
    m = fake_manifest(946)
    parts = split_dataset(m, SplitSpec(614, 155, 177, seed=3))
    assert [len(p) for p in parts] == [614, 155, 177]
    ids = [set(p.ids()) for p in parts]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert set().union(*ids) == set(m.ids())
    again = split_dataset(m, SplitSpec(614, 155, 177, seed=3))
    assert [p.ids() for p in parts] == [p.ids() for p in again]
    other = split_dataset(m, SplitSpec(614, 155, 177, seed=4))
    assert parts[0].ids() != other[0].ids()


def test_split_edge_cases():
    m = fake_manifest(20, excluded={3, 7})
    train, val, test = split_dataset(m, SplitSpec(18, 0, 0))
    assert len(train) == 18 and len(val) == len(test) == 0
    assert "m0003" not in train.ids()
    with pytest.raises(FundusQAError):
        split_dataset(m, SplitSpec(10, 5, 5))
    with pytest.raises(ValueError):
        SplitSpec(-1, 0, 0)


# ---------------------------------------------------------------------------
# Batch scoring


def test_score_batch_qv(tmp_path, corpus):
    m = build_manifest(corpus["retina"], corpus["vessel"], corpus["synthetic"])
    rows = score_batch(m, "qv", out_csv=tmp_path / "a.csv", threads=2)
    assert len(rows) == 6 and all(0.0 <= r["score"] <= 1.0 for r in rows)
    score_batch(m, "qv", out_csv=tmp_path / "b.csv", threads=1)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    back = read_scores(tmp_path / "a.csv")
    assert [back[r["id"]] for r in rows] == [r["score"] for r in rows]


def test_score_batch_exclusions_and_errors(tmp_path, corpus):
    m = build_manifest(corpus["retina"], corpus["vessel"])
    m = apply_exclusions(m, m.ids()[:2])
    m.entries[3].retina_path = str(tmp_path / "missing.png")
    rows = score_batch(m, "qv", out_csv=tmp_path / "s.csv", threads=1)
    assert len(rows) == 4
    assert rows[1]["error"] and rows[1]["score"] is None
    rows = score_batch(m, "qv", include_excluded=True, threads=1)
    assert len(rows) == 6 and [r["excluded"] for r in rows[:2]] == [True, True]
    with pytest.raises(FundusQAError):
        score_batch(m, "isc")


def test_exclusion_list_reduces_population():
    m = apply_exclusions(fake_manifest(177), [f"m{i:04d}" for i in range(0, 60, 10)])
    assert len(m.active) == 171


def test_worker_count(monkeypatch):
    monkeypatch.setenv("FUNDUS_QA_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("FUNDUS_QA_THREADS", "0")
    assert worker_count() >= 1
    monkeypatch.setenv("FUNDUS_QA_THREADS", "many")
    with pytest.raises(FundusQAError):
        worker_count()


def test_score_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rows = [{"id": f"x{i}", "score": float(v), "vessel_pixel_count": i, "excluded": False, "error": ""}
            for i, v in enumerate(rng.uniform(size=50))]
    rows.append({"id": "bad", "score": None, "vessel_pixel_count": None, "excluded": False, "error": "boom"})
    write_scores(tmp_path / "s.csv", rows)
    raw = (tmp_path / "s.csv").read_bytes()
    assert b"\r\n" not in raw
    back = read_scores(tmp_path / "s.csv")
    assert "bad" not in back
    assert all(back[r["id"]] == r["score"] for r in rows[:-1])


# ---------------------------------------------------------------------------
# Reports


def test_compare_matches_direct_stats():
    rng = np.random.default_rng(1)
    real = {f"i{k}": v for k, v in enumerate(rng.normal(0.3, 0.05, 40))}
    syn = {k: v - 0.02 + rng.normal(0, 0.01) for k, v in real.items()}
    syn["extra"] = 0.5
    table = compare_scores(real, syn, "qv")
    ids = sorted(real)
    ref = paired_t_test([real[i] for i in ids], [syn[i] for i in ids])
    pair = table.pairwise[0]
    assert pair.n == 40
    assert abs(pair.result.t_statistic - ref.t_statistic) <= 1e-12
    assert abs(pair.result.p_two_tailed - ref.p_two_tailed) <= 1e-12
    assert pair.significant
    assert table.rows[0].summary == summarize([real[i] for i in ids])
    text = table.render()
    assert "real" in text and "synthetic" in text and "yes" in text


def test_compare_zero_variance_and_disjoint(tmp_path):
    real = {"a": 0.1, "b": 0.2, "c": 0.4}
    table = compare_scores(real, dict(real))
    assert table.errors and table.pairwise[0].result is None
    assert len(table.rows) == 2
    assert "error" in table.render()
    with pytest.raises(FundusQAError):
        compare_scores({"a": 1.0}, {"b": 1.0})


def test_report_csv(tmp_path):
    rows_a = [{"id": f"i{k}", "score": 0.3 + 0.01 * k, "excluded": False, "error": ""} for k in range(10)]
    rows_b = [{"id": f"i{k}", "score": 0.25 + 0.011 * k + 0.001 * (k % 3), "excluded": False, "error": ""}
              for k in range(10)]
    write_scores(tmp_path / "a.csv", rows_a)
    write_scores(tmp_path / "b.csv", rows_b)
    table = compare_report(tmp_path / "a.csv", tmp_path / "b.csv", metric="qv")
    table.to_csv(tmp_path / "t.csv")
    with open(tmp_path / "t.csv", newline="") as fh:
        out = list(csv.DictReader(fh))
    assert [r["kind"] for r in out] == ["set", "set", "paired"]
    assert out[2]["significant_at_005"] == "1"
    assert float(out[2]["p_two_tailed"]) == table.pairwise[0].result.p_two_tailed
