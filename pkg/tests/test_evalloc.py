import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundret.errors import InvalidArgument
from groundret.evalloc import (
    BAND_FIELDS,
    LOCALIZATION_FIELDS,
    RECALL_FIELDS,
    X_THRESHOLDS,
    LocalizationConfig,
    LocalizationSummary,
    count_failures,
    emit_report,
    evaluate_retrieval,
    localization_campaign,
    match_features,
    random_retrieval,
    ransac_rigid,
    ransac_rigid_pose,
    read_report,
    recall_at_k,
)
from groundret.features import LocalFeatures
from groundret.geometry import OverlapLabel, Pose2D, rotation
from groundret.index import RetrievalResult
from groundret.pairs import overlap_table
from groundret.synth import generate_canvas, generate_mapset


def result(qid, ids, k=None):
    return RetrievalResult(qid, [(r, float(i)) for i, r in enumerate(ids)], k or len(ids))


def test_recall_arithmetic_example():
    labels = [OverlapLabel("q", f"r{i}", 0.5) for i in range(5)]
    res = result("q", ["r0", "x1", "r1", "r2", "x2"], 100)
    entry = recall_at_k([res], labels, 100)
    assert entry.per_query["q"] == pytest.approx(0.6)
    assert recall_at_k([result("q", [f"r{i}" for i in range(5)])], labels, 100).recall == 1.0
    with pytest.raises(InvalidArgument):
        recall_at_k([res], labels, 0)


def test_denominator_capped_by_k_and_empty_queries_excluded():
    labels = {"q": {f"r{i}": 0.9 for i in range(10)}, "lonely": {}}
    res = [result("q", ["r0", "r1", "x"]), result("lonely", ["r0"])]
    entry = recall_at_k(res, labels, 3)
    assert entry.per_query == {"q": pytest.approx(2 / 3)}
    assert entry.n_included == 1
    assert math.isnan(recall_at_k(res[1:], labels, 3).recall)


def test_threshold_zero_means_any_overlap():
    labels = {"q": {"a": 0.05, "b": 0.3}}
    res = [result("q", ["a", "z"])]
    assert recall_at_k(res, labels, 2, 0.0).recall == 0.5
    assert recall_at_k(res, labels, 2, 0.2).recall == 0.0


@pytest.fixture(scope="module")
def dense_map():
    canvas = generate_canvas("grid", (1.0, 1.0), 200, seed=2)
    ms = generate_mapset(canvas, grid_spacing=0.08, n_queries=40, seed=2, out_shape=(30, 40))
    return ms, overlap_table(ms)


def oracle(ms, table, k, worst=False):
    out = []
    for q in ms.queries:
        ranked = sorted((r.id for r in ms.references), key=lambda rid: (-table[q.id].get(rid, 0.0), rid))
        out.append(result(q.id, (ranked[::-1] if worst else ranked)[:k], k))
    return out


def test_oracle_retriever_scores_one(dense_map):
    ms, table = dense_map
    rep = evaluate_retrieval(oracle(ms, table, 10), table, 10)
    for x in X_THRESHOLDS:
        if not math.isnan(rep.recall[x]):
            assert rep.recall[x] == 1.0
    assert rep.failure_count == 0


def test_worst_k_failures_match_recount(dense_map):
    ms, table = dense_map
    k = 20
    res = oracle(ms, table, k, worst=True)
    recount = sum(1 for r in res if table[r.query_id] and not set(r.ids) & set(table[r.query_id]))
    assert count_failures(res, table, k) == recount
    assert recount > 0


def test_random_recall_near_chance(dense_map):
    ms, table = dense_map
    refs = [r.id for r in ms.references]
    k = 15
    per_query = []
    for seed in range(5):
        res = random_retrieval([q.id for q in ms.queries], refs, k, seed=seed)
        per_query += list(recall_at_k(res, table, k).per_query.values())
    p = k / len(refs)
    # per-query recall is hits/min(k, m) with hits ~ hypergeometric(mean k*m/N)
    expected, var = [], []
    for q in ms.queries:
        m = len(table[q.id])
        if m:
            d = min(k, m)
            expected.append(p * m / d)
            var.append(m * p * (1 - p) * (len(refs) - k) / max(len(refs) - 1, 1) / d ** 2)
    mean_exp = np.mean(expected)
    sigma = math.sqrt(np.sum(var) / len(var) ** 2 / 5)
    assert abs(np.mean(per_query) - mean_exp) < 3 * sigma


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 19))
def test_truncating_the_list_never_raises_recall(seed, keep):
    rng = np.random.default_rng(seed)
    refs = [f"r{i}" for i in range(30)]
    table = {"q": {r: float(rng.uniform(0.01, 1)) for r in rng.choice(refs, 8, replace=False)}}
    ranked = list(rng.permutation(refs)[:20])
    for x in X_THRESHOLDS:
        full = recall_at_k([result("q", ranked)], table, 20, x).per_query.get("q")
        cut = recall_at_k([result("q", ranked[:keep], 20)], table, 20, x).per_query.get("q")
        assert (full is None) == (cut is None)
        if full is not None:
            assert cut <= full


def test_band_counts_sum_to_available(dense_map):
    ms, table = dense_map
    rep = evaluate_retrieval(oracle(ms, table, 10), table, 10)
    low, high = rep.bands["<40"], rep.bands[">=40"]
    total = sum(len(v) for v in table.values())
    assert low[1] + high[1] == total
    assert low[0] <= low[1] and high[0] <= high[1]


# --- matching and RANSAC ----------------------------------------------------


def random_feats(rng, n, dim=128):
    d = rng.standard_normal((n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return LocalFeatures(rng.uniform(0, 100, (n, 2)), np.ones(n), -np.arange(n, dtype=float), np.zeros(n), d)


def test_identical_sets_match_their_twins():
    f = random_feats(np.random.default_rng(0), 40)
    m = match_features(f, f)
    assert np.array_equal(m[:, 0], np.arange(40)) and np.array_equal(m[:, 1], np.arange(40))
    assert len(match_features(f, f, ratio=0.0)) == 0


def test_ratio_test_raises_precision():
    rng = np.random.default_rng(1)
    n = 100
    ref = random_feats(rng, n)
    q_desc = ref.descriptors + rng.normal(0, 0.05, ref.descriptors.shape)
    outliers = rng.random(n) < 0.5
    q_desc[outliers] = rng.standard_normal((outliers.sum(), 128))
    q_desc /= np.linalg.norm(q_desc, axis=1, keepdims=True)
    query = LocalFeatures(ref.xy, ref.scale, ref.response, ref.orientation, q_desc)
    kept = match_features(query, ref)
    nn = np.argmin(((q_desc[:, None] - ref.descriptors[None]) ** 2).sum(-1), axis=1)
    unfiltered = np.mean(nn == np.arange(n))
    precision = np.mean(kept[:, 0] == kept[:, 1])
    assert len(kept) > 0 and precision > unfiltered


def transformed(rng, m, phi, t):
    src = rng.uniform(-60, 60, (m, 2))
    return src, src @ rotation(phi).T + t


def test_noise_free_recovery():
    rng = np.random.default_rng(2)
    src, dst = transformed(rng, 30, 0.7, np.array([12.5, -4.0]))
    phi, t, inliers = ransac_rigid(src, dst, seed=0)
    assert abs(phi - 0.7) < 1e-6 and np.allclose(t, [12.5, -4.0], atol=1e-6)
    assert inliers.all()


def test_sixty_percent_outliers():
    ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        phi0, t0 = rng.uniform(-math.pi, math.pi), rng.uniform(-30, 30, 2)
        src, dst = transformed(rng, 50, phi0, t0)
        dst = dst + rng.normal(0, 0.5, dst.shape)
        bad = rng.permutation(50)[:30]
        dst[bad] = rng.uniform(-100, 100, (30, 2))
        phi, t, _ = ransac_rigid(src, dst, iterations=2000, inlier_px=3.0, seed=seed)
        err = np.linalg.norm(src @ rotation(phi).T + t - (src @ rotation(phi0).T + t0), axis=1).max()
        ok += err <= 3.0
    assert ok >= 95


def test_too_few_correspondences_give_no_pose():
    res = ransac_rigid_pose(np.zeros((1, 2)), np.zeros((1, 2)), Pose2D(0, 0, 0), 0.001, truth=Pose2D(0, 0, 0))
    assert res.estimated_pose is None and not res.success


def test_identity_transform_succeeds():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-50, 50, (20, 2))
    ref = Pose2D(0.4, 0.3, 1.0)
    res = ransac_rigid_pose(pts, pts, ref, 0.0015, truth=ref)
    assert res.success and res.translation_err < 1e-12 and res.rotation_err < 1e-12


@pytest.fixture(scope="module")
def self_map():
    canvas = generate_canvas("speckle", (0.7, 0.7), 640, seed=8)
    ms = generate_mapset(canvas, n_queries=0, seed=8)
    # queries rendered exactly at reference poses, without noise
    from groundret.synth import GroundImage, MapSet

    queries = [GroundImage(f"q{i}", r.pixels, r.pose, r.width, r.height) for i, r in enumerate(ms.references[:8])]
    return MapSet(ms.references, queries)


def test_self_localization_without_retrieval(self_map):
    summary = localization_campaign(self_map, "none", config=LocalizationConfig())
    assert summary.success_rate == 1.0


def test_retrieval_without_overlap_counts_as_failure(self_map):
    table = overlap_table(self_map)
    far = {}
    for q in self_map.queries:
        ids = [r.id for r in self_map.references if r.id not in table[q.id]][:3]
        far[q.id] = result(q.id, ids, 3)
    summary = localization_campaign(self_map, "bow", 3, far)
    assert summary.success_rate == 0.0
    with pytest.raises(InvalidArgument):
        localization_campaign(self_map, "dml", 3, None)


# --- reports ----------------------------------------------------------------


def test_empty_report_is_schema_valid(tmp_path):
    emit_report([], [], tmp_path)
    with open(tmp_path / "recall.csv") as fh:
        assert next(csv.reader(fh)) == list(RECALL_FIELDS)
    with open(tmp_path / "bands.csv") as fh:
        assert next(csv.reader(fh)) == list(BAND_FIELDS)
    with open(tmp_path / "localization.csv") as fh:
        assert next(csv.reader(fh)) == list(LOCALIZATION_FIELDS)
    assert read_report(tmp_path) == {"recall": [], "bands": [], "failures": [], "localization": []}


def test_report_roundtrip(dense_map, tmp_path):
    ms, table = dense_map
    rep = evaluate_retrieval(oracle(ms, table, 10), table, 10, texture="grid", method="oracle")
    loc = LocalizationSummary("grid", "none", 0.75, 0.001, 0.002, 0.01)
    emit_report([rep], [loc], tmp_path, {"seed": 1})
    back = read_report(tmp_path)
    recalls = {row["x_threshold"]: row["recall"] for row in back["recall"]}
    assert set(recalls) == set(X_THRESHOLDS)
    for x in X_THRESHOLDS:
        assert recalls[x] == rep.recall[x] or (math.isnan(recalls[x]) and math.isnan(rep.recall[x]))
    assert {r["band"]: (r["correct"], r["available"]) for r in back["bands"]} == rep.bands
    assert back["failures"][0]["failure_count"] == rep.failure_count
    assert back["localization"][0]["success_rate"] == 0.75


def test_report_directory_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_report([], [], blocker / "sub")
