"""Acceptance suite: one test per criterion, each at its stated tolerance.

A one-line PASS/FAIL summary per criterion is printed at the end of the
pytest run (see conftest.py). The benchmark-backed criteria share one
session-scoped run of the full synthetic benchmark.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import record
from groundret.benchmark import DEGRADED_QUERIES, BenchmarkConfig, run_benchmark
from groundret.cli import run as cli_run
from groundret.embednet.net import ArchConfig, EmbeddingNet, siamese_loss_and_grad
from groundret.embednet.train import TrainConfig, train_siamese
from groundret.evalloc import ransac_rigid
from groundret.geometry import Pose2D, footprint_contains, footprint_from_pose, overlap_fraction, rotation
from groundret.index import EmbeddingRecord, brute_force_topk, build_index
from groundret.pairs import build_training_pairs, overlap_table
from groundret.synth import generate_canvas, generate_mapset

W, H = 0.2, 0.15


@pytest.fixture(scope="session")
def benchmark():
    t0 = time.perf_counter()
    outcome = run_benchmark(BenchmarkConfig())
    outcome.seconds["total"] = time.perf_counter() - t0
    return outcome


def test_criterion_01_geometry_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, asym, self_ok = 0.0, 0.0, True
    for _ in range(100):
        pa = Pose2D(*rng.uniform(-1, 1, 2), rng.uniform(-math.pi, math.pi))
        pb = Pose2D(pa.x + rng.uniform(-0.15, 0.15), pa.y + rng.uniform(-0.12, 0.12), rng.uniform(-math.pi, math.pi))
        a, b = footprint_from_pose(pa, W, H), footprint_from_pose(pb, W, H)
        local = rng.uniform([-W / 2, -H / 2], [W / 2, H / 2], size=(1_000_000, 2))
        mc = footprint_contains(b, local @ rotation(pa.theta).T + [pa.x, pa.y]).mean()
        worst = max(worst, abs(overlap_fraction(a, b) - mc))
        asym = max(asym, abs(overlap_fraction(a, b) - overlap_fraction(b, a)))
        self_ok &= overlap_fraction(a, a) == 1.0
    seconds = time.perf_counter() - t0
    ok = worst < 3e-3 and asym < 1e-12 and self_ok and seconds < 60
    record(1, ok, f"max |analytic - MC| {worst:.2e}, max asymmetry {asym:.1e}, {seconds:.1f}s")
    assert ok


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    arch = ArchConfig(input_shape=(16, 20), widths=(4, 6), embed_dim=5, downsample=1, head_gain=1.0)
    net = EmbeddingNet(arch, seed=3, dtype=np.float64)
    rng = np.random.default_rng(3)
    xq, xr, o = rng.standard_normal((4, 16, 20)), rng.standard_normal((4, 16, 20)), rng.uniform(0, 1, 4)
    net.zero_grad()
    siamese_loss_and_grad(net, xq, xr, o)
    grads = {name: g.copy() for name, g in net.gradients()}
    params = dict(net.parameters())
    kinds = {type(layer).__name__ for layer in net.layers}

    def loss():
        net.zero_grad()
        return siamese_loss_and_grad(net, xq, xr, o)[0]

    flat = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    picks = rng.choice(len(flat), size=min(250, len(flat)), replace=False)
    h, worst = 1e-4, 0.0
    for i in picks:
        name, idx = flat[i]
        p = params[name]
        saved = p[idx]
        p[idx] = saved + h
        up = loss()
        p[idx] = saved - h
        down = loss()
        p[idx] = saved
        num = (up - down) / (2 * h)
        worst = max(worst, abs(grads[name][idx] - num) / max(abs(grads[name][idx]), abs(num), 1e-7))
    seconds = time.perf_counter() - t0
    ok = len(picks) >= 200 and worst < 1e-3 and seconds < 120 and len(kinds) == 6
    record(2, ok, f"{len(picks)} weights over {sorted(kinds)}, max rel err {worst:.2e}, {seconds:.1f}s")
    assert ok


def test_criterion_03_training_convergence():
    t0 = time.perf_counter()
    canvas = generate_canvas("speckle", (2.2, 2.2), 640, seed=0)
    ms = generate_mapset(canvas, n_queries=100, query_noise=DEGRADED_QUERIES, seed=0)
    pairs = build_training_pairs(ms, augment_factor=3, seed=0, independent_augment=True)
    result = train_siamese(pairs, ms, TrainConfig(learning_rate=1e-3, epochs=10), arch=ArchConfig())
    seconds = time.perf_counter() - t0
    best = result.best_epoch - 1
    err = result.val_abs_err[best]
    ratio = result.train_loss[-1] / result.train_loss[0]
    ok = len(pairs) >= 2000 and err < 0.15 and ratio < 0.5 and seconds < 1800
    record(3, ok, f"{len(ms.references)} refs, {len(ms.queries)} queries, {len(pairs)} pairs; held-out "
                  f"|d-(1-o)| {err:.3f} (< 0.15); loss ratio {ratio:.2f} (< 0.5); {seconds / 60:.1f} min")
    assert ok


def test_criterion_04_index_exactness():
    rng = np.random.default_rng(4)
    recs = [EmbeddingRecord(f"r{i:03d}", v) for i, v in enumerate(rng.standard_normal((500, 16)))]
    index = build_index(recs)
    mismatches = 0
    for q in rng.standard_normal((1000, 16)):
        mismatches += index.query(q, 10) != brute_force_topk(recs, q, 10).ranked
    record(4, mismatches == 0, f"{mismatches} mismatches over 1000 queries x 500 records")
    assert mismatches == 0


def random_sigma(outcome):
    """Expected random R0@k and its standard error from per-query hypergeometric variance."""
    expected, var = [], []
    for t in outcome.textures:
        n, k = t.n_refs, t.k
        p = k / n
        for m in t.available.values():
            d = min(k, m)
            expected.append(k * m / n / d)
            var.append(m * p * (1 - p) * (n - k) / (n - 1) / d ** 2)
    n_q = len(var)
    return float(np.mean(expected)), math.sqrt(sum(var)) / n_q


def test_criterion_05_recall_ordering(benchmark):
    r = {m: benchmark.mean_recall(m) for m in ("dml", "bow", "untrained", "random")}
    expected, sigma = random_sigma(benchmark)
    order = r["dml"] > r["bow"] > r["untrained"] > r["random"]
    factor = r["dml"] >= 1.5 * r["bow"]
    chance = abs(r["random"] - expected) <= 3 * sigma
    ok = order and factor and chance
    record(5, ok, "R0@k trained {dml:.3f} bow {bow:.3f} untrained {untrained:.3f} random {random:.3f}; ".format(**r)
           + f"ordering {'ok' if order else 'violated'}; trained/bow {r['dml'] / r['bow']:.2f} (>= 1.5); "
           + f"random vs chance {expected:.3f} +- {3 * sigma:.3f}")
    assert ok


def test_criterion_06_low_overlap_advantage(benchmark):
    wins = [t.style for t in benchmark.textures if t.reports["dml"].bands["<40"][0] > t.reports["bow"].bands["<40"][0]]
    r80 = {m: benchmark.mean_recall(m, 0.8) for m in ("dml", "bow")}
    ok = len(wins) >= 4 and min(r80.values()) >= 0.8
    record(6, ok, f"trained wins the <40% band on {len(wins)}/6 textures {wins}; "
                  f"R80@k trained {r80['dml']:.3f} bow {r80['bow']:.3f}")
    assert ok


def test_criterion_07_failure_counts(benchmark):
    f = {m: benchmark.total_failures(m) for m in ("dml", "bow")}
    ok = f["dml"] <= f["bow"]
    record(7, ok, f"complete failures trained {f['dml']} vs bow {f['bow']}")
    assert ok


def test_criterion_08_ransac_recovery():
    rng = np.random.default_rng(8)
    src = rng.uniform(-60, 60, (40, 2))
    phi0, t0 = 0.9, np.array([7.0, -3.0])
    phi, t, _ = ransac_rigid(src, src @ rotation(phi0).T + t0, seed=0)
    exact = abs(phi - phi0) < 1e-6 and np.abs(t - t0).max() < 1e-6
    successes = 0
    for seed in range(100):
        g = np.random.default_rng(1000 + seed)
        a, tt = g.uniform(-math.pi, math.pi), g.uniform(-40, 40, 2)
        s = g.uniform(-60, 60, (50, 2))
        d = s @ rotation(a).T + tt + g.normal(0, 0.5, (50, 2))
        bad = g.permutation(50)[:30]
        d[bad] = g.uniform(-120, 120, (30, 2))
        phi, t, _ = ransac_rigid(s, d, iterations=2000, inlier_px=3.0, seed=seed)
        truth = s @ rotation(a).T + tt
        successes += np.linalg.norm(s @ rotation(phi).T + t - truth, axis=1).max() <= 3.0
    ok = exact and successes >= 95
    record(8, ok, f"noise-free recovery {'within' if exact else 'outside'} 1e-6; "
                  f"60% outliers: {successes}/100 trials succeed")
    assert ok


def test_criterion_09_localization(benchmark):
    s = {src: benchmark.mean_success(src) for src in ("none", "bow", "dml")}
    sec = {src: benchmark.mean_localization_seconds(src) for src in ("none", "dml")}
    ok_rate = s["dml"] >= s["none"] - 0.02 and s["dml"] > s["bow"]
    ok_time = sec["dml"] < sec["none"]
    record(9, ok_rate and ok_time,
           f"success none {s['none']:.3f} bow {s['bow']:.3f} trained {s['dml']:.3f}; "
           f"ms/query all-refs {1000 * sec['none']:.1f} vs top-k {1000 * sec['dml']:.1f}")
    assert ok_rate and ok_time


SMALL = {
    "dataset": {"extent": [0.8, 0.8], "n_queries": 8, "out_shape": [48, 64]},
    "arch": {"input_shape": [48, 64], "widths": [4, 8]},
    "train": {"epochs": 2, "batch_size": 32},
    "bow": {"vocab_size": 32, "vocab_features": 40, "features_per_image": 40, "sweep_values": [20, 40]},
    "eval": {"k": 10},
    "localization": {"features_per_image": 40},
}


def pipeline(root, cfg):
    c = ["--config", str(cfg), "--seed", "5"]
    return [
        ["generate", *c, "--out", f"{root}/ms"],
        ["ingest", *c, "--manifest", f"{root}/ms/manifest.csv", "--out", f"{root}/ingested"],
        ["pairs", *c, "--mapset", f"{root}/ms", "--out", f"{root}/pairs"],
        ["train", *c, "--mapset", f"{root}/ms", "--pairs", f"{root}/pairs/pairs.csv", "--out", f"{root}/model"],
        ["embed", *c, "--mapset", f"{root}/ms", "--model", f"{root}/model/model.gnet", "--out", f"{root}/emb"],
        ["index", *c, "--embeddings", f"{root}/emb/references.gemb", "--out", f"{root}/index"],
        ["bow-vocab", *c, "--mapset", f"{root}/ms", "--out", f"{root}/vocab"],
        ["bow-embed", *c, "--mapset", f"{root}/ms", "--vocab", f"{root}/vocab/vocab.gvoc", "--out", f"{root}/bow"],
        ["retrieve", *c, "--references", f"{root}/emb/references.gemb", "--queries", f"{root}/emb/queries.gemb",
         "--out", f"{root}/ret"],
        ["eval", *c, "--mapset", f"{root}/ms", "--retrievals", f"dml={root}/ret/retrievals.csv", "--out", f"{root}/eval"],
        ["localize", *c, "--mapset", f"{root}/ms", "--retrievals", f"dml={root}/ret/retrievals.csv",
         "--out", f"{root}/loc"],
        ["report", *c, "--inputs", f"{root}/eval", f"{root}/loc", "--out", f"{root}/report"],
        ["sweep", *c, "--mapset", f"{root}/ms", "--out", f"{root}/sweep"],
    ]


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    trees, codes = [], []
    for run_dir in ("a", "b"):
        # identical working paths so the recorded input paths match too
        root = tmp_path / "work"
        codes += [cli_run(argv) for argv in pipeline(root, cfg)]
        files = {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
                 if p.is_file() and p.name != "timing.json"}
        trees.append(files)
        (tmp_path / run_dir).mkdir()
        root.rename(tmp_path / run_dir / "work")
    differing = sorted(str(k) for k in trees[0] if trees[0][k] != trees[1].get(k))
    ok = all(c == 0 for c in codes) and not differing and trees[0].keys() == trees[1].keys()
    record(10, ok, f"{len(trees[0])} artifact files from 13 commands rerun; {len(differing)} differ"
                   + (f" ({differing[:3]})" if differing else ""))
    assert ok
