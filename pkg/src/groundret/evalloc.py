"""Retrieval scoring (overlap-thresholded recall@k, failures, bands) and
retrieval-constrained localization via descriptor matching and RANSAC."""

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .geometry import Pose2D, pose_error, rotation

X_THRESHOLDS = (0.0, 0.2, 0.4, 0.6, 0.8)
BAND_SPLIT = 0.4
BANDS = ("<40", ">=40")
SUCCESS_TRANSLATION_M = 0.0048
SUCCESS_ROTATION_RAD = math.radians(1.5)

RECALL_FIELDS = ("texture", "method", "x_threshold", "k", "recall")
BAND_FIELDS = ("texture", "method", "band", "correct", "available")
FAILURE_FIELDS = ("texture", "method", "k", "failure_count", "n_queries")
LOCALIZATION_FIELDS = ("texture", "source", "success_rate", "mean_translation_err_m", "mean_rotation_err_rad")


def label_table(labels):
    """Normalize labels to {query_id: {ref_id: overlap}} keeping overlap > 0."""
    if isinstance(labels, dict):
        return {q: {r: o for r, o in refs.items() if o > 0} for q, refs in labels.items()}
    table = {}
    for lab in labels:
        refs = table.setdefault(lab.query_id, {})
        if lab.overlap > 0:
            refs[lab.ref_id] = lab.overlap
    return table


def _relevant(refs, x):
    # x = 0 means "any overlap at all"
    return {r for r, o in refs.items() if (o > 0 if x == 0 else o >= x)}


@dataclass
class RecallEntry:
    x: float
    k: int
    recall: float
    per_query: dict
    n_included: int


def recall_at_k(results, labels, k, min_overlap=0.0):
    """Mean over queries of |top-k ∩ relevant| / min(k, |relevant|).

    Queries without any relevant reference are left out of the mean; with
    no included query the recall is NaN.
    """
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    table = label_table(labels)
    per_query = {}
    for res in results:
        relevant = _relevant(table.get(res.query_id, {}), min_overlap)
        if not relevant:
            continue
        hits = len(set(res.ids[:k]) & relevant)
        per_query[res.query_id] = hits / min(k, len(relevant))
    mean = float(np.mean(list(per_query.values()))) if per_query else float("nan")
    return RecallEntry(min_overlap, k, mean, per_query, len(per_query))


def count_failures(results, labels, k=None):
    """Queries with overlapping references none of which appear in the top-k."""
    table = label_table(labels)
    failures = 0
    for res in results:
        relevant = _relevant(table.get(res.query_id, {}), 0.0)
        if relevant and not set(res.ids[:k] if k else res.ids) & relevant:
            failures += 1
    return failures


def band_counts(results, labels, k):
    """{band: (correct, available)} summed over queries, bands split at 40% overlap."""
    table = label_table(labels)
    counts = {b: [0, 0] for b in BANDS}
    for res in results:
        refs = table.get(res.query_id, {})
        top = set(res.ids[:k])
        for rid, o in refs.items():
            band = BANDS[0] if o < BAND_SPLIT else BANDS[1]
            counts[band][1] += 1
            counts[band][0] += rid in top
    return {b: tuple(v) for b, v in counts.items()}


@dataclass
class RecallReport:
    texture: str
    method: str
    k: int
    recall: dict  # {x: aggregate R_x@k}
    per_query: dict  # {x: {query_id: recall}}
    failure_count: int
    n_queries: int
    bands: dict  # {band: (correct, available)}


def evaluate_retrieval(results, labels, k, texture="", method=""):
    entries = [recall_at_k(results, labels, k, x) for x in X_THRESHOLDS]
    table = label_table(labels)
    n_queries = sum(1 for r in results if table.get(r.query_id))
    return RecallReport(texture, method, k,
                        {e.x: e.recall for e in entries}, {e.x: e.per_query for e in entries},
                        count_failures(results, table, k), n_queries, band_counts(results, table, k))


def random_retrieval(query_ids, reference_ids, k, seed=0):
    """Uniformly random top-k per query, as an evaluation floor."""
    from .index import RetrievalResult

    rng = np.random.default_rng([seed, 17])
    k_eff = min(k, len(reference_ids))
    out = []
    for qid in query_ids:
        picks = rng.choice(len(reference_ids), size=k_eff, replace=False)
        out.append(RetrievalResult(qid, [(reference_ids[i], 0.0) for i in picks], k))
    return out


# ---------------------------------------------------------------------------
# matching and pose estimation


def match_features(query_feats, ref_feats, ratio=0.8):
    """Ratio-tested, mutually-best descriptor matches as (query_idx, ref_idx) rows."""
    if len(query_feats) == 0 or len(ref_feats) < 2 or ratio <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    a, b = query_feats.descriptors, ref_feats.descriptors
    if a.shape[1] != b.shape[1]:
        raise InvalidArgument(f"descriptor dims differ: {a.shape[1]} vs {b.shape[1]}")
    d2 = np.maximum((a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None], 0.0)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(a))
    d1 = np.sqrt(d2[rows, nn[:, 0]])
    dd = np.sqrt(d2[rows, nn[:, 1]])
    passed = d1 < ratio * dd
    # exact duplicates (d1 == d2 == 0) are ambiguous and rejected too
    back = d2.argmin(axis=0)
    mutual = back[nn[:, 0]] == rows
    keep = np.nonzero(passed & mutual)[0]
    return np.stack([keep, nn[keep, 0]], axis=1).astype(np.int64)


def pixel_to_local(xy, shape):
    """Keypoint (col, row) to image-centred coordinates in pixels."""
    h, w = shape
    return np.asarray(xy, dtype=np.float64) + 0.5 - np.array([w / 2.0, h / 2.0])


def fit_rigid(src, dst):
    """Least-squares rotation + translation mapping src onto dst (no scale)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    s, d = src - cs, dst - cd
    num = np.sum(s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0])
    den = np.sum(s[:, 0] * d[:, 0] + s[:, 1] * d[:, 1])
    phi = math.atan2(num, den)
    t = cd - rotation(phi) @ cs
    return phi, t


def _two_point_models(src, dst, idx):
    """Exact rigid transforms from correspondence pairs idx (n, 2)."""
    vs = src[idx[:, 1]] - src[idx[:, 0]]
    vd = dst[idx[:, 1]] - dst[idx[:, 0]]
    phi = np.arctan2(vd[:, 1], vd[:, 0]) - np.arctan2(vs[:, 1], vs[:, 0])
    c, s = np.cos(phi), np.sin(phi)
    p0 = src[idx[:, 0]]
    tx = dst[idx[:, 0], 0] - (c * p0[:, 0] - s * p0[:, 1])
    ty = dst[idx[:, 0], 1] - (s * p0[:, 0] + c * p0[:, 1])
    return phi, c, s, tx, ty


def ransac_rigid(src, dst, iterations=2000, inlier_px=3.0, seed=0, chunk=500):
    """Robust rigid transform src -> dst.

    Returns (phi, t, inlier_mask) or None with fewer than two points.
    All pairs are tried when there are no more of them than ``iterations``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    m = len(src)
    if m < 2:
        return None
    if m * (m - 1) // 2 <= iterations:
        i, j = np.triu_indices(m, k=1)
        samples = np.stack([i, j], axis=1)
    else:
        rng = np.random.default_rng([seed, 19])
        a = rng.integers(0, m, size=iterations)
        b = (a + rng.integers(1, m, size=iterations)) % m
        samples = np.stack([a, b], axis=1)
    # degenerate samples (coincident points) cannot define a rotation
    spread = np.linalg.norm(src[samples[:, 1]] - src[samples[:, 0]], axis=1)
    samples = samples[spread > 1e-9]
    if len(samples) == 0:
        return None
    thr2 = inlier_px ** 2
    best_count, best_model = -1, None
    for start in range(0, len(samples), chunk):
        phi, c, s, tx, ty = _two_point_models(src, dst, samples[start:start + chunk])
        px = c[:, None] * src[None, :, 0] - s[:, None] * src[None, :, 1] + tx[:, None]
        py = s[:, None] * src[None, :, 0] + c[:, None] * src[None, :, 1] + ty[:, None]
        err2 = (px - dst[None, :, 0]) ** 2 + (py - dst[None, :, 1]) ** 2
        counts = (err2 <= thr2).sum(axis=1)
        top = int(np.argmax(counts))
        if counts[top] > best_count:
            best_count = int(counts[top])
            best_model = (phi[top], np.array([tx[top], ty[top]]))
    phi, t = best_model
    inliers = _residuals(src, dst, phi, t) <= inlier_px
    if inliers.sum() >= 2:
        phi, t = fit_rigid(src[inliers], dst[inliers])
        refined = _residuals(src, dst, phi, t) <= inlier_px
        if refined.sum() >= inliers.sum():
            inliers = refined
    return float(phi), t, inliers


def _residuals(src, dst, phi, t):
    return np.linalg.norm(src @ rotation(phi).T + t - dst, axis=1)


@dataclass
class LocalizationResult:
    query_id: str
    estimated_pose: Pose2D = None
    inlier_count: int = 0
    success: bool = False
    ref_id: str = None
    translation_err: float = float("nan")
    rotation_err: float = float("nan")


def compose_pose(ref_pose, phi, t_px, meters_per_px):
    """Map-frame query pose from a query->reference transform in pixel units."""
    t_local = np.asarray(t_px) * meters_per_px
    xy = np.array([ref_pose.x, ref_pose.y]) + rotation(ref_pose.theta) @ t_local
    return Pose2D(float(xy[0]), float(xy[1]), ref_pose.theta + phi)


def is_success(estimate, truth, translation_tol=SUCCESS_TRANSLATION_M, rotation_tol=SUCCESS_ROTATION_RAD):
    dt, dr = pose_error(estimate, truth)
    return dt <= translation_tol and dr <= rotation_tol


def ransac_rigid_pose(query_xy, ref_xy, ref_pose, meters_per_px, iterations=2000, inlier_px=3.0,
                      seed=0, truth=None, query_id=""):
    """Estimate the query's map pose from matched keypoints in image-centred pixels.

    ``query_xy[i]`` corresponds to ``ref_xy[i]``; success is judged against
    ``truth`` when given.
    """
    fit = ransac_rigid(query_xy, ref_xy, iterations, inlier_px, seed)
    if fit is None:
        return LocalizationResult(query_id)
    phi, t, inliers = fit
    est = compose_pose(ref_pose, phi, t, meters_per_px)
    result = LocalizationResult(query_id, est, int(inliers.sum()))
    if truth is not None:
        result.translation_err, result.rotation_err = pose_error(est, truth)
        result.success = is_success(est, truth)
    return result


@dataclass
class LocalizationConfig:
    ratio: float = 0.8
    iterations: int = 2000
    inlier_px: float = 3.0
    features_per_image: int = 100
    scale_tolerance_with_resolution: bool = False
    seed: int = 0


def localize_query(query, candidates, store, config, ref_lookup):
    """Match + RANSAC against every candidate; keep the highest-inlier model."""
    n_feat = config.features_per_image
    qf = store.get(query, n_feat)
    best = LocalizationResult(query.id)
    if len(qf) < 2:
        return best
    q_local = pixel_to_local(qf.xy, query.pixels.shape)
    for n, rid in enumerate(candidates):
        ref = ref_lookup[rid]
        rf = store.get(ref, n_feat)
        matches = match_features(qf, rf, config.ratio)
        if len(matches) < 2 or len(matches) <= best.inlier_count:
            continue
        r_local = pixel_to_local(rf.xy, ref.pixels.shape)
        res = ransac_rigid_pose(q_local[matches[:, 0]], r_local[matches[:, 1]], ref.pose, ref.meters_per_px,
                                config.iterations, config.inlier_px, seed=config.seed + n, query_id=query.id)
        if res.inlier_count > best.inlier_count:
            best = res
            best.ref_id = rid
    if best.estimated_pose is not None:
        best.translation_err, best.rotation_err = pose_error(best.estimated_pose, query.pose)
        t_tol = SUCCESS_TRANSLATION_M
        if config.scale_tolerance_with_resolution:
            t_tol = max(t_tol, config.inlier_px * query.meters_per_px)
        best.success = is_success(best.estimated_pose, query.pose, t_tol)
    return best


@dataclass
class LocalizationSummary:
    texture: str
    source: str
    success_rate: float
    mean_translation_err_m: float
    mean_rotation_err_rad: float
    mean_seconds_per_query: float
    results: list = field(default_factory=list)


def localization_campaign(mapset, retrieval_source="none", k=100, retrievals=None, feature_store=None,
                          config=None, texture=""):
    """Localize every query against all references or its top-k retrievals.

    ``retrievals`` maps query id to RetrievalResult and is required unless
    the source is "none". Queries whose candidates yield no pose count as
    failures. Mean errors are taken over successful queries only.
    """
    from .bow import FeatureStore

    config = config or LocalizationConfig()
    if retrieval_source not in ("none", "bow", "dml", "random"):
        raise InvalidArgument(f"unknown retrieval source {retrieval_source!r}")
    if retrieval_source != "none" and retrievals is None:
        raise InvalidArgument(f"retrieval source {retrieval_source!r} needs retrieval results")
    store = feature_store if feature_store is not None else FeatureStore()
    lookup = {r.id: r for r in mapset.references}
    all_ids = [r.id for r in mapset.references]
    results, elapsed = [], 0.0
    for q in mapset.queries:
        cands = all_ids if retrieval_source == "none" else retrievals[q.id].ids[:k]
        t0 = time.perf_counter()
        results.append(localize_query(q, cands, store, config, lookup))
        elapsed += time.perf_counter() - t0
    n = len(results)
    ok = [r for r in results if r.success]
    return LocalizationSummary(
        texture, retrieval_source,
        len(ok) / n if n else float("nan"),
        float(np.mean([r.translation_err for r in ok])) if ok else float("nan"),
        float(np.mean([r.rotation_err for r in ok])) if ok else float("nan"),
        elapsed / n if n else float("nan"),
        results,
    )


# ---------------------------------------------------------------------------
# reports


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_csv(path, fields, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc.strerror}") from exc


def emit_report(recall_reports, localization=(), out_dir=".", manifest=None):
    """Write recall.csv, bands.csv, failures.csv, localization.csv and report.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc.strerror}") from exc
    recall_rows, band_rows, fail_rows = [], [], []
    for rep in recall_reports:
        for x in X_THRESHOLDS:
            recall_rows.append((rep.texture, rep.method, x, rep.k, rep.recall[x]))
        for b in BANDS:
            band_rows.append((rep.texture, rep.method, b, *rep.bands[b]))
        fail_rows.append((rep.texture, rep.method, rep.k, rep.failure_count, rep.n_queries))
    loc_rows = [(s.texture, s.source, s.success_rate, s.mean_translation_err_m, s.mean_rotation_err_rad)
                for s in localization]
    paths = {
        "recall": out / "recall.csv",
        "bands": out / "bands.csv",
        "failures": out / "failures.csv",
        "localization": out / "localization.csv",
    }
    _write_csv(paths["recall"], RECALL_FIELDS, recall_rows)
    _write_csv(paths["bands"], BAND_FIELDS, band_rows)
    _write_csv(paths["failures"], FAILURE_FIELDS, fail_rows)
    _write_csv(paths["localization"], LOCALIZATION_FIELDS, loc_rows)
    summary = {
        "manifest": manifest or {},
        "recall": [dict(zip(RECALL_FIELDS, r)) for r in recall_rows],
        "failures": [dict(zip(FAILURE_FIELDS, r)) for r in fail_rows],
        "localization": [{**dict(zip(LOCALIZATION_FIELDS, r)), "mean_seconds_per_query": s.mean_seconds_per_query}
                         for r, s in zip(loc_rows, localization)],
    }
    paths["json"] = out / "report.json"
    with open(paths["json"], "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    return paths


def read_report(out_dir):
    """Parse the CSVs written by emit_report into lists of typed dicts."""
    out = Path(out_dir)
    types = {"x_threshold": float, "k": int, "recall": float, "correct": int, "available": int,
             "failure_count": int, "n_queries": int, "success_rate": float,
             "mean_translation_err_m": float, "mean_rotation_err_rad": float}

    def load(name):
        with open(out / name, newline="") as fh:
            return [{key: types.get(key, str)(val) for key, val in row.items()} for row in csv.DictReader(fh)]

    return {name: load(f"{name}.csv") for name in ("recall", "bands", "failures", "localization")}
