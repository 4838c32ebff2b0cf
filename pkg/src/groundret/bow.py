"""Bag-of-visual-words baseline: vocabulary, tf-idf histograms, retrieval."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatVersionError, InvalidArgument, ParseError
from .features import detect_and_describe
from .index import EmbeddingRecord, RetrievalResult, brute_force_topk

GVOC_MAGIC = b"GVOC"
GVOC_VERSION = 1


@dataclass
class Vocabulary:
    centroids: np.ndarray
    idf: np.ndarray
    training_meta: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


@dataclass
class BowHistogram:
    image_id: str
    weights: np.ndarray


def _sq_dists(x, c, c_sq=None):
    c_sq = (c * c).sum(axis=1) if c_sq is None else c_sq
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + c_sq[None, :]
    return np.maximum(d, 0.0)


def assign(x, centroids, chunk=4096):
    """Nearest-centroid index per row (ties go to the lowest index)."""
    c_sq = (centroids * centroids).sum(axis=1)
    out = np.empty(len(x), dtype=np.int64)
    for i in range(0, len(x), chunk):
        out[i:i + chunk] = _sq_dists(x[i:i + chunk], centroids, c_sq).argmin(axis=1)
    return out


def kmeans_pp(x, k, rng):
    centers = [int(rng.integers(len(x)))]
    d2 = _sq_dists(x, x[centers[0]][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise InvalidArgument("not enough distinct points to seed k-means")
        idx = int(rng.choice(len(x), p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return x[centers].copy()


def kmeans(x, k, seed=0, max_iter=100, tol=1e-4):
    """Lloyd iterations from k-means++ seeds.

    Returns (centroids, objective history); an empty cluster keeps its
    previous centroid so the objective never increases.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise InvalidArgument(f"{len(x)} points cannot form {k} clusters")
    rng = np.random.default_rng([seed, 11])
    centroids = kmeans_pp(x, k, rng)
    history = []
    for _ in range(max_iter):
        labels = assign(x, centroids)
        history.append(float(((x - centroids[labels]) ** 2).sum()))
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        new = centroids.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    labels = assign(x, centroids)
    history.append(float(((x - centroids[labels]) ** 2).sum()))
    return centroids, history


class FeatureStore:
    """Per-image keypoint cache that re-extracts when a larger budget is requested."""

    def __init__(self):
        self._items = {}

    def __contains__(self, image_id):
        return image_id in self._items

    def __len__(self):
        return len(self._items)

    def get(self, image, n):
        held = self._items.get(image.id)
        if held is None or held[0] < n:
            held = (n, detect_and_describe(image.pixels, n))
            self._items[image.id] = held
        return held[1].head(n)


def extract_features(images, n, store=None):
    """{image_id: LocalFeatures} holding the top ``n`` keypoints per image."""
    store = store if store is not None else FeatureStore()
    return {im.id: store.get(im, n) for im in images}


def fit_idf(vocab_centroids, feature_sets):
    n_docs = len(feature_sets)
    df = np.zeros(len(vocab_centroids))
    for feats in feature_sets:
        if len(feats):
            df[np.unique(assign(feats.descriptors, vocab_centroids))] += 1
    return np.log((1.0 + n_docs) / (1.0 + df)) + 1.0


def build_vocabulary(mapset, images_per_texture=None, features_per_image=100, V=1024, seed=0,
                     feature_store=None):
    """k-means vocabulary over reference features, with idf from all references."""
    refs = list(mapset.references)
    rng = np.random.default_rng([seed, 13])
    chosen = refs
    if images_per_texture is not None and images_per_texture < len(refs):
        picks = np.sort(rng.choice(len(refs), size=images_per_texture, replace=False))
        chosen = [refs[i] for i in picks]
    feats = extract_features(refs, features_per_image, feature_store)
    pooled = [feats[im.id].descriptors for im in chosen if len(feats[im.id])]
    pooled = np.concatenate(pooled) if pooled else np.zeros((0, 1))
    if len(pooled) < V:
        raise InvalidArgument(f"only {len(pooled)} pooled features for a vocabulary of {V} words")
    centroids, history = kmeans(pooled, V, seed=seed)
    idf = fit_idf(centroids, [feats[r.id] for r in refs])
    meta = {"n_images": len(chosen), "features_per_image": features_per_image,
            "n_features": int(len(pooled)), "seed": seed, "iterations": len(history) - 1}
    return Vocabulary(centroids, idf, meta)


def word_counts(features, vocab):
    if len(features) == 0:
        return np.zeros(vocab.size)
    if features.descriptors.shape[1] != vocab.dim:
        raise InvalidArgument(f"descriptor dim {features.descriptors.shape[1]} != vocabulary dim {vocab.dim}")
    return np.bincount(assign(features.descriptors, vocab.centroids), minlength=vocab.size).astype(np.float64)


def bow_embed(features, vocab, image_id=""):
    counts = word_counts(features, vocab)
    weights = counts * vocab.idf
    norm = np.linalg.norm(weights)
    if norm > 0:
        weights = weights / norm
    return BowHistogram(image_id, weights)


def bow_retrieve(query_hist, reference_hists, k):
    """Rank references by Euclidean distance between normalized histograms."""
    records = [EmbeddingRecord(h.image_id, h.weights) for h in reference_hists]
    res = brute_force_topk(records, query_hist.weights, k, query_hist.image_id)
    return RetrievalResult(query_hist.image_id, res.ranked, k)


def sweep_features_per_image(mapset, n_values, V=1024, seed=0, k=100, vocab=None, feature_store=None,
                             vocab_features=100):
    """R0@k of the BoW pipeline for each per-image feature budget ``n``."""
    from .evalloc import recall_at_k
    from .pairs import overlap_table

    if not n_values:
        raise InvalidArgument("n_values must be nonempty")
    store = feature_store if feature_store is not None else FeatureStore()
    if vocab is None:
        vocab = build_vocabulary(mapset, features_per_image=vocab_features, V=V, seed=seed, feature_store=store)
    labels = overlap_table(mapset)
    table = []
    for n in n_values:
        ref_h = [bow_embed(store.get(r, n), vocab, r.id) for r in mapset.references]
        results = [bow_retrieve(bow_embed(store.get(q, n), vocab, q.id), ref_h, k) for q in mapset.queries]
        table.append((n, recall_at_k(results, labels, k, 0.0).recall))
    return table


def best_n(table):
    """Feature budget with the highest recall (smallest n on ties)."""
    return max(table, key=lambda row: (row[1], -row[0]))[0]


def write_vocabulary(vocab, path):
    with open(path, "wb") as fh:
        fh.write(GVOC_MAGIC)
        fh.write(struct.pack("<III", GVOC_VERSION, vocab.size, vocab.dim))
        fh.write(np.asarray(vocab.centroids, dtype="<f4").tobytes())
        fh.write(np.asarray(vocab.idf, dtype="<f4").tobytes())


def read_vocabulary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GVOC_MAGIC:
        raise ParseError(f"{path}: not a vocabulary file (bad magic)")
    version, v, d = struct.unpack_from("<III", blob, 4)
    if version != GVOC_VERSION:
        raise FormatVersionError(f"{path}: vocabulary format version {version}, expected {GVOC_VERSION}")
    expected = 16 + 4 * (v * d + v)
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)}")
    centroids = np.frombuffer(blob, dtype="<f4", count=v * d, offset=16).reshape(v, d).astype(np.float64)
    idf = np.frombuffer(blob, dtype="<f4", count=v, offset=16 + 4 * v * d).astype(np.float64)
    return Vocabulary(centroids, idf)
