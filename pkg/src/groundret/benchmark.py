"""Multi-texture retrieval benchmark: data, one jointly trained model, all
baselines, recall reports and localization campaigns."""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bow import FeatureStore, best_n, bow_embed, bow_retrieve, build_vocabulary, sweep_features_per_image
from .embednet.net import ArchConfig, EmbeddingNet, embed_batch
from .embednet.train import TrainConfig, train_siamese
from .evalloc import LocalizationConfig, evaluate_retrieval, localization_campaign, random_retrieval
from .index import EmbeddingRecord, build_index, query_topk
from .pairs import build_training_pairs, overlap_table
from .synth import STYLES, MapSet, NoiseSpec, generate_canvas, generate_mapset

log = logging.getLogger(__name__)

# night-time LED captures on a different day: noisy, blurred, relit, partly occluded
DEGRADED_QUERIES = NoiseSpec(pixel_sigma=10.0, brightness=30.0, contrast=0.3, occluders=3, blur_px=6.0)


@dataclass
class DatasetConfig:
    styles: tuple = STYLES
    extent: tuple = (2.2, 2.2)
    resolution: float = 640.0
    grid_spacing: float = 0.12
    jitter: float = 0.01
    n_train_queries: int = 500
    n_eval_queries: int = 50
    query_noise: NoiseSpec = DEGRADED_QUERIES
    patch_size: tuple = (0.2, 0.15)
    out_shape: tuple = (96, 128)


@dataclass
class PairConfig:
    min_pos_overlap: float = 0.2
    augment_factor: int = 1
    independent_augment: bool = True


@dataclass
class BowConfig:
    vocab_sizes: tuple = (256, 1024)
    n_values: tuple = (50, 100, 200, 400)
    vocab_features: int = 100
    tuning_queries: int = 60


@dataclass
class BenchmarkConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pairs: PairConfig = field(default_factory=PairConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, epochs=10))
    bow: BowConfig = field(default_factory=BowConfig)
    localization: LocalizationConfig = field(default_factory=LocalizationConfig)
    k_max: int = 100
    k_fraction: float = 0.3

    def to_dict(self):
        return asdict(self)


def retrieval_k(n_refs, k_max=100, fraction=0.3):
    """k = min(k_max, fraction * |references|), at least 1."""
    return max(1, min(k_max, int(fraction * n_refs)))


@dataclass
class TextureData:
    style: str
    train: MapSet
    evaluation: MapSet


def build_datasets(cfg):
    """One canvas per style; queries split into training and evaluation sets."""
    ds = cfg.dataset
    out = []
    for i, style in enumerate(ds.styles):
        canvas = generate_canvas(style, ds.extent, ds.resolution, seed=cfg.seed * 1000 + i)
        ms = generate_mapset(canvas, ds.grid_spacing, ds.jitter, ds.n_train_queries + ds.n_eval_queries,
                             ds.query_noise, seed=cfg.seed * 1000 + i, width=ds.patch_size[0],
                             height=ds.patch_size[1], out_shape=ds.out_shape, id_prefix=f"{style}/")
        train = MapSet(ms.references, ms.queries[:ds.n_train_queries], ms.canvas_meta)
        evaluation = MapSet(ms.references, ms.queries[ds.n_train_queries:], ms.canvas_meta)
        out.append(TextureData(style, train, evaluation))
    return out


def joint_training_pairs(datasets, cfg):
    """Per-texture pairs pooled and reshuffled; no pair crosses textures."""
    pairs = []
    for i, td in enumerate(datasets):
        pairs += build_training_pairs(td.train, cfg.pairs.min_pos_overlap, cfg.pairs.augment_factor,
                                      seed=cfg.seed * 1000 + i, independent_augment=cfg.pairs.independent_augment)
    order = np.random.default_rng([cfg.seed, 23]).permutation(len(pairs))
    joint = MapSet([r for td in datasets for r in td.train.references],
                   [q for td in datasets for q in td.train.queries])
    return [pairs[i] for i in order], joint


def train_joint(datasets, cfg, progress=None):
    pairs, joint = joint_training_pairs(datasets, cfg)
    log.info("training on %d pairs from %d textures", len(pairs), len(datasets))
    net = EmbeddingNet(cfg.arch, seed=cfg.train.seed)
    return train_siamese(pairs, joint, cfg.train, net=net, progress=progress), len(pairs)


def embedding_retrieval(net, mapset, k):
    refs = embed_batch(net, [r.pixels for r in mapset.references])
    queries = embed_batch(net, [q.pixels for q in mapset.queries])
    index = build_index([EmbeddingRecord(r.id, v) for r, v in zip(mapset.references, refs)])
    return [query_topk(index, queries[i], k, q.id) for i, q in enumerate(mapset.queries)]


@dataclass
class BowChoice:
    vocab_size: int
    n: int
    tuning_recall: float


def tune_bow(td, cfg, k, store):
    """Pick (V, n) by R0@k on a subset of the training queries."""
    tuning = MapSet(td.train.references, td.train.queries[:cfg.bow.tuning_queries])
    best = None
    for v in cfg.bow.vocab_sizes:
        vocab = build_vocabulary(tuning, features_per_image=cfg.bow.vocab_features, V=v, seed=cfg.seed,
                                 feature_store=store)
        table = sweep_features_per_image(tuning, list(cfg.bow.n_values), V=v, seed=cfg.seed, k=k, vocab=vocab,
                                         feature_store=store, vocab_features=cfg.bow.vocab_features)
        n = best_n(table)
        score = dict(table)[n]
        if best is None or score > best[0].tuning_recall:
            best = (BowChoice(v, n, score), vocab)
    return best


def bow_retrieval(vocab, n, mapset, k, store):
    refs = [bow_embed(store.get(r, n), vocab, r.id) for r in mapset.references]
    return [bow_retrieve(bow_embed(store.get(q, n), vocab, q.id), refs, k) for q in mapset.queries]


@dataclass
class TextureOutcome:
    style: str
    k: int
    n_refs: int
    reports: dict  # method -> RecallReport
    bow_choice: BowChoice
    available: dict = field(default_factory=dict)  # query id -> number of overlapping references
    localization: dict = field(default_factory=dict)  # source -> LocalizationSummary


@dataclass
class BenchmarkOutcome:
    config: BenchmarkConfig
    textures: list
    train_loss: list
    val_loss: list
    val_abs_err: list
    n_pairs: int
    seconds: dict

    def mean_recall(self, method, x=0.0):
        return float(np.mean([t.reports[method].recall[x] for t in self.textures]))

    def total_failures(self, method):
        return sum(t.reports[method].failure_count for t in self.textures)

    def mean_success(self, source):
        return float(np.mean([t.localization[source].success_rate for t in self.textures]))

    def mean_localization_seconds(self, source):
        return float(np.mean([t.localization[source].mean_seconds_per_query for t in self.textures]))


def run_benchmark(cfg=None, localize=True, progress=None):
    """Generate data, train one model, and score every method on every texture."""
    cfg = cfg or BenchmarkConfig()
    seconds = {}
    t0 = time.perf_counter()
    datasets = build_datasets(cfg)
    seconds["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    result, n_pairs = train_joint(datasets, cfg, progress)
    seconds["train"] = time.perf_counter() - t0
    untrained = EmbeddingNet(cfg.arch, seed=cfg.train.seed)

    outcomes = []
    for i, td in enumerate(datasets):
        t0 = time.perf_counter()
        ms = td.evaluation
        k = retrieval_k(len(ms.references), cfg.k_max, cfg.k_fraction)
        labels = overlap_table(ms)
        store = FeatureStore()
        choice, vocab = tune_bow(td, cfg, k, store)
        retrievals = {
            "dml": embedding_retrieval(result.net, ms, k),
            "untrained": embedding_retrieval(untrained, ms, k),
            "bow": bow_retrieval(vocab, choice.n, ms, k, store),
            "random": random_retrieval([q.id for q in ms.queries], [r.id for r in ms.references], k,
                                       seed=cfg.seed * 1000 + i),
        }
        reports = {m: evaluate_retrieval(res, labels, k, td.style, m) for m, res in retrievals.items()}
        available = {q: len(refs) for q, refs in labels.items() if refs}
        outcome = TextureOutcome(td.style, k, len(ms.references), reports, choice, available)
        if localize:
            for source in ("none", "bow", "dml"):
                by_query = None if source == "none" else {r.query_id: r for r in retrievals[source]}
                outcome.localization[source] = localization_campaign(
                    ms, source, k, by_query, store, cfg.localization, texture=td.style)
        outcomes.append(outcome)
        seconds[td.style] = time.perf_counter() - t0
        log.info("%s: k=%d dml %.3f bow %.3f untrained %.3f random %.3f", td.style, k,
                 *(reports[m].recall[0.0] for m in ("dml", "bow", "untrained", "random")))
    return BenchmarkOutcome(cfg, outcomes, result.train_loss, result.val_loss, result.val_abs_err,
                            n_pairs, seconds)
