"""Command-line pipeline: each subcommand reads upstream artifacts, writes its
own, and records a run manifest with content hashes of everything it read.

Configuration comes from an optional JSON file (``--config``) whose sections
mirror :class:`RunConfig`; explicit flags override file values.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

log = logging.getLogger("groundret")

RUN_MANIFEST = "run.json"
TIMING_FILE = "timing.json"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    exit_code = 2


def _configs():
    # heavy imports are deferred so --threads can cap BLAS pools before numpy loads
    from .benchmark import DEGRADED_QUERIES, PairConfig
    from .embednet.net import ArchConfig
    from .embednet.train import TrainConfig
    from .evalloc import LocalizationConfig
    from .synth import NoiseSpec

    @dataclass
    class DatasetSection:
        style: str = "speckle"
        extent: tuple = (2.2, 2.2)
        resolution: float = 640.0
        grid_spacing: float = 0.12
        jitter: float = 0.01
        n_queries: int = 100
        query_noise: NoiseSpec = DEGRADED_QUERIES
        patch_size: tuple = (0.2, 0.15)
        out_shape: tuple = (96, 128)

    @dataclass
    class BowSection:
        vocab_size: int = 1024
        vocab_features: int = 100
        features_per_image: int = 100
        sweep_values: tuple = (50, 100, 200, 400)

    @dataclass
    class EvalSection:
        k: int = 100

    @dataclass
    class RunConfig:
        seed: int = 0
        dataset: DatasetSection = field(default_factory=DatasetSection)
        pairs: PairConfig = field(default_factory=PairConfig)
        arch: ArchConfig = field(default_factory=ArchConfig)
        train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, epochs=10))
        bow: BowSection = field(default_factory=BowSection)
        eval: EvalSection = field(default_factory=EvalSection)
        localization: LocalizationConfig = field(default_factory=LocalizationConfig)

    return RunConfig


def _merge(instance, data, where):
    """Copy of a dataclass ``instance`` with JSON ``data`` applied recursively."""
    if not isinstance(data, dict):
        raise UsageError(f"config section {where or '<root>'} must be an object")
    known = {f.name: f for f in dataclasses.fields(instance)}
    updates = {}
    for key, value in data.items():
        if key not in known:
            raise UsageError(f"unknown config key {where + key!r}")
        current = getattr(instance, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _merge(current, value, f"{where}{key}.")
        elif isinstance(current, tuple):
            updates[key] = tuple(value)
        elif isinstance(current, bool) or current is None:
            updates[key] = value
        else:
            updates[key] = type(current)(value)
    try:
        return dataclasses.replace(instance, **updates)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config section {where or '<root>'}: {exc}") from None


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then ``overrides`` (a nested dict)."""
    cfg = _configs()()
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        cfg = _merge(cfg, data, "")
    if overrides:
        cfg = _merge(cfg, overrides, "")
    return cfg


def config_dict(cfg):
    return json.loads(json.dumps(asdict(cfg)))


# ---------------------------------------------------------------------------
# artifacts and manifests


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def tree_digest(path):
    """Hash of a file, or of every file under a directory (relative paths included)."""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file() and q.name not in (RUN_MANIFEST, TIMING_FILE)):
        h.update(p.relative_to(path).as_posix().encode())
        h.update(file_digest(p).encode())
    return h.hexdigest()


def require(path, step, what):
    """Missing upstream artifact -> DependencyError naming the command that makes it."""
    from .errors import DependencyError

    if path is None or not Path(path).exists():
        raise DependencyError(f"{what} {path} not found; produce it with `groundret {step}` first")
    return Path(path)


def prepare_out(out, force):
    """Refuse to write into a non-empty directory unless forced."""
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out, command, cfg, inputs, outputs, seconds):
    """Byte-stable run manifest plus a separate timing file."""
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config": config_dict(cfg),
        "inputs": {name: {"path": str(p), "sha256": tree_digest(p)} for name, p in sorted(inputs.items())},
        "outputs": {name: file_digest(out / name) for name in sorted(outputs)},
    }
    (out / RUN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / TIMING_FILE).write_text(json.dumps({"seconds": seconds}, indent=2) + "\n", encoding="utf-8")


def load_mapset(path):
    from .synth import ingest_mapset

    path = require(path, "generate", "map set")
    manifest = path / "manifest.csv" if path.is_dir() else path
    require(manifest, "generate", "map manifest")
    return ingest_mapset(manifest)


# ---------------------------------------------------------------------------
# commands; each returns (outputs, inputs)


def cmd_generate(args, cfg, out):
    from .synth import generate_canvas, generate_mapset, save_mapset

    ds = cfg.dataset
    canvas = generate_canvas(ds.style, ds.extent, ds.resolution, seed=cfg.seed)
    ms = generate_mapset(canvas, ds.grid_spacing, ds.jitter, ds.n_queries, ds.query_noise, seed=cfg.seed,
                         width=ds.patch_size[0], height=ds.patch_size[1], out_shape=ds.out_shape)
    save_mapset(ms, out)
    (out / "config.json").write_text(json.dumps(config_dict(cfg), indent=2, sort_keys=True) + "\n")
    log.info("wrote %d references and %d queries to %s", len(ms.references), len(ms.queries), out)
    return ["manifest.csv", "config.json"], {}


def cmd_ingest(args, cfg, out):
    from .synth import ingest_mapset, save_mapset

    src = require(args.manifest, "ingest", "manifest")
    ms = ingest_mapset(src)
    save_mapset(ms, out)
    log.info("ingested %d references and %d queries", len(ms.references), len(ms.queries))
    return ["manifest.csv"], {"manifest": src}


def cmd_pairs(args, cfg, out):
    from .pairs import build_training_pairs, write_pairs

    ms = load_mapset(args.mapset)
    p = cfg.pairs
    pairs = build_training_pairs(ms, p.min_pos_overlap, p.augment_factor, seed=cfg.seed,
                                 independent_augment=p.independent_augment)
    write_pairs(pairs, out / "pairs.csv")
    log.info("wrote %d pairs", len(pairs))
    return ["pairs.csv"], {"mapset": args.mapset}


def cmd_train(args, cfg, out):
    from .embednet.net import EmbeddingNet, save_checkpoint
    from .embednet.train import train_siamese
    from .pairs import read_pairs

    ms = load_mapset(args.mapset)
    pairs_path = require(args.pairs, "pairs", "pair list")
    pairs = read_pairs(pairs_path)
    net = EmbeddingNet(cfg.arch, seed=cfg.train.seed)
    result = train_siamese(pairs, ms, cfg.train, net=net)
    save_checkpoint(result.net, out / "model.gnet")
    with open(out / "history.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,val_abs_err\n")
        for i, row in enumerate(zip(result.train_loss, result.val_loss, result.val_abs_err), start=1):
            fh.write(f"{i},{','.join(repr(float(v)) for v in row)}\n")
    return ["model.gnet", "history.csv"], {"mapset": args.mapset, "pairs": pairs_path}


def _write_gemb_pair(out, ref_records, query_records):
    from .index import write_embeddings

    write_embeddings(ref_records, out / "references.gemb")
    write_embeddings(query_records, out / "queries.gemb")
    return ["references.gemb", "queries.gemb"]


def cmd_embed(args, cfg, out):
    from .embednet.net import embed_batch, load_checkpoint
    from .index import EmbeddingRecord

    ms = load_mapset(args.mapset)
    model = require(args.model, "train", "model checkpoint")
    net = load_checkpoint(model)

    def records(images):
        vecs = embed_batch(net, [im.pixels for im in images]) if images else []
        return [EmbeddingRecord(im.id, v) for im, v in zip(images, vecs)]

    outputs = _write_gemb_pair(out, records(ms.references), records(ms.queries))
    return outputs, {"mapset": args.mapset, "model": model}


def cmd_index(args, cfg, out):
    from .index import build_index, read_embeddings

    src = require(args.embeddings, "embed", "embedding database")
    records = read_embeddings(src)
    index = build_index(records)
    stats = {"count": len(records), "dim": int(index.points.shape[1]), "depth": index.depth(),
             "source_sha256": file_digest(src)}
    (out / "index.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return ["index.json"], {"embeddings": src}


def cmd_bow_vocab(args, cfg, out):
    from .bow import build_vocabulary, write_vocabulary

    ms = load_mapset(args.mapset)
    vocab = build_vocabulary(ms, features_per_image=cfg.bow.vocab_features, V=cfg.bow.vocab_size, seed=cfg.seed)
    write_vocabulary(vocab, out / "vocab.gvoc")
    return ["vocab.gvoc"], {"mapset": args.mapset}


def cmd_bow_embed(args, cfg, out):
    from .bow import FeatureStore, bow_embed, read_vocabulary
    from .index import EmbeddingRecord

    ms = load_mapset(args.mapset)
    vocab_path = require(args.vocab, "bow-vocab", "vocabulary")
    vocab = read_vocabulary(vocab_path)
    store, n = FeatureStore(), cfg.bow.features_per_image

    def records(images):
        return [EmbeddingRecord(im.id, bow_embed(store.get(im, n), vocab, im.id).weights) for im in images]

    outputs = _write_gemb_pair(out, records(ms.references), records(ms.queries))
    return outputs, {"mapset": args.mapset, "vocab": vocab_path}


def cmd_retrieve(args, cfg, out):
    from .index import EmbeddingRecord, build_index, query_topk, read_embeddings, write_retrievals

    refs_path = require(args.references, "embed", "reference embeddings")
    queries_path = require(args.queries, "embed", "query embeddings")
    refs, queries = read_embeddings(refs_path), read_embeddings(queries_path)
    k = cfg.eval.k
    if k > len(refs):
        log.warning("k=%d exceeds the %d references; returning the full ranking", k, len(refs))
    index = build_index(refs)
    results = [query_topk(index, q.vector, k, q.image_id) for q in queries]
    write_retrievals(results, out / "retrievals.csv")
    return ["retrievals.csv"], {"references": refs_path, "queries": queries_path}


def _texture_name(args):
    return args.texture or Path(args.mapset).resolve().name


def _parse_sources(specs, step):
    """["name=path", ...] -> {name: Path}."""
    sources = {}
    for spec in specs or []:
        name, sep, path = spec.partition("=")
        if not sep or not name:
            raise UsageError(f"expected NAME=PATH, got {spec!r}")
        sources[name] = require(path, step, f"retrieval list for {name!r}")
    return sources


def cmd_eval(args, cfg, out):
    from .evalloc import emit_report, evaluate_retrieval
    from .index import read_retrievals
    from .pairs import overlap_table

    ms = load_mapset(args.mapset)
    sources = _parse_sources(args.retrievals, "retrieve")
    if not sources:
        raise UsageError("eval needs at least one --retrievals METHOD=PATH")
    labels = overlap_table(ms)
    texture = _texture_name(args)
    reports = []
    for method, path in sources.items():
        results = read_retrievals(path)
        k = min(cfg.eval.k, max((r.k for r in results), default=cfg.eval.k))
        reports.append(evaluate_retrieval(results, labels, k, texture, method))
    emit_report(reports, (), out, {"seed": cfg.seed, "texture": texture})
    inputs = {"mapset": args.mapset, **{f"retrievals:{m}": p for m, p in sources.items()}}
    return ["recall.csv", "bands.csv", "failures.csv", "localization.csv", "report.json"], inputs


LOCALIZATION_QUERY_HEADER = ("query_id", "ref_id", "inlier_count", "success", "translation_err_m",
                             "rotation_err_rad", "x_m", "y_m", "theta_rad")


def cmd_localize(args, cfg, out):
    from .bow import FeatureStore
    from .evalloc import emit_report, localization_campaign
    from .index import read_retrievals

    ms = load_mapset(args.mapset)
    sources = _parse_sources(args.retrievals, "retrieve")
    texture = _texture_name(args)
    store = FeatureStore()
    summaries = [localization_campaign(ms, "none", cfg.eval.k, None, store, cfg.localization, texture)]
    for name, path in sources.items():
        if name not in ("bow", "dml", "random"):
            raise UsageError(f"localization source must be bow, dml or random, got {name!r}")
        by_query = {r.query_id: r for r in read_retrievals(path)}
        missing = [q.id for q in ms.queries if q.id not in by_query]
        if missing:
            from .errors import ParseError
            raise ParseError(f"{path}: no retrievals for query {missing[0]!r}")
        summaries.append(localization_campaign(ms, name, cfg.eval.k, by_query, store, cfg.localization, texture))
    emit_report([], summaries, out, {"seed": cfg.seed, "texture": texture})
    with open(out / "localization_queries.csv", "w", encoding="utf-8") as fh:
        fh.write("source," + ",".join(LOCALIZATION_QUERY_HEADER) + "\n")
        for s in summaries:
            for r in s.results:
                pose = r.estimated_pose
                cells = [r.query_id, r.ref_id or "", r.inlier_count, int(bool(r.success)),
                         r.translation_err, r.rotation_err,
                         *((pose.x, pose.y, pose.theta) if pose else (None, None, None))]
                fh.write(s.source + "," + ",".join("" if c is None else
                                                   repr(float(c)) if isinstance(c, float) else str(c)
                                                   for c in cells) + "\n")
    # wall-clock per-query timings live in timing.json; report.json is rewritten without them
    report = json.loads((out / "report.json").read_text())
    timing = {s.source: s.mean_seconds_per_query for s in summaries}
    for row in report["localization"]:
        row.pop("mean_seconds_per_query", None)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    args._extra_timing = {"mean_seconds_per_query": timing}
    inputs = {"mapset": args.mapset, **{f"retrievals:{m}": p for m, p in sources.items()}}
    return ["localization.csv", "localization_queries.csv", "report.json"], inputs


def cmd_report(args, cfg, out):
    """Merge the CSVs of several eval/localize output directories."""
    import csv

    from .evalloc import BAND_FIELDS, FAILURE_FIELDS, LOCALIZATION_FIELDS, RECALL_FIELDS

    dirs = [require(d, "eval", "report directory") for d in args.inputs]
    tables = {"recall": RECALL_FIELDS, "bands": BAND_FIELDS, "failures": FAILURE_FIELDS,
              "localization": LOCALIZATION_FIELDS}
    merged = {}
    for name, fields in tables.items():
        rows = []
        for d in dirs:
            path = d / f"{name}.csv"
            if not path.exists():
                continue
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                if tuple(next(reader, ())) != fields:
                    from .errors import ParseError
                    raise ParseError(f"{path}:1: unexpected header")
                rows += [tuple(r) for r in reader]
        rows = sorted(set(rows))
        merged[name] = [dict(zip(fields, r)) for r in rows]
        with open(out / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            w.writerows(rows)
    summary = {"sources": [str(d) for d in dirs], "tables": merged}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [f"{n}.csv" for n in tables] + ["report.json"], {f"input{i}": d for i, d in enumerate(dirs)}


def cmd_sweep(args, cfg, out):
    """R0@k of the BoW pipeline over per-image feature budgets."""
    from .benchmark import retrieval_k
    from .bow import FeatureStore, best_n, sweep_features_per_image

    ms = load_mapset(args.mapset)
    k = min(cfg.eval.k, retrieval_k(len(ms.references), cfg.eval.k, 1.0))
    table = sweep_features_per_image(ms, list(cfg.bow.sweep_values), V=cfg.bow.vocab_size, seed=cfg.seed, k=k,
                                     feature_store=FeatureStore(), vocab_features=cfg.bow.vocab_features)
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("features_per_image,k,recall\n")
        for n, r in table:
            fh.write(f"{n},{k},{r!r}\n")
    log.info("best features per image: %d", best_n(table))
    return ["sweep.csv"], {"mapset": args.mapset}


COMMANDS = {
    "generate": (cmd_generate, "render a synthetic map set"),
    "ingest": (cmd_ingest, "load an external manifest into a canonical map set"),
    "pairs": (cmd_pairs, "build the Siamese training pair list"),
    "train": (cmd_train, "train the embedding network"),
    "embed": (cmd_embed, "embed references and queries with a trained model"),
    "index": (cmd_index, "build and check the k-d tree over an embedding database"),
    "bow-vocab": (cmd_bow_vocab, "learn a visual vocabulary"),
    "bow-embed": (cmd_bow_embed, "tf-idf histograms for references and queries"),
    "retrieve": (cmd_retrieve, "top-k retrieval of queries against references"),
    "eval": (cmd_eval, "recall, overlap bands and failure counts"),
    "localize": (cmd_localize, "pose estimation with and without retrieval"),
    "report": (cmd_report, "merge report directories"),
    "sweep": (cmd_sweep, "BoW recall over feature budgets"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="groundret", description=__doc__.split("\n\n")[0].replace("\n", " "))
    sub = parser.add_subparsers(dest="command", required=True)
    p = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}

    p["generate"].add_argument("--style")
    p["generate"].add_argument("--n-queries", type=int)
    p["ingest"].add_argument("--manifest", required=True)
    for name in ("pairs", "train", "embed", "bow-vocab", "bow-embed", "eval", "localize", "sweep"):
        p[name].add_argument("--mapset", required=True, help="map set directory or manifest")
    p["train"].add_argument("--pairs", required=True)
    p["train"].add_argument("--epochs", type=int)
    p["embed"].add_argument("--model", required=True)
    p["index"].add_argument("--embeddings", required=True)
    p["bow-vocab"].add_argument("--vocab-size", type=int)
    p["bow-embed"].add_argument("--vocab", required=True)
    p["retrieve"].add_argument("--references", required=True)
    p["retrieve"].add_argument("--queries", required=True)
    for name in ("retrieve", "eval", "localize", "sweep"):
        p[name].add_argument("--k", type=int, help="retrieval depth (default 100)")
    for name in ("bow-embed", "sweep"):
        p[name].add_argument("--features-per-image", type=int)
    for name in ("eval", "localize"):
        p[name].add_argument("--retrievals", action="append", metavar="NAME=PATH")
        p[name].add_argument("--texture", help="label for report rows (default: map set directory name)")
    p["report"].add_argument("--inputs", nargs="+", required=True)
    return parser


def flag_overrides(args):
    """Nested config updates from explicitly passed flags."""
    pick = {
        "seed": ("seed",),
        "style": ("dataset", "style"),
        "n_queries": ("dataset", "n_queries"),
        "epochs": ("train", "epochs"),
        "vocab_size": ("bow", "vocab_size"),
        "features_per_image": ("bow", "features_per_image"),
        "k": ("eval", "k"),
    }
    out = {}
    for attr, path in pick.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = out
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    if "seed" in out:
        out.setdefault("train", {})["seed"] = out["seed"]
        out.setdefault("localization", {})["seed"] = out["seed"]
    return out


def run(argv=None):
    """Parse ``argv`` and execute; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)

    from .errors import GroundRetError

    try:
        cfg = load_config(args.config, flag_overrides(args))
        if cfg.eval.k < 1:
            raise UsageError("k must be >= 1")
        out = prepare_out(args.out, args.force)
        func = COMMANDS[args.command][0]
        t0 = time.perf_counter()
        outputs, inputs = func(args, cfg, out)
        seconds = {"total": time.perf_counter() - t0, **getattr(args, "_extra_timing", {})}
        write_manifest(out, args.command, cfg, inputs, outputs, seconds)
    except (UsageError, GroundRetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
