import csv
import json

import pytest

from groundret.cli import load_config, run

SMALL = {
    "dataset": {"extent": [0.8, 0.8], "n_queries": 8, "out_shape": [48, 64]},
    "arch": {"input_shape": [48, 64], "widths": [4, 8]},
    "train": {"epochs": 1, "batch_size": 32},
    "bow": {"vocab_size": 32, "vocab_features": 40, "features_per_image": 40, "sweep_values": [20, 40]},
    "eval": {"k": 10},
    "localization": {"features_per_image": 40},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Every command run once on a small map set; returns (root, {step: exit code})."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    c = ["--config", str(cfg)]
    steps = {
        "generate": ["generate", *c, "--out", f"{root}/ms"],
        "ingest": ["ingest", *c, "--manifest", f"{root}/ms/manifest.csv", "--out", f"{root}/ms2"],
        "pairs": ["pairs", *c, "--mapset", f"{root}/ms", "--out", f"{root}/pairs"],
        "train": ["train", *c, "--mapset", f"{root}/ms", "--pairs", f"{root}/pairs/pairs.csv", "--out", f"{root}/model"],
        "embed": ["embed", *c, "--mapset", f"{root}/ms", "--model", f"{root}/model/model.gnet", "--out", f"{root}/emb"],
        "index": ["index", *c, "--embeddings", f"{root}/emb/references.gemb", "--out", f"{root}/idx"],
        "bow-vocab": ["bow-vocab", *c, "--mapset", f"{root}/ms", "--out", f"{root}/vocab"],
        "bow-embed": ["bow-embed", *c, "--mapset", f"{root}/ms", "--vocab", f"{root}/vocab/vocab.gvoc",
                      "--out", f"{root}/bowemb"],
        "retrieve-dml": ["retrieve", *c, "--references", f"{root}/emb/references.gemb",
                         "--queries", f"{root}/emb/queries.gemb", "--out", f"{root}/ret_dml"],
        "retrieve-bow": ["retrieve", *c, "--references", f"{root}/bowemb/references.gemb",
                         "--queries", f"{root}/bowemb/queries.gemb", "--out", f"{root}/ret_bow"],
        "eval": ["eval", *c, "--mapset", f"{root}/ms", "--retrievals", f"dml={root}/ret_dml/retrievals.csv",
                 "--retrievals", f"bow={root}/ret_bow/retrievals.csv", "--out", f"{root}/eval"],
        "localize": ["localize", *c, "--mapset", f"{root}/ms", "--retrievals", f"dml={root}/ret_dml/retrievals.csv",
                     "--out", f"{root}/loc"],
        "report": ["report", *c, "--inputs", f"{root}/eval", f"{root}/loc", "--out", f"{root}/report"],
        "sweep": ["sweep", *c, "--mapset", f"{root}/ms", "--out", f"{root}/sweep"],
    }
    codes = {name: run(argv) for name, argv in steps.items()}
    return root, steps, codes


def test_every_command_succeeds(pipeline):
    _, _, codes = pipeline
    assert codes == {name: 0 for name in codes}


def test_generate_manifest_rows(pipeline):
    root, _, _ = pipeline
    with open(root / "ms" / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    roles = [r["role"] for r in rows]
    assert roles.count("query") == 8 and roles.count("reference") > 0


def test_ingest_preserves_manifest(pipeline):
    root, _, _ = pipeline
    assert (root / "ms" / "manifest.csv").read_bytes() == (root / "ms2" / "manifest.csv").read_bytes()


def test_run_manifest_chains_hashes(pipeline):
    root, _, _ = pipeline
    train = json.loads((root / "model" / "run.json").read_text())
    embed = json.loads((root / "emb" / "run.json").read_text())
    assert embed["inputs"]["model"]["sha256"] == train["outputs"]["model.gnet"]
    assert train["seed"] == 0 and train["config"]["train"]["epochs"] == 1
    assert "seconds" in json.loads((root / "model" / "timing.json").read_text())


def test_eval_outputs_have_schema(pipeline):
    root, _, _ = pipeline
    with open(root / "eval" / "recall.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows} == {"dml", "bow"}
    assert {float(r["x_threshold"]) for r in rows} == {0.0, 0.2, 0.4, 0.6, 0.8}
    with open(root / "report" / "localization.csv") as fh:
        assert {r["source"] for r in csv.DictReader(fh)} == {"none", "dml"}


def test_rerun_is_byte_identical(pipeline, tmp_path):
    root, steps, _ = pipeline
    for name in ("generate", "pairs", "train", "embed", "bow-vocab", "bow-embed", "retrieve-dml", "eval",
                 "localize", "sweep"):
        argv = list(steps[name])
        out_index = argv.index("--out") + 1
        first = root / argv[out_index].rsplit("/", 1)[1]
        argv[out_index] = str(tmp_path / name)
        assert run(argv) == 0
        for f in sorted(p for p in first.rglob("*") if p.is_file() and p.name != "timing.json"):
            twin = tmp_path / name / f.relative_to(first)
            if f.name == "run.json":
                a, b = json.loads(f.read_text()), json.loads(twin.read_text())
                assert a["outputs"] == b["outputs"] and a["config"] == b["config"]
            else:
                assert f.read_bytes() == twin.read_bytes(), f"{name}: {f.name} differs"


def test_occupied_output_refused_without_force(pipeline):
    root, steps, _ = pipeline
    before = (root / "ms" / "manifest.csv").stat().st_mtime_ns
    assert run(steps["generate"]) == 2
    assert (root / "ms" / "manifest.csv").stat().st_mtime_ns == before
    assert run(steps["sweep"] + ["--force"]) == 0


def test_missing_artifact_names_step(pipeline, tmp_path, capsys):
    root, _, _ = pipeline
    code = run(["embed", "--mapset", str(root / "ms"), "--model", str(tmp_path / "none.gnet"),
                "--out", str(tmp_path / "o")])
    assert code == 3
    assert "groundret train" in capsys.readouterr().err


def test_retrieve_warns_when_k_exceeds_references(pipeline, tmp_path, caplog):
    root, _, _ = pipeline
    argv = ["retrieve", "--references", str(root / "emb" / "references.gemb"),
            "--queries", str(root / "emb" / "queries.gemb"), "--k", "100000", "--out", str(tmp_path / "r")]
    with caplog.at_level("WARNING"):
        assert run(argv) == 0
    assert "full ranking" in caplog.text
    with open(tmp_path / "r" / "retrievals.csv") as fh:
        rows = list(csv.DictReader(fh))
    n_refs = sum(1 for r in csv.DictReader(open(root / "ms" / "manifest.csv")) if r["role"] == "reference")
    assert max(int(r["rank"]) for r in rows) == n_refs


def test_version_mismatch_is_data_error(pipeline, tmp_path):
    root, _, _ = pipeline
    raw = (root / "model" / "model.gnet").read_bytes()
    bad = tmp_path / "old.gnet"
    bad.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    assert run(["embed", "--mapset", str(root / "ms"), "--model", str(bad), "--out", str(tmp_path / "o")]) == 3


def test_usage_errors_exit_2(tmp_path):
    assert run(["nonsense"]) == 2
    assert run(["generate"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"colour": "red"}}))
    assert run(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_divergence_exits_4(pipeline, tmp_path):
    root, _, _ = pipeline
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**SMALL, "train": {"epochs": 2, "learning_rate": 1e200}}))
    with pytest.warns(RuntimeWarning):
        code = run(["train", "--config", str(cfg), "--mapset", str(root / "ms"),
                    "--pairs", str(root / "pairs" / "pairs.csv"), "--out", str(tmp_path / "m")])
    assert code == 4


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "eval": {"k": 7}}))
    cfg = load_config(path, {"eval": {"k": 9}})
    assert cfg.seed == 3 and cfg.eval.k == 9
