import json

import pytest
import yaml

from notetraj.cli import main
from notetraj.experiment import file_digest
from notetraj.records import read_pairs, read_predictions


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    """generate -> preprocess -> pretrain-notes, shared by the stage tests."""
    d = tmp_path_factory.mktemp("cli")
    common = ["--preset", "tiny", "--seed", "5"]
    assert main(["generate", *common, "--out", str(d / "cohort.jsonl"), "--debug-sidecar", str(d / "latent.jsonl")]) == 0
    assert main([
        "preprocess", *common, "--in", str(d / "cohort.jsonl"), "--mapping-dir", str(d / "mappings"),
        "--out", str(d / "pairs.jsonl"), "--stats", str(d / "stats.json"), "--corpus-out", str(d / "notes.txt"),
    ]) == 0
    assert main(["pretrain-notes", *common, "--corpus", str(d / "notes.txt"), "--steps", "5", "--out", str(d / "enc.safetensors")]) == 0
    return d


def test_generate_and_preprocess_outputs(staged):
    pairs = read_pairs(staged / "pairs.jsonl")
    stats = json.loads((staged / "stats.json").read_text())
    assert stats["pairs"] == len(pairs) > 0
    assert (staged / "latent.jsonl").exists()
    assert len((staged / "notes.txt").read_text().splitlines()) > 0


def test_train_predict_evaluate(staged, capsys):
    d = staged
    common = ["--preset", "tiny", "--seed", "5"]
    assert main(["train", *common, "--pairs", str(d / "pairs.jsonl"), "--fusion", "concat",
                 "--note-ckpt", str(d / "enc.safetensors"), "--steps", "3", "--out", str(d / "concat.safetensors")]) == 0
    assert main(["train-baseline", *common, "--model", "ligdoctor", "--pairs", str(d / "pairs.jsonl"),
                 "--steps", "3", "--out", str(d / "lig.safetensors")]) == 0
    for name in ("concat", "lig"):
        assert main(["predict", "--ckpt", str(d / f"{name}.safetensors"), "--pairs", str(d / "pairs.jsonl"),
                     "--k", "20", "--out", str(d / f"{name}.pred.jsonl")]) == 0
        preds = read_predictions(d / f"{name}.pred.jsonl")
        assert len(preds) == len(read_pairs(d / "pairs.jsonl")) and all(len(p.codes) >= 20 for p in preds)
    capsys.readouterr()
    assert main(["evaluate", "--pred", str(d / "concat.pred.jsonl"), str(d / "lig.pred.jsonl"),
                 "--pairs", str(d / "pairs.jsonl"), "--k", "20", "--out", str(d / "report")]) == 0
    out = capsys.readouterr().out
    assert "concat" in out and "lig" in out and "K = 20" in out
    assert (d / "report" / "table5.csv").exists()


def test_train_with_fusion_needs_note_checkpoint(staged, capsys):
    code = main(["train", "--preset", "tiny", "--pairs", str(staged / "pairs.jsonl"), "--fusion", "mean",
                 "--out", str(staged / "x.safetensors")])
    assert code == 1
    assert "[train]" in capsys.readouterr().err


def test_nli_finetune_writes_head(staged):
    out = staged / "enc_nli.safetensors"
    assert main(["nli-finetune", "--ckpt", str(staged / "enc.safetensors"), "--synthetic", "30",
                 "--epochs", "1", "--out", str(out)]) == 0
    from notetraj.checkpoint import read_header

    assert read_header(out)["has_nli_head"]


def test_missing_mapping_file_names_preprocess(tmp_path, capsys):
    assert main(["generate", "--preset", "tiny", "--out", str(tmp_path / "c.jsonl")]) == 0
    (tmp_path / "mappings" / "procedure.csv").unlink()
    code = main(["preprocess", "--in", str(tmp_path / "c.jsonl"), "--mapping-dir", str(tmp_path / "mappings"),
                 "--out", str(tmp_path / "p.jsonl")])
    err = capsys.readouterr().err
    assert code == 1 and "preprocess" in err and "procedure" in err


def test_validate_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"seed": 1}))
    assert main(["validate-config", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "preset" in err and "paths" in err and "models" in err
    good = tmp_path / "good.yaml"
    good.write_text(yaml.safe_dump({"preset": "tiny", "seed": 1, "paths": {"work_dir": "w"}, "models": ["mean"]}))
    assert main(["validate-config", str(good)]) == 0


def test_run_writes_manifest_with_true_digests(tmp_path):
    work = tmp_path / "run"
    assert main(["run", "--preset", "tiny", "--seed", "2", "--work-dir", str(work),
                 "--models", "transformer-only,doctorai"]) == 0
    manifest = json.loads((work / "manifest.json").read_text())
    assert manifest["digests"]
    for rel, digest in manifest["digests"].items():
        assert file_digest(work / rel) == digest
    assert set(manifest["config"]["models"]) == {"transformer-only", "doctorai"}
    assert "generate" in manifest["timings"] and "report" in manifest["timings"]
