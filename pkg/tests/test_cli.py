import json
from pathlib import Path

import numpy as np
import pytest

from emovad import cli
from emovad import gradcore as gc
from emovad.cli import main
from emovad.corpus import read_feature_file


def write_config(path: Path, corpus_dir: Path, ckpt_dir: Path, report_dir: Path, **extra) -> Path:
    cfg = {
        "synth": {
            "n_train": 6, "n_val": 3, "n_test": 2, "dim": 8,
            "t_range": [24, 40], "seed": 3,
        },
        "train": {
            "learning_rate": 2e-3, "batch_size": 4, "max_epochs": 2,
            "seed": 3, "patience": 10,
        },
        "paths": {
            "corpus_dir": str(corpus_dir),
            "checkpoint_dir": str(ckpt_dir),
            "report_dir": str(report_dir),
        },
    }
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    ckpt = root / "ckpt"
    reports = root / "reports"
    config = write_config(root / "config.json", corpus, ckpt, reports)
    assert main(["--config", str(config), "gen"]) == 0
    assert main(["--config", str(config), "pretrain-vad"]) == 0
    assert main(["--config", str(config), "pretrain-ser"]) == 0
    assert main(["--config", str(config), "finetune", "--condition", "cascade"]) == 0
    assert main(["--config", str(config), "finetune", "--condition", "ft-ser"]) == 0
    return {"root": root, "config": config, "corpus": corpus, "ckpt": ckpt, "reports": reports}


# ---------------------------------------------------------------------------
# gen


def test_manifest_lists_five_snr_variants(workspace):
    manifest = json.loads((workspace["corpus"] / "manifest.json").read_text())
    assert len(manifest["train"]) == 6
    assert len(manifest["test"]) == 2
    for entry in manifest["test"]:
        assert len(entry["extended"]) == 5
        assert set(entry["extended"]) == {"10", "5", "0", "-5", "-10"}


def test_gen_rerun_identical_digest(workspace, tmp_path):
    config = write_config(tmp_path / "c.json", tmp_path / "corpus", tmp_path / "ck", tmp_path / "rp")
    assert main(["--config", str(config), "gen"]) == 0
    first = json.loads((tmp_path / "corpus" / "manifest.json").read_text())
    assert main(["--config", str(config), "gen"]) == 0
    second = json.loads((tmp_path / "corpus" / "manifest.json").read_text())
    assert first["digest"] == second["digest"]
    original = json.loads((workspace["corpus"] / "manifest.json").read_text())
    assert first["digest"] == original["digest"]  # same synth spec and seed


def test_gen_files_readable_and_labeled(workspace):
    manifest = json.loads((workspace["corpus"] / "manifest.json").read_text())
    clean = read_feature_file(workspace["corpus"] / manifest["test"][0]["original"])
    assert not clean.extended and clean.snr_db is None
    noisy = read_feature_file(workspace["corpus"] / manifest["test"][0]["extended"]["0"])
    assert noisy.extended and noisy.snr_db == 0.0
    assert noisy.n_frames == int(round(2.6 * clean.n_frames))


def test_gen_zero_test_utterances_exits_2(tmp_path):
    config = write_config(tmp_path / "c.json", tmp_path / "corpus", tmp_path / "ck", tmp_path / "rp")
    cfg = json.loads(config.read_text())
    cfg["synth"]["n_test"] = 0
    config.write_text(json.dumps(cfg))
    assert main(["--config", str(config), "gen"]) == 2


def test_seed_flag_overrides_config(tmp_path, workspace):
    config = write_config(tmp_path / "c.json", tmp_path / "corpus", tmp_path / "ck", tmp_path / "rp")
    assert main(["--config", str(config), "--seed", "99", "gen"]) == 0
    manifest = json.loads((tmp_path / "corpus" / "manifest.json").read_text())
    base = json.loads((workspace["corpus"] / "manifest.json").read_text())
    assert manifest["digest"] != base["digest"]
    assert manifest["synth"]["seed"] == 99


# ---------------------------------------------------------------------------
# training commands


def test_pretrain_outputs_exist(workspace):
    for phase in ("pretrain-vad", "pretrain-ser"):
        d = workspace["ckpt"] / phase
        assert (d / "best.ntar").exists()
        assert (d / "last.ntar").exists()
        log = json.loads((d / "log.json").read_text())
        assert log["config"]["synth"]["seed"] == 3
        assert len(log["epochs"]) >= 1
        assert "selected_epoch" in log
        assert log["inputs"]["manifest_digest"]


def test_pretrain_missing_corpus_exits_2(tmp_path):
    config = write_config(tmp_path / "c.json", tmp_path / "nope", tmp_path / "ck", tmp_path / "rp")
    assert main(["--config", str(config), "pretrain-vad"]) == 2


def test_finetune_without_checkpoints_exits_2(tmp_path, workspace):
    config = write_config(tmp_path / "c.json", workspace["corpus"], tmp_path / "empty-ckpt", tmp_path / "rp")
    assert main(["--config", str(config), "finetune", "--condition", "ft-both"]) == 2


def test_finetune_ft_ser_logs_vad_frozen(workspace):
    log = json.loads((workspace["ckpt"] / "ft-ser" / "log.json").read_text())
    assert "vad" in log["frozen_groups"]
    assert log["condition"] == "ft-ser"


def test_cascade_checkpoint_composes_without_training(workspace):
    from emovad.trainer import load_checkpoint

    cascade = load_checkpoint(workspace["ckpt"] / "cascade" / "best.ntar")
    vad = load_checkpoint(workspace["ckpt"] / "pretrain-vad" / "best.ntar")
    ser = load_checkpoint(workspace["ckpt"] / "pretrain-ser" / "best.ntar")
    np.testing.assert_array_equal(cascade.tensors["vad.fc.w"], vad.tensors["vad.fc.w"])
    np.testing.assert_array_equal(cascade.tensors["feat_vad.logits"], vad.tensors["feat_vad.logits"])
    np.testing.assert_array_equal(cascade.tensors["ser.out.w"], ser.tensors["ser.out.w"])
    np.testing.assert_array_equal(cascade.tensors["feat_ser.logits"], ser.tensors["feat_ser.logits"])
    log = json.loads((workspace["ckpt"] / "cascade" / "log.json").read_text())
    assert log["epochs"] == []


def test_identical_config_and_seed_give_identical_checkpoints(tmp_path, workspace):
    config = write_config(tmp_path / "c.json", workspace["corpus"], tmp_path / "ck2", tmp_path / "rp")
    assert main(["--config", str(config), "pretrain-vad"]) == 0
    a = (tmp_path / "ck2" / "pretrain-vad" / "best.ntar").read_bytes()
    b = (workspace["ckpt"] / "pretrain-vad" / "best.ntar").read_bytes()
    assert a == b


# ---------------------------------------------------------------------------
# eval


@pytest.fixture(scope="module")
def eval_reports(workspace):
    config = workspace["config"]
    assert main(["--config", str(config), "eval", "--condition", "ser-only"]) == 0
    assert main(["--config", str(config), "eval", "--condition", "cascade"]) == 0
    reports = workspace["reports"]
    return {
        "ser_clean": json.loads((reports / "ser-only" / "report_clean.json").read_text()),
        "ser_agg": json.loads((reports / "ser-only" / "report_aggregate.json").read_text()),
        "cascade_0": json.loads((reports / "cascade" / "report_snr_0.json").read_text()),
        "cascade_agg": json.loads((reports / "cascade" / "report_aggregate.json").read_text()),
        "dir": reports,
    }


def test_ser_only_report_has_no_vad_block(eval_reports):
    assert "vad" not in eval_reports["ser_clean"]
    assert "vad" not in eval_reports["ser_agg"]


def test_cascade_report_includes_vad_metrics(eval_reports):
    vad = eval_reports["cascade_0"]["vad"]
    for key in ("accuracy", "precision", "recall"):
        assert 0.0 <= vad[key] <= 1.0


def test_report_wa_matches_confusion(eval_reports):
    rep = eval_reports["cascade_0"]
    confusion = np.array(rep["confusion"])
    assert rep["wa"] == pytest.approx(np.trace(confusion) / confusion.sum())


def test_aggregate_is_equal_weight_mean(eval_reports):
    agg = eval_reports["cascade_agg"]
    per = agg["per_snr"]
    assert len(per) == 5
    assert agg["ua"] == pytest.approx(np.mean([v["ua"] for v in per.values()]))
    assert agg["wa"] == pytest.approx(np.mean([v["wa"] for v in per.values()]))


def test_report_embeds_config_and_digests(eval_reports):
    rep = eval_reports["cascade_0"]
    assert rep["config"]["synth"]["n_test"] == 2
    assert rep["inputs"]["manifest_digest"]
    assert rep["inputs"]["checkpoint_digest"]


def test_eval_reports_idempotent(workspace, eval_reports, tmp_path):
    config = write_config(tmp_path / "c.json", workspace["corpus"], workspace["ckpt"], tmp_path / "rp2")
    assert main(["--config", str(config), "eval", "--condition", "cascade"]) == 0
    a = (tmp_path / "rp2" / "cascade" / "report_snr_0.json").read_text()
    b = (eval_reports["dir"] / "cascade" / "report_snr_0.json").read_text()
    assert json.loads(a)["confusion"] == json.loads(b)["confusion"]
    assert json.loads(a)["ua"] == json.loads(b)["ua"]


def test_eval_workers_match_serial(workspace, tmp_path):
    config = write_config(tmp_path / "c.json", workspace["corpus"], workspace["ckpt"], tmp_path / "rp3")
    assert main(["--config", str(config), "--workers", "2", "eval", "--condition", "cascade"]) == 0
    parallel = json.loads((tmp_path / "rp3" / "cascade" / "report_snr_0.json").read_text())
    serial = json.loads((workspace["reports"] / "cascade" / "report_snr_0.json").read_text())
    assert parallel["confusion"] == serial["confusion"]
    assert parallel["ua"] == serial["ua"]


def test_eval_missing_checkpoint_exits_2(tmp_path, workspace):
    config = write_config(tmp_path / "c.json", workspace["corpus"], tmp_path / "none", tmp_path / "rp")
    assert main(["--config", str(config), "eval", "--condition", "ft-both"]) == 2


# ---------------------------------------------------------------------------
# analyze


def test_analyze_exports(workspace):
    config = workspace["config"]
    assert main(["--config", str(config), "analyze", "--condition", "cascade"]) == 0
    out = workspace["reports"] / "analysis"
    weights = json.loads((out / "featurizer_weights.json").read_text())
    roles = {e["role"] for e in weights["featurizers"]}
    assert roles == {"vad", "ser"}
    for entry in weights["featurizers"]:
        assert sum(entry["weights"]) == pytest.approx(1.0, abs=1e-6)
    timelines = sorted(out.glob("timeline_*.json"))
    assert len(timelines) == 2  # n_test = 2
    tl = json.loads(timelines[0].read_text())
    assert tl["rows"] and {"frame", "oracle", "predicted", "speech_prob"} <= set(tl["rows"][0])


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes(tmp_path, capsys):
    config = write_config(tmp_path / "c.json", tmp_path / "c", tmp_path / "k", tmp_path / "r")
    assert main(["--config", str(config), "gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    report = json.loads((tmp_path / "r" / "gradcheck.json").read_text())
    assert report["all_passed"]
    assert all("max_rel_err" in c for c in report["checks"])


def test_gradcheck_detects_corrupted_backward(monkeypatch, capsys):
    true_matmul = gc.matmul

    def corrupted(a, b):
        out = true_matmul(a, b)
        good = out._backward

        def bad(g):
            good(g)
            if a.requires_grad:
                a.grad += 0.5

        out._backward = bad
        return out

    monkeypatch.setattr(gc, "matmul", corrupted)
    assert cli.cmd_gradcheck(None) == 1
    assert "FAIL" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# usage


def test_eval_without_condition_exits_2(workspace):
    assert main(["--config", str(workspace["config"]), "eval"]) == 2


def test_missing_config_file_exits_2():
    assert main(["--config", "/does/not/exist.json", "gen"]) == 2
