import csv
import hashlib
import os

import numpy as np
import pytest
import yaml

from jointxfer import cli
from jointxfer.checkpoint import load_checkpoint
from jointxfer.datasets import load_manifest
from jointxfer.errors import ConfigError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RECIPE = os.path.join(ROOT, "configs", "transfer_desk.yaml")

SMALL_ARCH = {"input_size": 16, "conv_filters": [4, 8], "fc_dims": [16, 8, 6]}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    status = out.strip().splitlines()[-1]
    return code, out, status


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def small_cfg(**stage):
    return {
        "arch": SMALL_ARCH,
        "datasets": {"A": {"synth": "visual", "domain": "A", "per_class": 3, "size": 16},
                     "B": {"synth": "visual", "domain": "B", "per_class": 3, "size": 16}},
        "defaults": {"iterations": 5, "lr": 1e-3},
        "stage": {"datasets": ["A"], **stage},
    }


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_status_line_format(capsys, tmp_path):
    code, out, status = run(capsys, "pretrain", "-c", write_cfg(tmp_path, small_cfg()),
                            "-o", tmp_path / "o")
    assert code == 0
    assert status.startswith("status=ok command=pretrain exit=0")
    fields = dict(f.split("=", 1) for f in status.split())
    assert fields["checkpoint"].endswith("pretrain.ckpt")


def test_pretrain_writes_artifacts_and_is_reproducible(capsys, tmp_path):
    cfg = write_cfg(tmp_path, small_cfg())
    for d in ("r1", "r2"):
        assert run(capsys, "pretrain", "-c", cfg, "-o", tmp_path / d)[0] == 0
    for f in ("pretrain.ckpt", "pretrain.log.csv", "pretrain.metrics.csv"):
        assert digest(tmp_path / "r1" / f) == digest(tmp_path / "r2" / f)
    with open(tmp_path / "r1" / "pretrain.log.csv") as fh:
        assert len(list(csv.reader(fh))) == 6


def test_finetune_and_joint_from_checkpoint(capsys, tmp_path):
    cfg = write_cfg(tmp_path, small_cfg())
    run(capsys, "pretrain", "-c", cfg, "-o", tmp_path / "p")
    ckpt = tmp_path / "p" / "pretrain.ckpt"
    code, _, _ = run(capsys, "finetune", "-c", cfg, "--init", ckpt, "-o", tmp_path / "f",
                     "--set", "stage.freeze=fc_only")
    assert code == 0
    a, _ = load_checkpoint(ckpt)
    b, meta = load_checkpoint(tmp_path / "f" / "finetune.ckpt")
    assert np.array_equal(a.tensors["e.conv1.w"], b.tensors["e.conv1.w"])
    assert meta["parent"] == str(ckpt)
    jcfg = write_cfg(tmp_path, small_cfg(datasets=["A", "B"]), "joint.yaml")
    code, out, _ = run(capsys, "joint-train", "-c", jcfg, "--init", ckpt, "-o", tmp_path / "j")
    assert code == 0 and "(head 2)" in out


def test_overrides_change_scalars(capsys, tmp_path):
    cfg = write_cfg(tmp_path, small_cfg())
    run(capsys, "pretrain", "-c", cfg, "-o", tmp_path / "o", "--set", "defaults.iterations=3")
    with open(tmp_path / "o" / "pretrain.log.csv") as fh:
        assert len(list(csv.reader(fh))) == 4


def test_apply_override_rules():
    cfg = {"a": {"b": 1}, "stages": [{"lr": 1}]}
    cli.apply_override(cfg, "a.b=2.5")
    cli.apply_override(cfg, "stages.0.lr=0.1")
    cli.apply_override(cfg, "new.key=yes")
    assert cfg["a"]["b"] == 2.5 and cfg["stages"][0]["lr"] == 0.1 and cfg["new"]["key"] is True
    for bad in ("a=3", "a.b=[1, 2]", "stages.4.lr=1", "novalue"):
        with pytest.raises(ConfigError):
            cli.apply_override(cfg, bad)


@pytest.mark.parametrize("argv", [
    ["bogus"],
    [],
    ["pretrain", "--no-such-flag"],
])
def test_usage_errors_exit_1(capsys, argv):
    code, _, status = run(capsys, *argv)
    assert code == 1
    assert status.startswith("status=error") and "exit=1" in status


def test_bad_config_exits_1(capsys, tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("stage: [unclosed\n")
    assert run(capsys, "pretrain", "-c", cfg)[0] == 1
    assert run(capsys, "pretrain", "-c", tmp_path / "missing.yaml")[0] == 1
    cfg = write_cfg(tmp_path, small_cfg(lr=-1.0), "neg.yaml")
    code, _, status = run(capsys, "pretrain", "-c", cfg, "-o", tmp_path / "o")
    assert code == 1 and "lr" in status


def test_data_errors_exit_2(capsys, tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    (d / "manifest.csv").write_text("path,label\nnope.u8t,anger\n")
    cfg = small_cfg()
    cfg["datasets"]["A"] = {"manifest": "data/manifest.csv"}
    code, _, status = run(capsys, "pretrain", "-c", write_cfg(tmp_path, cfg), "-o", tmp_path / "o")
    assert code == 2
    assert "kind=MissingFileError" in status and "line 2" in status


def test_checkpoint_errors_exit_2(capsys, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    cfg = write_cfg(tmp_path, small_cfg())
    assert run(capsys, "eval", "-c", cfg, "--checkpoint", bad, "-o", tmp_path / "o")[0] == 2
    assert run(capsys, "finetune", "-c", cfg, "--init", tmp_path / "none.ckpt",
               "-o", tmp_path / "o")[0] == 2


def test_divergence_exits_3(capsys, tmp_path):
    cfg = write_cfg(tmp_path, small_cfg(lr=1e12, iterations=50))
    code, _, status = run(capsys, "pretrain", "-c", cfg, "-o", tmp_path / "o")
    assert code == 3
    assert "kind=DivergenceError" in status


def test_pipeline_error_maps_through_cause(capsys, tmp_path):
    cfg = small_cfg()
    del cfg["stage"]
    cfg["stages"] = [{"name": "p", "kind": "pretrain", "datasets": ["A"]},
                     {"name": "f", "kind": "finetune", "datasets": ["B"],
                      "init": str(tmp_path / "missing.ckpt")}]
    code, _, status = run(capsys, "pipeline", "-c", write_cfg(tmp_path, cfg), "-o", tmp_path / "o")
    assert code == 2
    assert "kind=PipelineError" in status and "stage 2" in status


def test_output_root_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "root"))
    code, _, status = run(capsys, "pretrain", "-c", write_cfg(tmp_path, small_cfg()))
    assert code == 0
    assert (tmp_path / "root" / "pretrain" / "pretrain.ckpt").exists()
    cfg = small_cfg()
    cfg["output_dir"] = str(tmp_path / "from_cfg")
    run(capsys, "pretrain", "-c", write_cfg(tmp_path, cfg))
    assert (tmp_path / "from_cfg" / "pretrain.ckpt").exists()


def test_synth_writes_manifests(capsys, tmp_path):
    code, out, _ = run(capsys, "synth", "--seed", 3, "--per-class", 2, "-o", tmp_path,
                       "--audio", "--audio-per-class", 1)
    assert code == 0
    assert "visual_A: 12 samples" in out and "visual_B: 12 samples" in out
    a = load_manifest(tmp_path / "visual_A" / "manifest.csv")
    assert a.x.shape == (12, 3, 64, 64)
    au = load_manifest(tmp_path / "audio_B" / "manifest.csv")
    assert au.modality == "audio" and len(np.unique(au.groups)) == 6


def test_features_command(capsys, tmp_path):
    run(capsys, "synth", "--per-class", 2, "-o", tmp_path / "s", "--audio",
        "--audio-per-class", 1)
    code, out, status = run(capsys, "features", "--manifest",
                            tmp_path / "s" / "audio_B" / "manifest.csv", "-o", tmp_path / "f")
    assert code == 0
    assert len(list((tmp_path / "f").glob("*.seg"))) == 6
    assert "skipped=0" in status


def test_eval_both_heads(capsys, tmp_path):
    cfg = write_cfg(tmp_path, small_cfg())
    run(capsys, "pretrain", "-c", cfg, "-o", tmp_path / "p")
    code, out, _ = run(capsys, "eval", "-c", cfg, "--checkpoint", tmp_path / "p" / "pretrain.ckpt",
                       "--head", "both", "-o", tmp_path / "e")
    assert code == 0
    with open(tmp_path / "e" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["dataset"], r["head"]) for r in rows] == [("A", "1"), ("A", "2"), ("B", "1"),
                                                        ("B", "2")]


def test_gradcheck_command(capsys):
    code, out, status = run(capsys, "gradcheck", "--seeds", 2)
    assert code == 0
    for name in ("conv", "fc", "lrelu", "group_norm", "maxpool", "cross_entropy", "contrastive"):
        assert name in out
    assert "max_rel_err=" in status


def test_recipe_pipeline_end_to_end(capsys, tmp_path):
    overrides = []
    for i in range(5):
        overrides += ["--set", f"stages.{i}.iterations=2"]
    for name in ("A", "B", "A_val", "B_val"):
        overrides += ["--set", f"datasets.{name}.per_class=5"]
    for name in ("audio_B", "audio_C", "audio_B_val", "audio_C_val"):
        overrides += ["--set", f"datasets.{name}.per_class=5"]
    code, out, status = run(capsys, "pipeline", "-c", RECIPE, "-o", tmp_path, "--both-heads",
                            *overrides)
    assert code == 0, status
    assert len(sorted(tmp_path.glob("*.ckpt"))) == 5
    assert len(sorted(tmp_path.glob("*.log.csv"))) == 5
    with open(tmp_path / "cross_corpus.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["model", "A_val", "B_val", "audio_B_val", "audio_C_val", "avg"]
    assert len(rows) == 1 + 10 + 1
    _, meta = load_checkpoint(tmp_path / "05_joint_visual_AB.ckpt")
    assert meta["parent"].endswith("04_finetune_audio_C.ckpt")


def test_empty_pipeline(capsys, tmp_path):
    cfg = write_cfg(tmp_path, {"stages": []})
    code, _, status = run(capsys, "pipeline", "-c", cfg, "-o", tmp_path / "o")
    assert code == 0 and "checkpoints=0" in status


def test_inputs_not_mutated(capsys, tmp_path):
    cfg = write_cfg(tmp_path, small_cfg())
    run(capsys, "pretrain", "-c", cfg, "-o", tmp_path / "p")
    ckpt = tmp_path / "p" / "pretrain.ckpt"
    before = digest(cfg), digest(ckpt)
    run(capsys, "finetune", "-c", cfg, "--init", ckpt, "-o", tmp_path / "f")
    assert (digest(cfg), digest(ckpt)) == before
