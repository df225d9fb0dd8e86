import csv
import json

import numpy as np
import pytest

from a2mim.cli import dispatch, main
from a2mim.config import SCHEMA, dump_config, load_config

TINY = ["model.depth=2", "model.width=32", "model.heads=2", "train.batch_size=20", "train.warmup_epochs=0"]


def run(tmp, command, *extra, root):
    return dispatch(command, overrides=[f"data.root={root}", *TINY, *extra], out=tmp / command)


@pytest.fixture(scope="module")
def runs(shapes_root, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("runs")
    assert run(tmp, "pretrain", "train.epochs=1", root=shapes_root) == 0
    ck = tmp / "pretrain" / "checkpoints" / "final"
    assert run(tmp, "finetune", "train.epochs=1", f"model.checkpoint={ck}", root=shapes_root) == 0
    return tmp


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_defaults_cover_schema():
    cfg = load_config()
    assert set(cfg) == set(SCHEMA)
    assert cfg["mask"]["ratio"] == 0.6 and cfg["train"]["lambda_freq"] == 0.1
    assert cfg["model"]["injection_point"] is None and cfg["data"]["mean"] is None
    assert len(cfg["probe"]["fractions"]) == 20


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("[train]\nepochs = 7\nlr = 2e-3\n\n[probe]\nratios = 0, 0.5\n")
    cfg = load_config(path, ["train.epochs=9", "data.mean=0.5,0.5,0.5"])
    assert cfg["train"]["epochs"] == 9 and cfg["train"]["lr"] == 2e-3
    assert cfg["probe"]["ratios"] == (0.0, 0.5) and cfg["data"]["mean"] == (0.5, 0.5, 0.5)
    again = tmp_path / "again.cfg"
    dump_config(cfg, again)
    assert load_config(again) == cfg


@pytest.mark.parametrize("override, key", [
    ("train.epoch=1", "train.epoch"),
    ("training.epochs=1", "training.epochs"),
    ("train.epochs=many", "train.epochs"),
    ("mask.ratio=1.5", "mask.ratio"),
    ("model.family=mlp", "model.family"),
])
def test_config_errors_exit_2_naming_the_key(tmp_path, capsys, override, key):
    status = dispatch("pretrain", overrides=[override], out=tmp_path / "out")
    assert status == 2
    assert key in capsys.readouterr().err
    assert not (tmp_path / "out" / "metrics.csv").exists()


def test_unknown_section_in_file(tmp_path, capsys):
    path = tmp_path / "c.cfg"
    path.write_text("[optim]\nlr = 1\n")
    assert dispatch("pretrain", config=path, out=tmp_path / "out") == 2
    assert "optim" in capsys.readouterr().err


def test_pretrain_outputs(runs):
    out = runs / "pretrain"
    assert (out / "checkpoints" / "final" / "manifest.json").exists()
    assert len(read_rows(out / "metrics.csv")) == 3  # 60 images / batch 20
    assert (out / "config.cfg").exists() and not (out / "FAILED").exists()
    assert json.loads((out / "summary.json").read_text())["command"] == "pretrain"


def test_persisted_config_reproduces_outputs(runs, tmp_path):
    assert dispatch("pretrain", config=runs / "pretrain" / "config.cfg", out=tmp_path / "again") == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (runs / "pretrain" / "metrics.csv").read_bytes()


def test_finetune_outputs(runs):
    rows = read_rows(runs / "finetune" / "accuracy.csv")
    assert [r["epoch"] for r in rows] == ["-1", "0"]


def test_interactions_end_to_end(runs, shapes_root):
    ck = runs / "finetune" / "checkpoints" / "final"
    status = run(runs, "interactions", f"model.checkpoint={ck}", "probe.images=1", "probe.pairs=1",
                 "probe.contexts=2", root=shapes_root)
    assert status == 0
    rows = read_rows(runs / "interactions" / "interactions.csv")
    assert len(rows) == 20
    assert abs(np.mean([float(r["J"]) for r in rows]) - 1) <= 1e-6
    side = json.loads((runs / "interactions" / "interactions.json").read_text())
    assert side["provenance"]["checkpoint_sha256"]


def test_interactions_need_a_head(runs, shapes_root, capsys):
    ck = runs / "pretrain" / "checkpoints" / "final"
    assert run(runs, "interactions", f"model.checkpoint={ck}", root=shapes_root) == 2
    assert "model.checkpoint" in capsys.readouterr().err


@pytest.mark.parametrize("command, artifact", [
    ("occlusion", "occlusion.csv"),
    ("spectrum", "spectrum.csv"),
    ("reconstruct", "reconstruction.png"),
    ("linear-probe", "linear_probe.csv"),
])
def test_probe_commands(runs, shapes_root, command, artifact):
    ck = runs / "finetune" / "checkpoints" / "final"
    assert run(runs, command, f"model.checkpoint={ck}", "probe.ratios=0,0.5", "train.epochs=2",
               root=shapes_root) == 0
    assert (runs / command / artifact).exists()


def test_plot_flag(runs, shapes_root):
    ck = runs / "finetune" / "checkpoints" / "final"
    status = dispatch("occlusion", overrides=[f"data.root={shapes_root}", f"model.checkpoint={ck}",
                                              "probe.ratios=0,0.5"], out=runs / "plotted", plot=True)
    assert status == 0 and (runs / "plotted" / "occlusion.png").exists()


def test_runtime_failure_exit_1_with_sentinel(runs, shapes_root, tmp_path, capsys):
    import shutil

    ck = tmp_path / "ck"
    shutil.copytree(runs / "finetune" / "checkpoints" / "final", ck)
    blob = ck / "tensors.safetensors"
    data = bytearray(blob.read_bytes())
    data[-1] ^= 0xFF
    blob.write_bytes(bytes(data))
    status = dispatch("spectrum", overrides=[f"data.root={shapes_root}", f"model.checkpoint={ck}"],
                      out=tmp_path / "out")
    assert status == 1
    assert "IntegrityError" in capsys.readouterr().err
    assert (tmp_path / "out" / "FAILED").exists()


def test_out_dir_defaults_to_environment(runs, shapes_root, tmp_path, monkeypatch):
    monkeypatch.setenv("A2MIM_OUT", str(tmp_path))
    ck = runs / "finetune" / "checkpoints" / "final"
    assert main(["spectrum", "-q", "--set", f"data.root={shapes_root}", "--set", f"model.checkpoint={ck}"]) == 0
    assert (tmp_path / "spectrum" / "spectrum.csv").exists()


def test_probe_command_without_checkpoint(tmp_path, capsys):
    assert dispatch("occlusion", out=tmp_path / "o") == 2
    assert "model.checkpoint" in capsys.readouterr().err
