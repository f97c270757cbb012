import json
from pathlib import Path

import numpy as np
import pytest

from src.core.data.pnm import read_pnm, write_pnm
from src.parsegrid_main import main
from src.utils.config_manager import load_run_config
from src.utils.error_logger import Error_Logger

REPO_ROOT = Path(__file__).parent.parent
TINY = ["--model.base_width", "8", "--model.input_hw", "32,32", "--data.hw", "32,32", "--data.count", "2"]


@pytest.fixture
def errors(tmp_path):
    return Error_Logger(str(tmp_path / "logs"))


def _files(root: Path):
    return {p.relative_to(root): p.read_bytes() for p in root.rglob("*") if p.is_file()}


@pytest.mark.parametrize("name,command", [("toy.cfg", "train"), ("lip.cfg", "gradcheck")])
def test_shipped_configs_are_valid(name, command):
    load_run_config(REPO_ROOT / "configs" / name).validate(command)


def test_synth_is_reproducible(tmp_path):
    for out in ("a", "b"):
        assert main(["synth", "--count", "3", "--out", str(tmp_path / out), "--val_fraction", "0.34"]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert (tmp_path / "a" / "splits" / "val.txt").read_text().split() == ["synth_00002"]


def test_train_eval_infer(tmp_path, capsys, errors):
    out = tmp_path / "run"
    assert main(["train", "--epochs", "0", "--output.dir", str(out)] + TINY, errors) == 0
    checkpoint = out / "checkpoints" / "final.ckpt"
    assert checkpoint.is_file()
    assert "train.epochs=0" in (out / "effective.cfg").read_text(encoding="utf-8")
    assert str(checkpoint) in capsys.readouterr().out

    assert main(["eval", "--checkpoint", str(checkpoint), "--output.dir", str(out), "--tta"] + TINY, errors) == 0
    summary = json.loads((out / "eval.json").read_text(encoding="utf-8"))
    assert 0.0 <= summary["miou"] <= 1.0

    image = write_pnm(tmp_path / "person.ppm", np.random.default_rng(0).random((1, 3, 32, 32)))
    assert main(["infer", "--checkpoint", str(checkpoint), str(image), "--infer.out", str(tmp_path / "pred")]
                + TINY, errors) == 0
    assert read_pnm(tmp_path / "pred" / "person_labels.pgm").max() < 5


def test_missing_lip_root(tmp_path, capsys):
    code = main(["train", "--data.source", "lip", "--data.root", str(tmp_path / "absent"), "--model.num_classes", "20"])
    assert code == 1
    assert "data.root" in capsys.readouterr().err


def test_unknown_command():
    assert main(["paint"]) == 1


def test_unknown_option():
    assert main(["train", "--no-such-key", "1"]) == 1


def test_infer_without_images(tmp_path, errors):
    assert main(["infer", "--checkpoint", str(tmp_path / "x.ckpt")], errors) == 1


def test_corrupt_checkpoint_is_runtime_error(tmp_path, errors):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    code = main(["eval", "--checkpoint", str(bad), "--output.dir", str(tmp_path)] + TINY, errors)
    assert code == 2
    assert errors.get_error_stats()["CHECKPOINT_ERROR"] == 1


def test_gradcheck_ops(capsys):
    assert main(["gradcheck", "--scale", "ops"]) == 0
    out = capsys.readouterr().out
    assert "conv2d.w" in out and "FAIL" not in out
