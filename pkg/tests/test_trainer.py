import json
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.core.data.sample import normalize
from src.core.data.synth import SynthDataset
from src.core.evaluator.evaluator import evaluate
from src.core.model.config import ModelConfig
from src.core.model.layers import ParamRegistry
from src.core.model.network import build_model, model_forward, total_loss
from src.core.tensor.autograd import Tape, Tensor, backward
from src.core.trainer.checkpoint import (
    CheckpointCorruptError,
    CheckpointFormatError,
    CheckpointVersionError,
    FingerprintMismatchError,
    load_checkpoint,
    model_records,
    read_checkpoint,
    save_checkpoint,
)
from src.core.trainer.optimizer import MomentumSGD, poly_lr, sgd_step
from src.core.trainer.trainer import Seg_Trainer, TrainConfig, train
from src.parsegrid_main import build_datasets
from src.utils.config_manager import load_run_config

TOY_CONFIG = Path(__file__).parent.parent / "configs" / "toy.cfg"


class TestPolyLR:
    def test_start(self):
        assert poly_lr(0, 100, 0.002) == 0.002

    def test_end(self):
        assert poly_lr(100, 100, 0.002) == 0.0

    def test_midpoint(self):
        assert poly_lr(50, 100, 0.002, 0.9) == pytest.approx(0.002 * 0.5 ** 0.9, abs=1e-9)

    def test_past_end(self):
        assert poly_lr(101, 100, 0.002) == 0.0

    def test_monotone(self):
        values = [poly_lr(i, 40, 0.01) for i in range(41)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_invalid(self):
        with pytest.raises(ValueError):
            poly_lr(0, 0, 0.002)


def _registry(value=1.0):
    registry = ParamRegistry()
    tensor = registry.create("w", (3,), "zeros", np.random.default_rng(0))
    tensor.data[:] = value
    return registry


class TestMomentumSGD:
    def test_zero_lr(self):
        registry = _registry()
        MomentumSGD(registry, 0.9, 5e-4).step(0.0, {"w": np.ones(3, dtype=np.float32)})
        np.testing.assert_array_equal(registry["w"].data, 1.0)

    def test_plain_step(self):
        registry = _registry()
        MomentumSGD(registry, 0.0, 0.0).step(0.1, {"w": np.full(3, 2.0, dtype=np.float32)})
        np.testing.assert_allclose(registry["w"].data, 0.8, rtol=1e-6)

    def test_two_steps_with_momentum(self):
        registry = _registry()
        optimizer = MomentumSGD(registry, 0.9, 0.0)
        grad = {"w": np.full(3, 0.5, dtype=np.float32)}
        optimizer.step(0.01, grad)
        optimizer.step(0.01, grad)
        np.testing.assert_allclose(registry["w"].data, 1.0 - 0.01 * 0.5 * 2.9, rtol=1e-6)

    def test_weight_decay(self):
        registry = _registry(2.0)
        MomentumSGD(registry, 0.0, 0.1).step(1.0, {"w": np.zeros(3, dtype=np.float32)})
        np.testing.assert_allclose(registry["w"].data, 1.8, rtol=1e-6)

    def test_missing_gradient(self):
        with pytest.raises(KeyError, match="w"):
            MomentumSGD(_registry()).step(0.1, {})

    def test_functional_form_matches(self):
        a, b = _registry(), _registry()
        grad = {"w": np.array([1.0, -1.0, 0.5], dtype=np.float32)}
        velocity = sgd_step(a, grad, 0.1)
        sgd_step(a, grad, 0.1, velocity=velocity)
        optimizer = MomentumSGD(b)
        optimizer.step(0.1, grad)
        optimizer.step(0.1, grad)
        np.testing.assert_array_equal(a["w"].data, b["w"].data)


@pytest.fixture
def tiny_data():
    return SynthDataset(4, 5, (32, 32), seed=0)


def _train_cfg(**kw):
    defaults = dict(epochs=1, batch_size=2, base_lr=0.01, seed=3)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path, tiny_config):
        model = build_model(tiny_config, seed=5)
        first = save_checkpoint(model, tmp_path / "a.ckpt")
        again = save_checkpoint(load_checkpoint(first, tiny_config, seed=99), tmp_path / "b.ckpt")
        assert first.read_bytes() == again.read_bytes()

    def test_restores_parameters_and_stats(self, tmp_path, tiny_config):
        model = build_model(tiny_config, seed=5)
        path = save_checkpoint(model, tmp_path / "a.ckpt")
        restored = load_checkpoint(path, tiny_config, seed=6)
        for name, data in model_records(model).items():
            np.testing.assert_array_equal(model_records(restored)[name], data)

    def test_wrong_class_count(self, tmp_path, tiny_config):
        path = save_checkpoint(build_model(tiny_config), tmp_path / "a.ckpt")
        with pytest.raises(FingerprintMismatchError):
            load_checkpoint(path, ModelConfig.toy(num_classes=6, base_width=8, input_hw=(32, 32)))

    def test_training_fields_do_not_change_fingerprint(self, tmp_path, tiny_config):
        path = save_checkpoint(build_model(tiny_config), tmp_path / "a.ckpt")
        load_checkpoint(path, replace(tiny_config, aux_loss_weight=0.25))

    def test_corrupted_payload(self, tmp_path, tiny_config):
        model = build_model(tiny_config)
        path = save_checkpoint(model, tmp_path / "a.ckpt")
        name, data = next(iter(model_records(model).items()))
        offset = 16 + 2 + len(name.encode("utf-8")) + 1 + 4 * data.ndim + 4
        raw = bytearray(path.read_bytes())
        raw[offset] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointCorruptError) as exc:
            read_checkpoint(path)
        assert exc.value.name == name

    def test_bad_magic(self, tmp_path, tiny_config):
        path = save_checkpoint(build_model(tiny_config), tmp_path / "a.ckpt")
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointFormatError):
            read_checkpoint(path)

    def test_unknown_version(self, tmp_path, tiny_config):
        path = save_checkpoint(build_model(tiny_config), tmp_path / "a.ckpt")
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
        with pytest.raises(CheckpointVersionError):
            read_checkpoint(path)

    def test_truncated(self, tmp_path, tiny_config):
        path = save_checkpoint(build_model(tiny_config), tmp_path / "a.ckpt")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CheckpointFormatError):
            read_checkpoint(path)

    def test_missing_file(self, tmp_path, tiny_config):
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "nope.ckpt", tiny_config)

    def test_eval_predictions_survive_round_trip(self, tmp_path, tiny_config):
        rng = np.random.default_rng(8)
        model = build_model(tiny_config, seed=5)
        # 学習モードの順伝播で BN の移動統計を初期値から動かしておく
        model.train()
        model(Tensor(rng.standard_normal((2, 3, 32, 32))))
        x = Tensor(rng.standard_normal((2, 3, 32, 32)))
        before = model_forward(model.eval(), x).main_logits.data
        path = save_checkpoint(model, tmp_path / "a.ckpt")
        restored = load_checkpoint(path, tiny_config, seed=99).eval()
        np.testing.assert_array_equal(model_forward(restored, x).main_logits.data, before)

    def test_velocity_and_iteration(self, tmp_path, tiny_config):
        model = build_model(tiny_config)
        velocity = {name: np.full(t.shape, 0.5, dtype=np.float32) for name, t in model.registry.items()}
        path = save_checkpoint(model, tmp_path / "a.ckpt", velocity=velocity, iteration=70000)
        archive = read_checkpoint(path)
        assert archive.iteration == 70000
        assert set(archive.velocities()) == set(velocity)
        # 速度レコードがあってもモデルは復元できる
        load_checkpoint(path, tiny_config)


class TestTrainer:
    def test_zero_epochs_saves_initial_model(self, tmp_path, tiny_config, tiny_data):
        result = train(tiny_config, _train_cfg(epochs=0, seed=7), tiny_data, str(tmp_path))
        assert result.losses == []
        assert result.checkpoint == tmp_path / "checkpoints" / "final.ckpt"
        fresh = build_model(tiny_config, seed=7)
        restored = load_checkpoint(result.checkpoint, tiny_config)
        for name, data in model_records(fresh).items():
            np.testing.assert_array_equal(model_records(restored)[name], data)

    def test_one_epoch_logs_metrics(self, tmp_path, tiny_config, tiny_data):
        result = train(tiny_config, _train_cfg(checkpoint_every=1), tiny_data, str(tmp_path))
        assert len(result.losses) == 2
        assert all(np.isfinite(result.losses))
        assert (tmp_path / "checkpoints" / "epoch_0001.ckpt").is_file()
        lines = [json.loads(line) for line in result.metrics_file.read_text(encoding="utf-8").splitlines()]
        assert [r["iter"] for r in lines if "lr" in r] == [0, 1]
        assert lines[0]["lr"] == pytest.approx(0.01)
        assert lines[-1]["split"] == "epoch_end"

    def test_val_metrics_each_epoch(self, tmp_path, tiny_config, tiny_data):
        val = SynthDataset(2, 5, (32, 32), seed=50)
        result = train(tiny_config, _train_cfg(), tiny_data, str(tmp_path), val_dataset=val)
        assert "miou" in result.history[-1]["val"]

    def test_epoch_order_is_seeded(self, tmp_path, tiny_config, tiny_data):
        a = Seg_Trainer(tiny_config, _train_cfg(), tiny_data, str(tmp_path))
        b = Seg_Trainer(tiny_config, _train_cfg(), tiny_data, str(tmp_path))
        np.testing.assert_array_equal(a.epoch_order(3), b.epoch_order(3))
        assert sorted(a.epoch_order(0).tolist()) == [0, 1, 2, 3]

    def test_workers_do_not_change_result(self, tmp_path, tiny_config, tiny_data):
        one = train(tiny_config, _train_cfg(), tiny_data, str(tmp_path / "w1"), workers=1)
        two = train(tiny_config, _train_cfg(), tiny_data, str(tmp_path / "w2"), workers=2)
        assert one.losses == two.losses
        assert one.checkpoint.read_bytes() == two.checkpoint.read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_config, tiny_data):
        full = train(tiny_config, _train_cfg(epochs=2, checkpoint_every=1), tiny_data, str(tmp_path / "full"))
        midway = tmp_path / "full" / "checkpoints" / "epoch_0001.ckpt"
        resumed = train(tiny_config, _train_cfg(epochs=2, resume=str(midway)), tiny_data, str(tmp_path / "resumed"))
        assert resumed.losses == full.losses[2:]
        assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()

    def test_fixed_batch_loss_decreases(self, tiny_config):
        data = SynthDataset(2, 5, (32, 32), seed=0)
        samples = [data[i] for i in range(len(data))]
        x = Tensor(np.concatenate([normalize(s.image).data for s in samples], axis=0))
        labels = np.stack([s.labels for s in samples], axis=0)
        model = build_model(tiny_config, seed=0).train()
        optimizer = MomentumSGD(model.registry, 0.9, 5e-4)
        losses = []
        for _ in range(6):
            model.zero_grad()
            with Tape() as tape:
                loss = total_loss(model_forward(model, x), labels, 255, tiny_config.aux_loss_weight)
            backward(loss, tape)
            losses.append(loss.item())
            optimizer.step(0.002)
        assert all(later < earlier for earlier, later in zip(losses, losses[1:]))

    def test_class_count_mismatch(self, tmp_path, tiny_config):
        with pytest.raises(ValueError):
            Seg_Trainer(tiny_config, _train_cfg(), SynthDataset(2, 6, (32, 32)), str(tmp_path))

    def test_empty_dataset(self, tmp_path, tiny_config):
        with pytest.raises(ValueError):
            Seg_Trainer(tiny_config, _train_cfg(), SynthDataset(0, 5, (32, 32)), str(tmp_path))

    def test_invalid_train_config(self, tmp_path, tiny_config, tiny_data):
        with pytest.raises(ValueError, match="batch_size"):
            Seg_Trainer(tiny_config, _train_cfg(batch_size=0), tiny_data, str(tmp_path))


@pytest.mark.slow
def test_toy_config_learns(tmp_path):
    config = load_run_config(TOY_CONFIG, {"output.dir": str(tmp_path)}).validate("train")
    data, _ = build_datasets(config)
    result = train(config.model, config.train, data, config.output.dir, augment_cfg=config.augment_config())
    assert result.losses[-1] < 0.25 * result.losses[0]
    assert evaluate(result.model, data).metrics.miou >= 0.9


@pytest.mark.slow
@pytest.mark.parametrize("workers", [2, 4])
def test_toy_run_independent_of_workers(tmp_path, workers):
    cfg = ModelConfig.toy(num_classes=5, base_width=16, input_hw=(64, 64))
    data = SynthDataset(16, 5, (64, 64), seed=0)
    train_cfg = TrainConfig(epochs=2, batch_size=4, seed=1)
    serial = train(cfg, train_cfg, data, str(tmp_path / "serial"), workers=1)
    parallel = train(cfg, train_cfg, data, str(tmp_path / "parallel"), workers=workers)
    assert serial.checkpoint.read_bytes() == parallel.checkpoint.read_bytes()
