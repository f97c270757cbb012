from dataclasses import replace

import numpy as np
import pytest

from src.core.evaluator.ablation import variant_param_counts
from src.core.model.config import ModelConfig, ModelConfigError
from src.core.model.diagnostics import model_gradcheck
from src.core.model.layers import ASPP, DecoderBlock, ParamRegistry, RunMode, decoder_mid_width
from src.core.model.network import (
    CDLinkNet,
    ModelOutputs,
    build_model,
    decoder_forward,
    encoder_forward,
    loss_components,
    center_forward,
    total_loss,
)
from src.core.tensor import ops
from src.core.tensor.autograd import GeometryError, Tape, Tensor, backward


def log_softmax_ce(logits: np.ndarray, labels: np.ndarray, ignore: int = 255) -> float:
    """numpy だけで計算した画素平均の交差エントロピー"""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n, _, h, w = z.shape
    total, count = 0.0, 0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                if labels[b, i, j] != ignore:
                    total -= logp[b, labels[b, i, j], i, j]
                    count += 1
    return total / count


class TestModelConfig:
    def test_toy_defaults_valid(self):
        assert ModelConfig.toy().validate().base_width == 64

    def test_input_not_divisible_by_16(self):
        with pytest.raises(ModelConfigError) as exc:
            CDLinkNet(ModelConfig.toy(input_hw=(250, 190)))
        assert any("input_hw" in v for v in exc.value.violations)

    def test_lists_every_violation(self):
        cfg = ModelConfig.toy(base_width=12, num_classes=1, encoder_blocks=(1, 0, 1, 1))
        assert len(cfg.violations()) == 3

    def test_fingerprint_tracks_architecture_only(self):
        base = ModelConfig.toy()
        assert base.fingerprint() == ModelConfig.toy(aux_loss_weight=0.3, input_hw=(32, 32)).fingerprint()
        assert base.fingerprint() != ModelConfig.toy(num_classes=6).fingerprint()
        assert base.fingerprint() != base.with_switches(False, True, True).fingerprint()


class TestShapes:
    def test_full_scale_shapes_without_allocation(self):
        model = CDLinkNet(ModelConfig(), materialize=False)
        shapes = model.feature_shapes(256, 192)
        assert shapes["E5"] == (1, 2048, 16, 12)
        assert shapes["D5"] == (1, 1024, 16, 12)
        assert shapes["D4"] == (1, 512, 32, 24)
        assert shapes["D3"] == (1, 256, 64, 48)
        assert shapes["D2"] == (1, 256, 64, 48)
        assert shapes["smooth.concat"] == (1, 1024, 64, 48)
        assert shapes["smooth.blend"] == (1, 512, 64, 48)
        assert shapes["logits"] == (1, 20, 256, 192)
        assert model.param_count() > 0

    def test_toy_encoder_and_decoder(self):
        model = build_model(ModelConfig.toy())
        x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 64, 64)))
        encoded = encoder_forward(model, x)
        assert encoded["E4"].shape == (1, 32, 4, 4)
        assert encoded["E5"].shape == (1, 64, 4, 4)
        decoded = decoder_forward(model, center_forward(model, encoded["E5"]), encoded)
        assert decoded["D2"].shape == (1, 8, 16, 16)

    @pytest.mark.parametrize("shape", [(1, 3, 256, 192), (2, 3, 64, 64)])
    def test_logit_shapes(self, shape):
        model = build_model(ModelConfig.toy(num_classes=20, base_width=16))
        x = Tensor(np.random.default_rng(1).standard_normal(shape))
        outputs = model(x)
        n, _, h, w = shape
        assert outputs.main_logits.shape == (n, 20, h, w)
        assert len(outputs.aux_logits) == 4
        assert all(a.shape == (n, 20, h, w) for a in outputs.aux_logits)
        shapes = model.feature_shapes(h, w, batch=n)
        assert shapes["E4"][2:] == shapes["E5"][2:]

    def test_feature_shapes_match_forward(self, tiny_config):
        model = build_model(tiny_config)
        x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 48, 32)))
        encoded = encoder_forward(model, x)
        decoded = decoder_forward(model, center_forward(model, encoded["E5"]), encoded)
        shapes = model.feature_shapes(48, 32, batch=2)
        for stage, tensor in list(encoded.items()) + list(decoded.items()):
            assert tensor.shape == shapes[stage], stage

    def test_input_geometry_error(self, tiny_config):
        with pytest.raises(GeometryError):
            build_model(tiny_config)(Tensor(np.zeros((1, 3, 40, 40))))

    def test_no_multiscale_loss_has_no_aux(self, tiny_config):
        model = build_model(tiny_config.with_switches(True, True, False))
        outputs = model(Tensor(np.zeros((1, 3, 32, 32))))
        assert outputs.aux_logits == []
        assert not any(name.startswith("aux.") for name in model.parameters())


class TestASPP:
    def test_full_scale_channel_trace(self):
        model = CDLinkNet(ModelConfig(), materialize=False)
        assert model.aspp.channel_trace() == [2048, 1024, 256, 1024, 2048]

    @pytest.mark.parametrize("cb", [8, 32, 64])
    def test_scaled_trace(self, cb):
        aspp = ASPP(ParamRegistry(materialize=False), "aspp", cb, (12, 24, 36), False, RunMode(), None)
        assert aspp.channel_trace() == [cb, cb // 2, cb // 8, cb // 2, cb]

    def test_output_shape_equals_input(self, rng):
        aspp = ASPP(ParamRegistry(), "aspp", 64, (1, 2, 3), True, RunMode(), rng)
        f = Tensor(rng.standard_normal((2, 64, 4, 4)))
        assert aspp(f).shape == (2, 64, 4, 4)

    def test_width_not_divisible_by_8(self):
        with pytest.raises(ModelConfigError):
            ASPP(ParamRegistry(materialize=False), "aspp", 20, (2,), False, RunMode(), None)

    @pytest.mark.parametrize("dilation", [2, 3])
    def test_impulse_reaches_dilated_taps(self, dilation):
        size = 4 * dilation + 1
        impulse = np.zeros((1, 1, size, size))
        c = size // 2
        impulse[0, 0, c, c] = 1.0
        out = ops.conv2d(Tensor(impulse), Tensor(np.ones((1, 1, 3, 3))), padding=dilation, dilation=dilation)
        hits = {(int(i) - c, int(j) - c) for i, j in np.argwhere(out.data[0, 0] != 0)}
        assert hits == {(di, dj) for di in (-dilation, 0, dilation) for dj in (-dilation, 0, dilation)}


class TestDecoderBlock:
    def test_full_scale_trace(self):
        block = DecoderBlock(ParamRegistry(materialize=False), "d", 2048, 1024, False, RunMode(), None)
        assert block.channel_trace == [2048, 512, 512, 1024]

    def test_upsample_doubles(self, rng):
        block = DecoderBlock(ParamRegistry(), "d", 16, 8, True, RunMode(), rng)
        assert block(Tensor(rng.standard_normal((1, 16, 16, 12)))).shape == (1, 8, 32, 24)

    def test_param_count_closed_form(self):
        registry = ParamRegistry(materialize=False)
        DecoderBlock(registry, "d", 16, 8, True, RunMode(), None)
        mid = 4
        expected = (16 * mid + 2 * mid) + (mid * mid * 9 + 2 * mid) + (mid * 8 + 2 * 8)
        assert registry.param_count() == expected

    def test_mid_width(self):
        assert decoder_mid_width(2048) == 512
        assert decoder_mid_width(2) == 1
        with pytest.raises(ModelConfigError):
            decoder_mid_width(10)


class TestLoss:
    def test_weighted_sum_matches_recomputation(self, tiny_config):
        rng = np.random.default_rng(3)
        model = build_model(tiny_config)
        raw = model(Tensor(rng.standard_normal((2, 3, 32, 32))))
        outputs = ModelOutputs(Tensor(raw.main_logits.data, dtype=np.float64),
                               [Tensor(a.data, dtype=np.float64) for a in raw.aux_logits])
        labels = rng.integers(0, tiny_config.num_classes, size=(2, 32, 32))
        labels[:, :3] = 255
        parts = [log_softmax_ce(t.data, labels) for t in [outputs.main_logits] + outputs.aux_logits]
        expected = parts[0] + 0.5 * sum(parts[1:])
        assert total_loss(outputs, labels).item() == pytest.approx(expected, abs=1e-6)
        assert [c.item() for c in loss_components(outputs, labels)] == pytest.approx(parts, abs=1e-9)

    def test_multiscale_switch_drops_weighted_aux_sum(self, tiny_config):
        rng = np.random.default_rng(4)
        with_aux = build_model(tiny_config, seed=2).train()
        main_only = build_model(replace(tiny_config, use_multiscale_loss=False), seed=2).train()
        for name, tensor in main_only.registry.items():
            tensor.data[...] = with_aux.registry[name].data
        x = Tensor(rng.standard_normal((2, 3, 32, 32)))
        labels = rng.integers(0, tiny_config.num_classes, size=(2, 32, 32))

        def in_float64(outputs):
            return ModelOutputs(Tensor(outputs.main_logits.data, dtype=np.float64),
                                [Tensor(a.data, dtype=np.float64) for a in outputs.aux_logits])

        on, off = in_float64(with_aux(x)), in_float64(main_only(x))
        np.testing.assert_array_equal(on.main_logits.data, off.main_logits.data)
        assert off.aux_logits == []
        aux = [c.item() for c in loss_components(on, labels)[1:]]
        assert len(aux) == 4
        difference = total_loss(on, labels, aux_loss_weight=0.5).item() - total_loss(off, labels, aux_loss_weight=0.5).item()
        assert difference == pytest.approx(0.5 * sum(aux), abs=1e-6)

    def test_equal_components_give_three_times(self, rng):
        logits = Tensor(rng.standard_normal((1, 4, 4, 4)))
        labels = rng.integers(0, 4, size=(1, 4, 4))
        single = ops.cross_entropy_2d(logits, labels).item()
        outputs = ModelOutputs(logits, [logits] * 4)
        assert total_loss(outputs, labels).item() == pytest.approx(3.0 * single, rel=1e-6)

    def test_no_aux_is_main(self, rng):
        logits = Tensor(rng.standard_normal((1, 3, 2, 2)))
        labels = rng.integers(0, 3, size=(1, 2, 2))
        assert total_loss(ModelOutputs(logits), labels).item() == ops.cross_entropy_2d(logits, labels).item()

    def test_aux_loss_reaches_decoder_features(self, tiny_config, rng):
        model = build_model(tiny_config)
        head = model.aux_heads["D3"]
        width = model.decoder_widths["D3"]
        d = Tensor(rng.standard_normal((2, width, 8, 8)), requires_grad=True)
        labels = rng.integers(0, tiny_config.num_classes, size=(2, 32, 32))
        with Tape() as tape:
            loss = ops.cross_entropy_2d(head(d, (32, 32)), labels)
        backward(loss, tape)
        assert np.any(d.grad != 0)


class TestDeterminism:
    def test_same_seed_same_parameters(self, tiny_config):
        a, b = CDLinkNet(tiny_config, seed=7), CDLinkNet(tiny_config, seed=7)
        assert list(a.parameters()) == list(b.parameters())
        for name, tensor in a.parameters().items():
            np.testing.assert_array_equal(tensor.data, b.parameters()[name].data)

    def test_eval_forward_bitwise_repeatable(self, tiny_config):
        model = build_model(tiny_config).eval()
        x = Tensor(np.random.default_rng(4).standard_normal((1, 3, 32, 32)))
        np.testing.assert_array_equal(model(x).main_logits.data, model(x).main_logits.data)

    def test_skip_connection_is_live(self, tiny_config):
        model = build_model(tiny_config).eval()
        x = Tensor(np.random.default_rng(5).standard_normal((1, 3, 32, 32)))
        encoded = encoder_forward(model, x)
        center = center_forward(model, encoded["E5"])
        base = decoder_forward(model, center, encoded)["D4"].data
        encoded["E3"] = Tensor(np.zeros_like(encoded["E3"].data))
        assert not np.array_equal(base, decoder_forward(model, center, encoded)["D4"].data)

    def test_smooth_uses_d5(self, tiny_config):
        model = build_model(tiny_config).eval()
        x = Tensor(np.random.default_rng(6).standard_normal((1, 3, 32, 32)))
        encoded = encoder_forward(model, x)
        decoded = decoder_forward(model, center_forward(model, encoded["E5"]), encoded)
        base = model.smooth(decoded, (32, 32)).data
        decoded["D5"] = Tensor(np.zeros_like(decoded["D5"].data))
        assert not np.array_equal(base, model.smooth(decoded, (32, 32)).data)


class TestVariants:
    @pytest.mark.parametrize("base_width", [8, 32, 64, 2048])
    def test_param_count_ordering(self, base_width):
        cfg = ModelConfig.toy(base_width=base_width)
        counts = variant_param_counts(cfg)
        assert counts["B"] < counts["B+A"]
        assert counts["B"] < counts["B+S"]

    def test_variant_names(self, tiny_config):
        assert CDLinkNet(tiny_config, materialize=False).variant_name == "B+A+S+L"
        assert CDLinkNet(tiny_config.with_switches(False, False, False), materialize=False).variant_name == "B"

    def test_baseline_uses_dilated_center(self, tiny_config):
        model = build_model(tiny_config.with_switches(False, False, False))
        names = list(model.parameters())
        assert any(n.startswith("center.dblock.") for n in names)
        assert any(n.startswith("refiner.") for n in names)
        out = model(Tensor(np.zeros((1, 3, 32, 32))))
        assert out.main_logits.shape == (1, 5, 32, 32)


@pytest.mark.slow
def test_model_gradients_match_finite_differences():
    results = model_gradcheck()
    failed = [(r.name, r.error) for r in results if not r.passed]
    assert failed == []
