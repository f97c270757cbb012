import pytest

from src.utils.config_manager import (
    ConfigError,
    RunConfig,
    load_run_config,
    parse_config_text,
    parse_override_args,
    parse_run_config,
    resolve_key,
)


def _write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return path


class TestParsing:
    def test_types_follow_defaults(self, tmp_path):
        path = _write(tmp_path, "\n".join([
            "# comment",
            "model.base_width=16",
            "model.encoder_blocks=2,1,1,1",
            "model.use_aspp=false",
            "train.base_lr=0.01",
            "augment.scale_range=0.8,1.2",
            "data.source = lip",
            "",
        ]))
        config = load_run_config(path)
        assert config.model.base_width == 16
        assert config.model.encoder_blocks == (2, 1, 1, 1)
        assert config.model.use_aspp is False
        assert config.train.base_lr == 0.01
        assert config.augment.scale_range == (0.8, 1.2)
        assert config.data.source == "lip"

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match="model.bogus"):
            load_run_config(_write(tmp_path, "model.bogus=1\n"))

    def test_bad_value_lists_every_problem(self, tmp_path):
        with pytest.raises(ConfigError) as exc:
            load_run_config(_write(tmp_path, "train.epochs=abc\nmodel.use_smooth=maybe\n"))
        assert len(exc.value.problems) == 2

    def test_derived_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(_write(tmp_path, "augment.crop_hw=8,8\n"))

    def test_line_without_equals(self):
        with pytest.raises(ConfigError, match=":2:"):
            parse_config_text("train.epochs=1\nnonsense\n", "x.cfg")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.cfg")

    def test_dump_round_trip(self):
        config = load_run_config(overrides={"model.base_width": "24", "eval.tta": "true", "data.root": "x y"})
        assert parse_run_config(config.dump()) == config


class TestKeys:
    def test_unique_bare_key(self):
        assert resolve_key("epochs") == "train.epochs"

    def test_ambiguous_bare_key(self):
        with pytest.raises(ConfigError, match="train.seed"):
            resolve_key("seed")

    def test_preferred_section(self):
        assert resolve_key("seed", prefer_section="synth") == "synth.seed"
        assert resolve_key("checkpoint", prefer_section="infer") == "infer.checkpoint"

    def test_override_forms(self):
        overrides, positional = parse_override_args(
            ["--epochs", "3", "--tta", "a.ppm", "--model.base-width=16", "b.ppm"], prefer_section="train")
        assert overrides == {"train.epochs": "3", "eval.tta": "true", "model.base_width": "16"}
        assert positional == ["a.ppm", "b.ppm"]

    def test_override_missing_value(self):
        with pytest.raises(ConfigError):
            parse_override_args(["--epochs"])


class TestPrecedence:
    def test_env_seed(self, monkeypatch):
        monkeypatch.setenv("PARSEGRID_SEED", "42")
        assert load_run_config().train.seed == 42

    def test_override_beats_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("PARSEGRID_SEED", "42")
        config = load_run_config(_write(tmp_path, "train.seed=5\n"), {"train.seed": "7"})
        assert config.train.seed == 7

    def test_env_beats_file(self, monkeypatch, tmp_path):
        monkeypatch.setenv("PARSEGRID_SEED", "42")
        assert load_run_config(_write(tmp_path, "train.seed=5\n")).train.seed == 42

    def test_dotenv_file(self, monkeypatch, tmp_path):
        env = tmp_path / "custom.env"
        env.write_text("PARSEGRID_SEED=9\n", encoding="utf-8")
        monkeypatch.setenv("PARSEGRID_ENV_FILE", str(env))
        assert load_run_config().train.seed == 9

    def test_env_workers(self, monkeypatch):
        monkeypatch.setenv("PARSEGRID_WORKERS", "3")
        assert load_run_config().run.workers == 3


class TestValidate:
    def test_defaults_valid(self):
        assert RunConfig().validate("train") is not None

    def test_collects_all_violations(self):
        config = load_run_config(overrides={"model.num_classes": "1", "run.workers": "0", "train.batch_size": "0"})
        with pytest.raises(ConfigError) as exc:
            config.validate("train")
        joined = " ".join(exc.value.problems)
        assert "run.workers" in joined and "batch_size" in joined and "model" in joined

    def test_lip_root_required(self):
        config = load_run_config(overrides={"data.source": "lip", "model.num_classes": "20"})
        with pytest.raises(ConfigError, match="data.root"):
            config.validate("train")
        config.validate("synth")

    def test_lip_root_must_exist(self, tmp_path):
        config = load_run_config(overrides={"data.source": "lip", "data.root": str(tmp_path / "nope")})
        with pytest.raises(ConfigError, match="data.root"):
            config.validate("eval")

    def test_checkpoint_required(self):
        with pytest.raises(ConfigError, match="infer.checkpoint"):
            RunConfig().validate("infer")

    def test_synth_class_count_must_match(self):
        config = load_run_config(overrides={"data.num_classes": "7"})
        with pytest.raises(ConfigError, match="num_classes"):
            config.validate("train")

    def test_crop_follows_model_input(self):
        config = load_run_config(overrides={"model.input_hw": "48,32"})
        assert config.augment_config().crop_hw == (48, 32)

    def test_gradcheck_coords(self):
        assert load_run_config(overrides={"gradcheck.coords": "0"}).validate("gradcheck").gradcheck.coords == 0
        with pytest.raises(ConfigError, match="gradcheck.coords"):
            load_run_config(overrides={"gradcheck.coords": "-1"}).validate("gradcheck")
