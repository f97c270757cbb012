import json

import pytest

from src.core.data.synth import SynthDataset
from src.core.evaluator.ablation import (
    VARIANTS,
    AblationReport,
    AblationRow,
    run_ablation,
    variant_config,
    variant_param_counts,
)
from src.core.model.config import ModelConfig
from src.core.trainer.trainer import TrainConfig
from src.utils.error_logger import Error_Logger


def _report():
    report = AblationReport(("bkg", "torso"))
    report.rows.append(AblationRow("B", 100, per_class_iou=[0.9, 0.5], miou=0.7, lr_confusion=0.1))
    report.rows.append(AblationRow("B+A", 120, per_class_iou=[0.95, None], miou=0.95, lr_confusion=0.05))
    report.rows.append(AblationRow("B+S", 130, error="boom"))
    return report


class TestReport:
    def test_deltas_against_baseline(self):
        report = _report()
        report.fill_deltas()
        assert report.row("B").iou_delta == [0.0, 0.0]
        assert report.row("B+A").iou_delta[0] == pytest.approx(0.05)
        assert report.row("B+A").iou_delta[1] is None
        assert report.row("B+S").iou_delta == []

    def test_text_table(self):
        text = _report().to_text(include_reference=False)
        lines = text.strip().splitlines()
        assert lines[0].split() == ["Method", "bkg", "torso", "mIoU", "params", "L/R", "conf."]
        assert lines[1].split() == ["B", "90.00", "50.00", "70.00", "100", "10.00"]
        assert "n/a" in lines[2]
        assert "failed" in lines[3]
        assert "reference" not in text

    def test_reference_section(self):
        assert "C-DLinkNet" in _report().to_text()

    def test_write(self, tmp_path):
        report = _report()
        report.fill_deltas()
        text_path, jsonl_path = report.write(tmp_path)
        assert text_path.read_text(encoding="utf-8") == report.to_text()
        rows = [json.loads(line) for line in jsonl_path.read_text(encoding="utf-8").splitlines()]
        assert [r["variant"] for r in rows] == ["B", "B+A", "B+S"]
        assert rows[2]["error"] == "boom"

    def test_unknown_variant(self):
        with pytest.raises(KeyError):
            _report().row("B+A+S")


def test_variant_switches():
    base = ModelConfig.toy()
    names = [name for name, *_ in VARIANTS]
    assert names == ["B", "B+A", "B+S", "B+A+S", "B+S+A+L"]
    full = variant_config(base, True, True, True)
    assert (full.use_aspp, full.use_smooth, full.use_multiscale_loss) == (True, True, True)


def test_param_counts_without_weights():
    counts = variant_param_counts(ModelConfig.toy(base_width=32))
    assert set(counts) == {"B", "B+A", "B+S", "B+A+S", "B+S+A+L"}
    assert counts["B+S+A+L"] > counts["B+A+S"]
    assert counts["B+S"] > counts["B"]


def test_run_ablation_untrained(tmp_path, tiny_config):
    data = SynthDataset(2, 5, (32, 32), seed=0)
    report = run_ablation(tiny_config, TrainConfig(epochs=0, seed=1), data, str(tmp_path),
                          error_logger=Error_Logger(str(tmp_path / "logs")))
    assert [row.variant for row in report.rows] == ["B", "B+A", "B+S", "B+A+S", "B+S+A+L"]
    assert all(row.error is None for row in report.rows)
    assert all(0.0 <= row.miou <= 1.0 for row in report.rows)
    assert (tmp_path / "B_S_A_L" / "checkpoints" / "final.ckpt").is_file()
    assert (tmp_path / "ablation.txt").is_file()


def test_run_ablation_records_failures(tmp_path, tiny_config):
    errors = Error_Logger(str(tmp_path / "logs"))
    mismatched = SynthDataset(2, 6, (32, 32), seed=0)
    report = run_ablation(tiny_config, TrainConfig(epochs=0), mismatched, str(tmp_path), error_logger=errors)
    assert all(row.error for row in report.rows)
    assert errors.get_error_stats()["ABLATION_VARIANT_FAILED"] == 5
    failed = errors.get_error_details("ABLATION_VARIANT_FAILED")["ABLATION_VARIANT_FAILED"]
    assert [d["run_id"] for d in failed] == [row.variant for row in report.rows]
