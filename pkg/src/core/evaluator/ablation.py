"""
アブレーション（B / B+A / B+S / B+A+S / B+S+A+L）の学習・評価とレポート出力

A: ASPP、S: Smooth モジュール、L: 多重スケール損失（補助ヘッド）。
全バリアントを同じシードで学習し、クラス別 IoU・mIoU・パラメータ数を表にまとめる。
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from src.core.data.classes import ClassTable
from src.core.evaluator.evaluator import evaluate
from src.core.model.config import ModelConfig
from src.core.model.network import CDLinkNet
from src.core.trainer.trainer import TrainConfig, train
from src.utils.error_logger import Error_Logger
from src.utils.logger import get_logger

logger = get_logger(__name__)

# (名前, use_aspp, use_smooth, use_multiscale_loss)
VARIANTS: Tuple[Tuple[str, bool, bool, bool], ...] = (
    ("B", False, False, False),
    ("B+A", True, False, False),
    ("B+S", False, True, False),
    ("B+A+S", True, True, False),
    ("B+S+A+L", True, True, True),
)

# LIP 検証セットでの公表値（参考。デスクスケールでは再現しない）
REFERENCE_MIOU = {"B": 50.92, "B+A": 51.42, "B+S": 51.93, "B+A+S": 52.22, "B+S+A+L": 53.05}
REFERENCE_COMPARISON = (
    ("Deeplab(VGG16)", 82.66, 51.64, 41.64),
    ("Attention", 83.43, 54.39, 42.92),
    ("Deeplab(ResNet-101)", 84.09, 55.62, 44.80),
    ("JPPNet", 86.39, 62.32, 51.37),
    ("CE2P", 87.37, 63.20, 53.10),
    ("C-DLinkNet", 87.04, 62.84, 53.05),
)


@dataclass
class AblationRow:
    variant: str
    param_count: int
    per_class_iou: List[Optional[float]] = field(default_factory=list)
    miou: Optional[float] = None
    pixel_acc: Optional[float] = None
    mean_acc: Optional[float] = None
    lr_confusion: Optional[float] = None
    iou_delta: List[Optional[float]] = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            "variant": self.variant,
            "param_count": self.param_count,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "pixel_acc": self.pixel_acc,
            "mean_acc": self.mean_acc,
            "lr_confusion": self.lr_confusion,
            "iou_delta_vs_B": self.iou_delta,
            "error": self.error,
        }


@dataclass
class AblationReport:
    class_names: Tuple[str, ...]
    rows: List[AblationRow] = field(default_factory=list)

    def row(self, variant: str) -> AblationRow:
        for row in self.rows:
            if row.variant == variant:
                return row
        raise KeyError(variant)

    def fill_deltas(self) -> None:
        """各行のクラス別 IoU 差分（対 B）を埋める"""
        try:
            base = self.row("B")
        except KeyError:
            return
        for row in self.rows:
            row.iou_delta = [
                (v - b) if v is not None and b is not None else None
                for v, b in zip(row.per_class_iou, base.per_class_iou)
            ] if row.per_class_iou and base.per_class_iou else []

    def to_text(self, include_reference: bool = True) -> str:
        """列幅を揃えた表（値は%表記）"""
        header = ["Method"] + list(self.class_names) + ["mIoU", "params", "L/R conf."]
        lines = [header]
        for row in self.rows:
            if row.error:
                lines.append([row.variant] + ["-"] * len(self.class_names) + ["failed", str(row.param_count), "-"])
                continue
            cells = [row.variant] + [_pct(v) for v in row.per_class_iou]
            cells += [_pct(row.miou), str(row.param_count), _pct(row.lr_confusion)]
            lines.append(cells)
        text = _align(lines)
        if include_reference:
            text += "\n\n[reference: published LIP validation results, not reproduced here]\n"
            ref = [["Method", "mIoU"]] + [[name, f"{v:.2f}"] for name, v in REFERENCE_MIOU.items()]
            text += _align(ref)
            text += "\n\n"
            comp = [["Method", "pixel acc.", "mean acc.", "mIoU"]]
            comp += [[name, f"{a:.2f}", f"{m:.2f}", f"{i:.2f}"] for name, a, m, i in REFERENCE_COMPARISON]
            text += _align(comp)
        return text + "\n"

    def write(self, out_dir: Path) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path = out_dir / "ablation.txt"
        jsonl_path = out_dir / "ablation.jsonl"
        text_path.write_text(self.to_text(), encoding="utf-8")
        with open(jsonl_path, "w", encoding="utf-8") as f:
            for row in self.rows:
                f.write(json.dumps(row.to_dict(), ensure_ascii=False) + "\n")
        return text_path, jsonl_path


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.2f}"


def _align(lines: Sequence[Sequence[str]]) -> str:
    widths = [max(len(line[i]) for line in lines) for i in range(len(lines[0]))]
    return "\n".join(" ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in lines)


def variant_config(base: ModelConfig, use_aspp: bool, use_smooth: bool, use_multiscale_loss: bool) -> ModelConfig:
    return base.with_switches(use_aspp, use_smooth, use_multiscale_loss)


def variant_param_counts(base: ModelConfig) -> Dict[str, int]:
    """学習なしでバリアント毎のパラメータ数を返す（形状のみのレジストリ）"""
    return {
        name: CDLinkNet(variant_config(base, aspp, smooth, loss), materialize=False).param_count()
        for name, aspp, smooth, loss in VARIANTS
    }


def run_ablation(
    base_model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset,
    output_dir: str,
    eval_dataset=None,
    tta: bool = False,
    workers: int = 1,
    table: Optional[ClassTable] = None,
    error_logger: Optional[Error_Logger] = None,
    **train_kwargs,
) -> AblationReport:
    """
    5バリアントを同じシードで学習・評価する

    失敗したバリアントは error に記録して残りを続行する。

    Args:
        base_model_cfg: スイッチ以外のモデル構成
        train_cfg: 学習設定（全バリアント共通）
        dataset: 学習データ
        output_dir: バリアント毎のサブディレクトリとレポートの出力先
        eval_dataset: 評価データ（None なら学習データ）
        tta: 評価時に左右反転 TTA を使う
        workers: 並列数
        table: クラス表（None なら dataset.class_table）
        error_logger: 失敗の記録先

    Returns:
        AblationReport: バリアント順の結果
    """
    table = table or dataset.class_table
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    error_logger = error_logger or Error_Logger()
    out = Path(output_dir)
    counts = variant_param_counts(base_model_cfg)
    report = AblationReport(tuple(table.names))

    for name, use_aspp, use_smooth, use_loss in VARIANTS:
        cfg = variant_config(base_model_cfg, use_aspp, use_smooth, use_loss)
        variant_dir = out / name.replace("+", "_")
        row = AblationRow(variant=name, param_count=counts[name])
        try:
            result = train(cfg, train_cfg, dataset, str(variant_dir), workers=workers, **train_kwargs)
            evaluation = evaluate(result.model, eval_dataset, tta=tta, table=table, workers=workers)
            row.per_class_iou = list(evaluation.metrics.per_class_iou)
            row.miou = evaluation.metrics.miou
            row.pixel_acc = evaluation.metrics.pixel_acc
            row.mean_acc = evaluation.metrics.mean_acc
            row.lr_confusion = evaluation.lr_confusion
        except Exception as e:
            row.error = str(e)
            error_logger.log_error("ABLATION_VARIANT_FAILED", f"バリアント {name} が失敗しました: {e}",
                                   {"output_dir": str(variant_dir)}, run_id=name)
        report.rows.append(row)
        logger.info("バリアント完了", extra={"variant": name, "miou": row.miou, "params": row.param_count})

    report.fill_deltas()
    text_path, jsonl_path = report.write(out)
    logger.info("アブレーションレポートを書き出しました", extra={"text": str(text_path), "jsonl": str(jsonl_path)})
    return report
