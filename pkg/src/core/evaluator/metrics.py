"""
混同行列とセグメンテーション指標

行 = 正解、列 = 予測。正解にも予測にも現れないクラスは平均から除き、None として報告する。
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class ConfusionMatrixError(ValueError):
    """混同行列の入力不正・空行列"""


class ConfusionMatrix:
    """K×K の画素数カウント"""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        if num_classes < 1:
            raise ConfusionMatrixError(f"クラス数は1以上である必要があります: {num_classes}")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or np.any(counts < 0):
            raise ConfusionMatrixError(f"カウント行列が不正です: shape={counts.shape}")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred: np.ndarray, truth: np.ndarray, ignore_value: int = 255) -> "ConfusionMatrix":
        """ignore 以外の画素について counts[truth, pred] を加算する"""
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ConfusionMatrixError(f"予測 {pred.shape} と正解 {truth.shape} の形状が一致しません")
        k = self.num_classes
        valid = truth != ignore_value
        for what, values in (("正解", truth), ("予測", pred)):
            bad = valid & ((values < 0) | (values >= k))
            if np.any(bad):
                where = tuple(int(i) for i in np.argwhere(bad)[0])
                raise ConfusionMatrixError(f"{what}の値 {int(values[where])} が [0,{k}) の範囲外です（座標 {where}）")
        index = truth[valid].astype(np.int64) * k + pred[valid].astype(np.int64)
        self.counts += np.bincount(index, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ConfusionMatrixError(f"クラス数が一致しません: {self.num_classes} vs {other.num_classes}")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self.merge(other)


def confusion_update(cm: ConfusionMatrix, pred: np.ndarray, truth: np.ndarray, ignore_value: int = 255) -> ConfusionMatrix:
    return cm.update(pred, truth, ignore_value)


@dataclass
class SegMetrics:
    pixel_acc: float
    mean_acc: float
    miou: float
    per_class_iou: List[Optional[float]] = field(default_factory=list)
    per_class_acc: List[Optional[float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "pixel_acc": self.pixel_acc,
            "mean_acc": self.mean_acc,
            "miou": self.miou,
            "per_class_iou": list(self.per_class_iou),
            "per_class_acc": list(self.per_class_acc),
        }


def metrics(cm: ConfusionMatrix) -> SegMetrics:
    """
    画素精度・平均精度・クラス別 IoU・mIoU を計算する

    Raises:
        ConfusionMatrixError: カウントが空
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ConfusionMatrixError("混同行列が空です")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    union = rows + cols - diag

    per_class_acc = [float(d / r) if r > 0 else None for d, r in zip(diag, rows)]
    present = rows + cols > 0
    per_class_iou = [float(diag[k] / union[k]) if present[k] else None for k in range(cm.num_classes)]
    acc_values = [a for a in per_class_acc if a is not None]
    iou_values = [v for v in per_class_iou if v is not None]
    return SegMetrics(
        pixel_acc=float(diag.sum() / total),
        mean_acc=float(np.mean(acc_values)),
        miou=float(np.mean(iou_values)),
        per_class_iou=per_class_iou,
        per_class_acc=per_class_acc,
    )


def lr_confusion(cm: ConfusionMatrix, flip_pairs: Sequence[Tuple[int, int]],
                 names: Optional[Sequence[str]] = None) -> Tuple[Dict[str, Optional[float]], Optional[float]]:
    """
    左右ペアの取り違え率

    Returns:
        (ペア名 → (cm[a,b] + cm[b,a]) / (row_a + row_b)、全ペア合計の率)。分母 0 は None
    """
    counts = cm.counts
    rows = counts.sum(axis=1)
    rates: Dict[str, Optional[float]] = {}
    swapped_total, rows_total = 0, 0
    for a, b in flip_pairs:
        key = f"{names[a]}/{names[b]}" if names is not None else f"{a}/{b}"
        swapped = int(counts[a, b] + counts[b, a])
        denom = int(rows[a] + rows[b])
        rates[key] = swapped / denom if denom > 0 else None
        swapped_total += swapped
        rows_total += denom
    return rates, (swapped_total / rows_total if rows_total > 0 else None)


def small_class_miou(cm: ConfusionMatrix, fraction: float = 0.25) -> Optional[float]:
    """正解画素数が下位 fraction（最低1クラス）に入るクラスの平均 IoU"""
    if not 0.0 < fraction <= 1.0:
        raise ConfusionMatrixError(f"fraction は (0,1] である必要があります: {fraction}")
    result = metrics(cm)
    rows = cm.counts.sum(axis=1)
    candidates = [k for k in range(cm.num_classes) if rows[k] > 0 and result.per_class_iou[k] is not None]
    if not candidates:
        return None
    candidates.sort(key=lambda k: (rows[k], k))
    take = max(1, int(np.floor(len(candidates) * fraction)))
    return float(np.mean([result.per_class_iou[k] for k in candidates[:take]]))
