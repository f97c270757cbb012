"""
学習時のデータ拡張（ランダム拡大縮小・回転・切り出し・左右反転）

画像は双線形、ラベルは最近傍で再標本化するため、拡張後のラベルは元の値・ignore_value・
反転で入れ替わった値のいずれかになる。
"""

from dataclasses import dataclass
from typing import Tuple

import cv2
import numpy as np

from src.core.data.classes import ClassTable
from src.core.data.sample import DEFAULT_MEAN, SegSample


class AugmentError(ValueError):
    """拡張設定が不正"""


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: Tuple[float, float] = (0.5, 1.5)
    rotation_deg: float = 30.0
    crop_hw: Tuple[int, int] = (256, 192)
    flip_prob: float = 0.5
    fill_color: Tuple[float, float, float] = DEFAULT_MEAN

    def validate(self) -> "AugmentConfig":
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise AugmentError(f"scale_range が不正です: {self.scale_range}")
        if self.rotation_deg < 0:
            raise AugmentError(f"rotation_deg は0以上である必要があります: {self.rotation_deg}")
        if any(s < 1 for s in self.crop_hw):
            raise AugmentError(f"crop_hw が不正です: {self.crop_hw}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise AugmentError(f"flip_prob は 0〜1 である必要があります: {self.flip_prob}")
        return self

    @classmethod
    def identity(cls, crop_hw: Tuple[int, int]) -> "AugmentConfig":
        return cls(scale_range=(1.0, 1.0), rotation_deg=0.0, crop_hw=tuple(crop_hw), flip_prob=0.0)


def flip(sample: SegSample, table: ClassTable) -> SegSample:
    """左右反転（ラベルは反転ペアを入れ替える）"""
    lut = table.swap_lut(sample.ignore_value)
    labels = lut[sample.labels[:, ::-1]]
    return SegSample(np.ascontiguousarray(sample.image[..., ::-1]), labels, sample.ignore_value, sample.source)


def _rescale(image: np.ndarray, labels: np.ndarray, s: float) -> Tuple[np.ndarray, np.ndarray]:
    h, w = labels.shape
    size = (max(1, int(round(w * s))), max(1, int(round(h * s))))
    image = cv2.resize(image, size, interpolation=cv2.INTER_LINEAR)
    labels = cv2.resize(labels, size, interpolation=cv2.INTER_NEAREST)
    return image, labels


def _rotate(image: np.ndarray, labels: np.ndarray, angle: float, fill: Tuple[float, float, float],
            ignore_value: int) -> Tuple[np.ndarray, np.ndarray]:
    h, w = labels.shape
    matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, 1.0)
    image = cv2.warpAffine(image, matrix, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=tuple(float(c) for c in fill))
    labels = cv2.warpAffine(labels, matrix, (w, h), flags=cv2.INTER_NEAREST,
                            borderMode=cv2.BORDER_CONSTANT, borderValue=int(ignore_value))
    return image, labels


def _pad_to(image: np.ndarray, labels: np.ndarray, crop_hw: Tuple[int, int], fill: Tuple[float, float, float],
            ignore_value: int) -> Tuple[np.ndarray, np.ndarray]:
    h, w = labels.shape
    pad_h, pad_w = max(0, crop_hw[0] - h), max(0, crop_hw[1] - w)
    if pad_h == 0 and pad_w == 0:
        return image, labels
    image = cv2.copyMakeBorder(image, 0, pad_h, 0, pad_w, cv2.BORDER_CONSTANT, value=tuple(float(c) for c in fill))
    labels = cv2.copyMakeBorder(labels, 0, pad_h, 0, pad_w, cv2.BORDER_CONSTANT, value=int(ignore_value))
    return image, labels


def augment(sample: SegSample, rng: np.random.Generator, cfg: AugmentConfig, table: ClassTable) -> SegSample:
    """
    拡大縮小 → 回転 → パディング・切り出し → 左右反転 を適用する

    乱数は設定に関わらず同じ順序・回数だけ消費する。

    Args:
        sample: 入力サンプル
        rng: サンプル専用の乱数
        cfg: 拡張設定
        table: 反転ペアを持つクラス表

    Returns:
        SegSample: crop_hw サイズの拡張済みサンプル
    """
    s = float(rng.uniform(*cfg.scale_range))
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    crop_u, crop_v = float(rng.random()), float(rng.random())
    do_flip = bool(rng.random() < cfg.flip_prob)

    image = sample.hwc()
    labels = sample.labels.astype(np.uint8)
    if s != 1.0:
        image, labels = _rescale(image, labels, s)
    if angle != 0.0:
        image, labels = _rotate(image, labels, angle, cfg.fill_color, sample.ignore_value)
    image, labels = _pad_to(image, labels, cfg.crop_hw, cfg.fill_color, sample.ignore_value)

    h, w = labels.shape
    ch, cw = cfg.crop_hw
    top = int(crop_u * (h - ch + 1)) if h > ch else 0
    left = int(crop_v * (w - cw + 1)) if w > cw else 0
    image = image[top:top + ch, left:left + cw]
    labels = labels[top:top + ch, left:left + cw]

    out = SegSample.from_hwc(image, labels.astype(np.int64), sample.ignore_value, sample.source)
    return flip(out, table) if do_flip else out
