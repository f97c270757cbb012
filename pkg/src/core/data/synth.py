"""
合成「人型パーツ」データセット

部位ごとの多角形（楕円は多角形近似）を図形座標で組み立て、拡大縮小・回転・平行移動してから
OpenCV でラベルマップへ塗り、画像はラベルマップから色を引いて作る（ラベルは描画領域と一致する）。
図形座標は高さ1、中心原点、y は下向き。l-* は図形の左側（x<0）に置き、r-* はその鏡像。
"""

import math
from pathlib import Path
from typing import Dict, List, Tuple, Union

import cv2
import numpy as np

from src.core.data.classes import LIP_PALETTE, SYNTH_CLASS_NAMES, synth_table
from src.core.data.pnm import write_pnm
from src.core.data.sample import IGNORE_VALUE, SegSample
from src.utils.logger import get_logger

logger = get_logger(__name__)

MIN_HW = 32
SCALE_RANGE = (0.5, 1.5)
ROTATION_DEG = 30.0
# 図形の高さ（倍率1のとき）= 画像の短辺 × この比率
REFERENCE_HEIGHT = 0.7
COLOR_JITTER = 0.15
NOISE_STD = 0.06
_SUBPIXEL_SHIFT = 4

Polygon = np.ndarray


class SynthError(ValueError):
    """合成サンプルを生成できない"""


def _ellipse(cx: float, cy: float, ax: float, ay: float, points: int = 32) -> Polygon:
    t = np.linspace(0.0, 2.0 * math.pi, points, endpoint=False)
    return np.stack([cx + ax * np.cos(t), cy + ay * np.sin(t)], axis=1)


def _rect(x0: float, y0: float, x1: float, y1: float) -> Polygon:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def _segment(top: Tuple[float, float], angle: float, start: float, length: float,
             w0: float, w1: float) -> Polygon:
    """top から角度 angle（鉛直下向きから外側へ、ラジアン）方向に伸びる台形"""
    dx, dy = math.sin(angle), math.cos(angle)
    nx, ny = dy, -dx
    a = (top[0] + dx * start, top[1] + dy * start)
    b = (top[0] + dx * (start + length), top[1] + dy * (start + length))
    return np.array([
        [a[0] - nx * w0 / 2, a[1] - ny * w0 / 2],
        [a[0] + nx * w0 / 2, a[1] + ny * w0 / 2],
        [b[0] + nx * w1 / 2, b[1] + ny * w1 / 2],
        [b[0] - nx * w1 / 2, b[1] - ny * w1 / 2],
    ])


def _figure_parts(arm_angle: float, leg_angle: float) -> List[Tuple[str, Polygon]]:
    """描画順（奥から手前）の (部位名, 図形座標の多角形)"""
    parts: List[Tuple[str, Polygon]] = [
        ("torso", _rect(-0.14, -0.26, 0.14, 0.06)),
        ("pants", _rect(-0.14, 0.04, 0.14, 0.13)),
        ("belt", _rect(-0.14, 0.02, 0.14, 0.06)),
    ]
    for side, sign in (("l", -1.0), ("r", 1.0)):
        leg_top = (sign * 0.07, 0.10)
        parts += [
            (f"{side}-leg", _segment(leg_top, sign * leg_angle, 0.0, 0.30, 0.12, 0.09)),
            (f"{side}-sock", _segment(leg_top, sign * leg_angle, 0.30, 0.05, 0.09, 0.09)),
            (f"{side}-shoe", _segment(leg_top, sign * leg_angle, 0.35, 0.07, 0.13, 0.13)),
        ]
    for side, sign in (("l", -1.0), ("r", 1.0)):
        shoulder = (sign * 0.185, -0.24)
        arm = sign * arm_angle
        parts += [
            (f"{side}-arm", _segment(shoulder, arm, 0.0, 0.30, 0.08, 0.065)),
            (f"{side}-glove", _segment(shoulder, arm, 0.30, 0.07, 0.075, 0.075)),
        ]
    parts += [
        ("scarf", _rect(-0.09, -0.29, 0.09, -0.22)),
        ("badge", _rect(0.02, -0.18, 0.10, -0.09)),
        ("head", _ellipse(0.0, -0.39, 0.09, 0.11)),
        ("hair", _ellipse(0.0, -0.45, 0.10, 0.06)),
        ("glasses", _rect(-0.08, -0.39, 0.08, -0.35)),
        ("hat", _rect(-0.12, -0.55, 0.12, -0.48)),
    ]
    return parts


def _place(parts: List[Tuple[str, Polygon]], hw: Tuple[int, int], rng: np.random.Generator) -> List[Tuple[str, Polygon]]:
    """図形座標 → 画素座標（倍率・回転・平行移動。フレームに収まるよう倍率を抑える）"""
    h, w = hw
    scale = rng.uniform(*SCALE_RANGE) * REFERENCE_HEIGHT * min(h, w)
    theta = math.radians(rng.uniform(-ROTATION_DEG, ROTATION_DEG))
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    rotated = [(name, poly @ rot.T) for name, poly in parts]
    points = np.concatenate([poly for _, poly in rotated])
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = (hi - lo) * scale
    fit = min(1.0, (w - 2) / extent[0], (h - 2) / extent[1])
    scale *= fit
    extent = (hi - lo) * scale
    offset_x = rng.uniform(1.0, max(1.0, w - 1 - extent[0]))
    offset_y = rng.uniform(1.0, max(1.0, h - 1 - extent[1]))
    origin = np.array([offset_x, offset_y]) - lo * scale
    return [(name, poly * scale + origin) for name, poly in rotated]


def synth_sample(seed: int, num_classes: int, hw: Tuple[int, int] = (64, 64)) -> SegSample:
    """
    シードから合成サンプルを生成する（(seed, num_classes, hw) の純関数）

    Args:
        seed: 乱数シード
        num_classes: クラス数 K（2〜20）。部位 1..K-1 が描かれる
        hw: 画像サイズ (H, W)

    Returns:
        SegSample: 画像とラベル

    Raises:
        SynthError: K が範囲外、または hw が 32x32 未満
    """
    if not 2 <= num_classes <= len(SYNTH_CLASS_NAMES):
        raise SynthError(f"num_classes は 2〜{len(SYNTH_CLASS_NAMES)} である必要があります: {num_classes}")
    h, w = int(hw[0]), int(hw[1])
    if h < MIN_HW or w < MIN_HW:
        raise SynthError(f"画像サイズ {h}x{w} は図形を置くには小さすぎます（{MIN_HW}x{MIN_HW} 以上）")

    rng = np.random.default_rng(seed)
    class_ids = {name: i for i, name in enumerate(SYNTH_CLASS_NAMES[:num_classes])}
    arm_angle = math.radians(rng.uniform(5.0, 35.0))
    leg_angle = math.radians(rng.uniform(0.0, 12.0))
    placed = _place(_figure_parts(arm_angle, leg_angle), (h, w), rng)

    labels = np.zeros((h, w), dtype=np.uint8)
    for name, poly in placed:
        class_id = class_ids.get(name)
        if class_id is None:
            continue
        pts = np.rint(poly * (1 << _SUBPIXEL_SHIFT)).astype(np.int32)
        cv2.fillPoly(labels, [pts], int(class_id), lineType=cv2.LINE_8, shift=_SUBPIXEL_SHIFT)

    base = np.asarray(LIP_PALETTE[:num_classes], dtype=np.float32) / 255.0
    colors = np.clip(base + rng.uniform(-COLOR_JITTER, COLOR_JITTER, base.shape), 0.0, 1.0)
    # 背景は縦方向のグラデーション
    top, bottom = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
    ramp = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None, None]
    background = np.broadcast_to(top + (bottom - top) * ramp, (h, w, 3))
    image = np.where(labels[..., None] == 0, background, colors[labels]).astype(np.float32)
    image += rng.normal(0.0, NOISE_STD, image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0)

    return SegSample.from_hwc(image, labels.astype(np.int64), IGNORE_VALUE, source=f"synth:{seed}")


class SynthDataset:
    """synth_sample を遅延生成するデータセット（サンプル i のシードは base_seed + i）"""

    def __init__(self, count: int, num_classes: int, hw: Tuple[int, int] = (64, 64), seed: int = 0):
        if count < 0:
            raise SynthError(f"count は0以上である必要があります: {count}")
        self.count = count
        self.num_classes = num_classes
        self.hw = tuple(hw)
        self.seed = seed
        self.class_table = synth_table(num_classes)

    def __len__(self) -> int:
        return self.count

    def sample_seed(self, index: int) -> int:
        return self.seed + index

    def __getitem__(self, index: int) -> SegSample:
        if not 0 <= index < self.count:
            raise IndexError(f"サンプル番号が範囲外です: {index}")
        return synth_sample(self.sample_seed(index), self.num_classes, self.hw)


def write_synth_dir(out_dir: Union[str, Path], count: int, num_classes: int,
                    hw: Tuple[int, int] = (64, 64), seed: int = 0,
                    val_fraction: float = 0.0) -> Dict[str, List[str]]:
    """
    合成データセットを LIP 形式のディレクトリとして書き出す

    Args:
        out_dir: 出力先（images/, labels/, splits/ を作る）
        count: サンプル数
        num_classes: クラス数
        hw: 画像サイズ
        seed: 先頭サンプルのシード
        val_fraction: 末尾から val に回す割合

    Returns:
        Dict[str, List[str]]: split → stem 一覧
    """
    out = Path(out_dir)
    dataset = SynthDataset(count, num_classes, hw, seed)
    n_val = int(round(count * val_fraction))
    splits: Dict[str, List[str]] = {"train": [], "val": []}
    for i in range(count):
        stem = f"synth_{i:05d}"
        sample = dataset[i]
        write_pnm(out / "images" / f"{stem}.ppm", sample.image)
        write_pnm(out / "labels" / f"{stem}.pgm", sample.labels)
        splits["val" if i >= count - n_val else "train"].append(stem)
    (out / "splits").mkdir(parents=True, exist_ok=True)
    for split, stems in splits.items():
        (out / "splits" / f"{split}.txt").write_text("".join(f"{s}\n" for s in stems), encoding="utf-8")
    logger.info("合成データセットを書き出しました",
                extra={"out_dir": str(out), "count": count, "num_classes": num_classes, "seed": seed})
    return splits


def class_census(seeds: range, num_classes: int, hw: Tuple[int, int] = (64, 64),
                 min_pixels: int = 1) -> Dict[int, float]:
    """各クラスが現れるサンプルの割合（生成器の動作確認用）"""
    counts = np.zeros(num_classes, dtype=np.int64)
    for seed in seeds:
        present = np.bincount(synth_sample(seed, num_classes, hw).labels.reshape(-1), minlength=num_classes)
        counts += present[:num_classes] >= min_pixels
    total = max(len(seeds), 1)
    return {k: float(counts[k]) / total for k in range(num_classes)}

