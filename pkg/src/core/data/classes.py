"""
クラス表（LIP の20クラス、左右反転時のクラス入れ替え、描画用パレット）
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

LIP_CLASS_NAMES = (
    "bkg", "hat", "hair", "glove", "glasses", "u-clo", "dress", "coat", "sockets", "pants",
    "jsuits", "scarf", "skirt", "face", "l-arm", "r-arm", "l-leg", "r-leg", "l-shoe", "r-shoe",
)
LIP_FLIP_PAIRS = ((14, 15), (16, 17), (18, 19))

# 描画用の固定パレット（LIP 可視化で一般的な配色）
LIP_PALETTE = (
    (0, 0, 0), (128, 0, 0), (255, 0, 0), (0, 85, 0), (170, 0, 51),
    (255, 85, 0), (0, 0, 85), (0, 119, 221), (85, 85, 0), (0, 85, 85),
    (85, 51, 0), (52, 86, 128), (0, 128, 0), (0, 0, 255), (51, 170, 221),
    (0, 255, 255), (85, 255, 170), (170, 255, 85), (255, 255, 0), (255, 170, 0),
)


@dataclass(frozen=True)
class ClassTable:
    """クラス名・反転ペア・パレット"""

    names: Tuple[str, ...] = LIP_CLASS_NAMES
    flip_pairs: Tuple[Tuple[int, int], ...] = LIP_FLIP_PAIRS
    palette: Tuple[Tuple[int, int, int], ...] = field(default=LIP_PALETTE)

    def __post_init__(self):
        k = len(self.names)
        if len(self.palette) < k:
            raise ValueError(f"パレットの色数 {len(self.palette)} がクラス数 {k} より少ないです")
        seen = set()
        for a, b in self.flip_pairs:
            if not (0 <= a < k and 0 <= b < k) or a == b:
                raise ValueError(f"反転ペア ({a},{b}) が不正です（クラス数 {k}）")
            if a in seen or b in seen:
                raise ValueError(f"反転ペアが重複しています: ({a},{b})")
            seen.update((a, b))

    @classmethod
    def lip(cls, num_classes: int = 20) -> "ClassTable":
        """LIP 表の先頭 num_classes クラス（範囲外の反転ペアは除く）"""
        if not 2 <= num_classes <= len(LIP_CLASS_NAMES):
            raise ValueError(f"num_classes は 2〜{len(LIP_CLASS_NAMES)} である必要があります: {num_classes}")
        pairs = tuple((a, b) for a, b in LIP_FLIP_PAIRS if a < num_classes and b < num_classes)
        return cls(LIP_CLASS_NAMES[:num_classes], pairs, LIP_PALETTE[:num_classes])

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def swap_lut(self, ignore_value: int = 255) -> np.ndarray:
        """ラベル値 → 反転後ラベル値の変換表（長さ 256）"""
        lut = np.arange(256, dtype=np.int64)
        for a, b in self.flip_pairs:
            lut[a], lut[b] = b, a
        lut[ignore_value] = ignore_value
        return lut

    def swap_channels(self) -> List[int]:
        """ロジットのチャネル並べ替え順（反転ペアを入れ替える）"""
        order = list(range(self.num_classes))
        for a, b in self.flip_pairs:
            order[a], order[b] = b, a
        return order

    def render(self, labels: np.ndarray) -> np.ndarray:
        """ラベルマップを (1,3,H,W) の [0,1] 画像に塗る（クラス外の値と ignore は白）"""
        colors = np.full((256, 3), 255, dtype=np.uint8)
        colors[:self.num_classes] = np.asarray(self.palette[:self.num_classes], dtype=np.uint8)
        rgb = colors[np.asarray(labels, dtype=np.int64)]
        return (rgb.transpose(2, 0, 1)[None].astype(np.float32) / 255.0).astype(np.float32)



# 合成データの部位（面積の大きい順。K<20 では先頭 K-1 部位だけが描かれる）
SYNTH_CLASS_NAMES = (
    "bkg", "torso", "head", "l-arm", "r-arm", "l-leg", "r-leg", "hair", "pants", "l-shoe",
    "r-shoe", "hat", "scarf", "l-glove", "r-glove", "belt", "glasses", "l-sock", "r-sock", "badge",
)
SYNTH_FLIP_PAIRS = ((3, 4), (5, 6), (9, 10), (13, 14), (17, 18))


def synth_table(num_classes: int) -> ClassTable:
    """合成データ用のクラス表（先頭 num_classes クラス）"""
    if not 2 <= num_classes <= len(SYNTH_CLASS_NAMES):
        raise ValueError(f"num_classes は 2〜{len(SYNTH_CLASS_NAMES)} である必要があります: {num_classes}")
    pairs = tuple((a, b) for a, b in SYNTH_FLIP_PAIRS if a < num_classes and b < num_classes)
    return ClassTable(SYNTH_CLASS_NAMES[:num_classes], pairs, LIP_PALETTE[:num_classes])
