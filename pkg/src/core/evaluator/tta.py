"""
左右反転によるテスト時拡張（ロジット平均）
"""

from typing import Callable, Optional, Sequence

import numpy as np

from src.core.model.network import CDLinkNet
from src.core.tensor.autograd import Tensor

LogitsFn = Callable[[Tensor], np.ndarray]


def swap_order(num_classes: int, flip_pairs: Sequence[Sequence[int]]) -> np.ndarray:
    order = np.arange(num_classes)
    for a, b in flip_pairs:
        order[a], order[b] = b, a
    return order


def flip_image(x: np.ndarray) -> np.ndarray:
    """幅方向の反転（連続配列で返す）"""
    return np.ascontiguousarray(x[..., ::-1])


def unflip_and_swap(logits: np.ndarray, order: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(logits[:, order, :, ::-1])


def main_logits_fn(model: CDLinkNet) -> LogitsFn:
    return lambda x: model(x).main_logits.data


def flip_tta(model: CDLinkNet, image: Tensor, flip_pairs: Sequence[Sequence[int]],
             logits_fn: Optional[LogitsFn] = None) -> Tensor:
    """
    0.5 * (logits(x) + unflip_and_swap(logits(flip(x)))) を返す

    Args:
        model: eval モードのモデル
        image: 正規化済み入力 (N,3,H,W)
        flip_pairs: 反転で入れ替えるクラスペア
        logits_fn: ロジット関数の差し替え（既定はモデルの Refiner 出力）

    Returns:
        Tensor: 平均ロジット (N,K,H,W)
    """
    if model.training:
        raise RuntimeError("flip_tta は eval モードのモデルで実行してください")
    logits_fn = logits_fn or main_logits_fn(model)
    plain = logits_fn(Tensor(np.ascontiguousarray(image.data), dtype=image.dtype))
    mirrored = logits_fn(Tensor(flip_image(image.data), dtype=image.dtype))
    order = swap_order(plain.shape[1], flip_pairs)
    return Tensor(0.5 * (plain + unflip_and_swap(mirrored, order)), dtype=plain.dtype)
