"""
学習率スケジュールとモーメンタム SGD
"""

from typing import Dict, Mapping, Optional

import numpy as np

from src.core.model.layers import ParamRegistry
from src.utils.logger import get_logger

logger = get_logger(__name__)


def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    """
    Poly 学習率: base_lr * (1 - iteration/max_iter)^power

    Args:
        iteration: 現在の反復（0 始まり）
        max_iter: 総反復数（1以上）
        base_lr: 初期学習率
        power: 指数

    Returns:
        float: 学習率（iteration > max_iter は警告して 0）
    """
    if max_iter < 1:
        raise ValueError(f"max_iter は1以上である必要があります: {max_iter}")
    if iteration < 0:
        raise ValueError(f"iteration は0以上である必要があります: {iteration}")
    if iteration > max_iter:
        logger.warning("iteration が max_iter を超えたため学習率を 0 にします",
                       extra={"iteration": iteration, "max_iter": max_iter})
        return 0.0
    if iteration == max_iter:
        return 0.0
    return float(base_lr * (1.0 - iteration / max_iter) ** power)


class MomentumSGD:
    """v ← m·v + g + wd·p、p ← p − lr·v（BN の gamma/beta は weight decay 対象外）"""

    def __init__(self, registry: ParamRegistry, momentum: float = 0.9, weight_decay: float = 5e-4):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum は 0 以上 1 未満である必要があります: {momentum}")
        self.registry = registry
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, lr: float, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        """
        全パラメータを登録順に1ステップ更新する

        Args:
            lr: 学習率
            grads: 名前 → 勾配（None なら各パラメータの .grad）

        Raises:
            KeyError: 勾配がないパラメータ（名前を含む）
        """
        for name, param in self.registry.items():
            grad = grads.get(name) if grads is not None else param.grad
            if grad is None:
                raise KeyError(f"勾配がありません: {name}")
            update = grad.astype(param.data.dtype, copy=True)
            if self.weight_decay and self.registry.decays(name):
                update += self.weight_decay * param.data
            velocity = self.velocity.get(name)
            if velocity is not None:
                update += self.momentum * velocity
            self.velocity[name] = update
            param.data -= lr * update

    def state(self) -> Dict[str, np.ndarray]:
        return dict(self.velocity)

    def load_state(self, velocity: Mapping[str, np.ndarray]) -> None:
        unknown = set(velocity) - set(self.registry.names())
        if unknown:
            raise KeyError(f"未知のパラメータの速度があります: {sorted(unknown)}")
        self.velocity = {name: np.array(v, dtype=np.float32) for name, v in velocity.items()}


def sgd_step(registry: ParamRegistry, grads: Mapping[str, np.ndarray], lr: float, momentum: float = 0.9,
             weight_decay: float = 5e-4, velocity: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """状態を呼び出し側で持つ関数版（更新後の速度を返す）"""
    optimizer = MomentumSGD(registry, momentum, weight_decay)
    optimizer.velocity = dict(velocity or {})
    optimizer.step(lr, grads)
    return optimizer.state()
