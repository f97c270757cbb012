"""
モデル全体の勾配検証（デスクスケール: base_width 8, 入力 32x32）
"""

from typing import List, Optional, Tuple

import numpy as np

from src.core.model.config import ModelConfig
from src.core.model.network import CDLinkNet, model_forward, total_loss
from src.core.tensor.autograd import Tensor
from src.core.tensor.gradcheck import GradcheckResult, check_parameter_gradients, shadow_precision
from src.utils.logger import get_logger

logger = get_logger(__name__)

MODEL_TOLERANCE = 5e-3


def gradcheck_config() -> ModelConfig:
    return ModelConfig.toy(num_classes=4, base_width=8, input_hw=(32, 32))


def model_gradcheck(
    config: Optional[ModelConfig] = None,
    seed: int = 0,
    batch: int = 2,
    eps: float = 1e-6,
    tolerance: float = MODEL_TOLERANCE,
    coords_per_param: int = 2,
) -> List[GradcheckResult]:
    """
    登録済みの全パラメータについて Eq.2 の合成損失の勾配を中心差分と比較する

    Args:
        config: 検証するモデル構成（None なら base_width 8 / 32x32 / 全スイッチ有効）
        seed: 初期化・入力・ラベルのシード
        batch: バッチサイズ（BN の統計が退化しないよう2以上）
        eps: 差分幅
        tolerance: 許容相対誤差
        coords_per_param: パラメータ毎に検査する座標数（0 なら全座標を検査する）

    Returns:
        List[GradcheckResult]: パラメータ名ごとの結果（登録順）
    """
    config = config or gradcheck_config()
    model = CDLinkNet(config, seed=seed).train()
    rng = np.random.default_rng(seed + 1)
    h, w = config.input_hw
    x = Tensor(rng.standard_normal((batch, 3, h, w)), dtype=np.float64)
    labels = rng.integers(0, config.num_classes, size=(batch, h, w))
    labels[:, 0, :] = 255

    params = model.parameters()
    stats = model.registry.running_stats().values()
    with shadow_precision(params.values(), stats):

        def loss_fn() -> Tensor:
            return total_loss(model_forward(model, x), labels, 255, config.aux_loss_weight)

        errors = check_parameter_gradients(loss_fn, params, eps=eps, coords_per_param=coords_per_param, seed=seed)

    results = [GradcheckResult(name, errors[name], tolerance) for name in params]
    failed = [r.name for r in results if not r.passed]
    logger.info(
        "モデル勾配検証が完了しました",
        extra={"params": len(results), "failed": len(failed), "worst": max((r.error for r in results), default=0.0)},
    )
    return results


def worst_result(results: List[GradcheckResult]) -> Tuple[str, float]:
    worst = max(results, key=lambda r: r.error)
    return worst.name, worst.error
