"""
有限差分による勾配検証

解析勾配（テープ逆伝播）と中心差分を float64 で比較する。
ReLU の折れ点・max_pool の同値など微分不能点の近傍では大きな誤差が報告されるため、
入力は折れ点から 10*eps 以上離して与えること。
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence

import numpy as np

from src.core.tensor import ops
from src.core.tensor.autograd import Tape, Tensor, backward
from src.core.tensor.ops import RunningStats
from src.utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_FLOOR = 1e-8


def _relative_error(analytic: float, central: float, floor: float) -> float:
    return abs(analytic - central) / max(abs(analytic), abs(central), floor)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    floor: float = DEFAULT_FLOOR,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    解析勾配と中心差分の最大相対誤差を返す

    Args:
        f: Tensor → スカラー Tensor の関数（座標ごとに2回評価される）
        x: 評価点
        eps: 差分幅
        floor: 相対誤差の分母の下限
        max_coords: 検査する座標数の上限（None なら全座標）
        seed: 座標サンプリングのシード

    Returns:
        float: max |analytic - central| / max(|analytic|, |central|, floor)
    """
    x64 = np.array(x.data, dtype=np.float64)
    leaf = Tensor(x64.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        out = f(leaf)
    backward(out, tape)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x64)

    flat = x64.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = f(Tensor(x64, dtype=np.float64)).item()
        flat[idx] = orig - eps
        f_minus = f(Tensor(x64, dtype=np.float64)).item()
        flat[idx] = orig
        central = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, _relative_error(float(analytic.reshape(-1)[idx]), central, floor))
    return worst


@contextmanager
def shadow_precision(tensors: Iterable[Tensor], stats: Iterable[RunningStats] = ()) -> Iterator[None]:
    """パラメータと BN 統計を一時的に float64 に切り替え、終了時に元の配列へ戻す"""
    tensors = list(tensors)
    stats = list(stats)
    saved = [(t.data, t.requires_grad) for t in tensors]
    saved_stats = [(s.mean, s.var) for s in stats]
    try:
        for t in tensors:
            t.data = t.data.astype(np.float64)
            t.grad = None
        for s in stats:
            s.mean = s.mean.astype(np.float64)
            s.var = s.var.astype(np.float64)
        yield
    finally:
        for t, (data, requires_grad) in zip(tensors, saved):
            t.data = data
            t.requires_grad = requires_grad
            t.grad = None
        for s, (mean, var) in zip(stats, saved_stats):
            s.mean = mean
            s.var = var


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    floor: float = 1e-6,
    coords_per_param: int = 3,
    seed: int = 0,
) -> Dict[str, float]:
    """
    パラメータ毎に解析勾配と中心差分を比較する

    Args:
        loss_fn: 現在のパラメータ値でスカラー損失を返す関数
        params: 名前 → パラメータ
        eps: 差分幅
        floor: 相対誤差の分母の下限
        coords_per_param: パラメータ毎に検査する座標数（0 以下なら全座標）
        seed: 座標サンプリングのシード

    Returns:
        Dict[str, float]: 名前 → 最大相対誤差
    """
    for t in params.values():
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1).copy()
        for name, t in params.items()
    }

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        if coords_per_param <= 0:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = loss_fn().item()
            flat[idx] = orig - eps
            f_minus = loss_fn().item()
            flat[idx] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, _relative_error(float(analytic[name][idx]), central, floor))
        errors[name] = worst
    return errors


@dataclass
class GradcheckResult:
    """勾配検証の1項目"""

    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tolerance


def _away_from_zero(rng: np.random.Generator, shape: Sequence[int], margin: float) -> np.ndarray:
    values = rng.standard_normal(shape)
    return np.where(values >= 0, values + margin, values - margin)


def run_op_suite(seed: int = 0, eps: float = 1e-6, tolerance: float = 1e-3) -> List[GradcheckResult]:
    """微分可能な全演算の勾配検証を実行する（float64）"""
    rng = np.random.default_rng(seed)

    def weighted(shape) -> Tensor:
        # 出力に乱数重みを掛けて和を取り、自明でない勾配にする
        return Tensor(rng.standard_normal(shape), dtype=np.float64)

    def const(shape) -> Tensor:
        return Tensor(rng.standard_normal(shape), dtype=np.float64)

    def scalarize(op: Callable[[Tensor], Tensor], out_shape) -> Callable[[Tensor], Tensor]:
        r = weighted(out_shape)
        return lambda t: ops.tensor_sum(ops.mul(op(t), r))

    results: List[GradcheckResult] = []

    def run(name: str, f: Callable[[Tensor], Tensor], x: np.ndarray) -> None:
        error = finite_diff_check(f, Tensor(x, dtype=np.float64), eps=eps)
        results.append(GradcheckResult(name, error, tolerance))
        logger.debug(f"gradcheck {name}: {error:.3e}")

    x = rng.standard_normal((1, 2, 7, 7))
    w = const((3, 2, 3, 3))
    b = const((3,))
    out_hw = ops.conv_output_size(7, 3, 2, 1, 2)
    run("conv2d.x", scalarize(lambda t: ops.conv2d(t, w, b, stride=2, padding=1, dilation=2), (1, 3, out_hw, out_hw)), x)
    xc = Tensor(x, dtype=np.float64)
    run("conv2d.w", scalarize(lambda t: ops.conv2d(xc, t, b, stride=2, padding=1, dilation=2), (1, 3, out_hw, out_hw)), w.data)
    run("conv2d.b", scalarize(lambda t: ops.conv2d(xc, w, t, stride=2, padding=1, dilation=2), (1, 3, out_hw, out_hw)), b.data)

    xt = rng.standard_normal((1, 3, 4, 4))
    wt = const((3, 2, 3, 3))
    run("conv_transpose2d.x",
        scalarize(lambda t: ops.conv_transpose2d(t, wt, stride=2, padding=1, output_padding=1), (1, 2, 8, 8)), xt)
    xtc = Tensor(xt, dtype=np.float64)
    run("conv_transpose2d.w",
        scalarize(lambda t: ops.conv_transpose2d(xtc, t, stride=2, padding=1, output_padding=1), (1, 2, 8, 8)), wt.data)

    xb = rng.standard_normal((4, 3, 5, 5))
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), dtype=np.float64)
    beta = const((3,))
    stats = RunningStats.fresh(3, dtype=np.float64)
    run("batch_norm.x", scalarize(lambda t: ops.batch_norm(t, gamma, beta, stats, "train"), xb.shape), xb)
    xbc = Tensor(xb, dtype=np.float64)
    run("batch_norm.gamma", scalarize(lambda t: ops.batch_norm(xbc, t, beta, stats, "train"), xb.shape), gamma.data)
    run("batch_norm.beta", scalarize(lambda t: ops.batch_norm(xbc, gamma, t, stats, "train"), xb.shape), beta.data)

    xr = _away_from_zero(rng, (1, 2, 4, 4), margin=10 * eps + 0.05)
    run("relu", scalarize(ops.relu, xr.shape), xr)

    xm = rng.standard_normal((1, 2, 6, 6))
    run("max_pool2d", scalarize(lambda t: ops.max_pool2d(t, 3, 2, 1), (1, 2, 3, 3)), xm)

    xg = rng.standard_normal((2, 3, 4, 5))
    run("global_avg_pool", scalarize(ops.global_avg_pool, (2, 3, 1, 1)), xg)

    other = const((1, 2, 4, 4))
    xa = rng.standard_normal((1, 2, 4, 4))
    run("add", scalarize(lambda t: ops.add(t, other), xa.shape), xa)

    extra = const((1, 3, 4, 4))
    run("concat_channels", scalarize(lambda t: ops.concat_channels([t, extra]), (1, 5, 4, 4)), xa)

    xi = rng.standard_normal((1, 2, 3, 5))
    run("bilinear_resize.up", scalarize(lambda t: ops.bilinear_resize(t, 7, 9), (1, 2, 7, 9)), xi)
    run("bilinear_resize.down", scalarize(lambda t: ops.bilinear_resize(t, 2, 3), (1, 2, 2, 3)), xi)

    logits = rng.standard_normal((1, 4, 3, 3))
    labels = rng.integers(0, 4, size=(1, 3, 3))
    labels[0, 0, 0] = 255
    labels[0, 2, 1] = 255
    run("cross_entropy_2d", lambda t: ops.cross_entropy_2d(t, labels, 255), logits)

    # 同じテンソルを2経路で使うダイヤモンド型グラフ
    def diamond(t: Tensor) -> Tensor:
        doubled = ops.scale(t, 2.0)
        return ops.tensor_sum(ops.add(doubled, ops.mul(doubled, t)))

    run("diamond", diamond, rng.standard_normal((1, 1, 3, 3)))
    return results
