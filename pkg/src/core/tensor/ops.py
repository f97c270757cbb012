"""
微分可能なプリミティブ演算

conv2d / conv_transpose2d / batch_norm / relu / max_pool2d / global_avg_pool /
add / concat_channels / bilinear_resize / cross_entropy_2d ほか。
全演算は入力の dtype を保つ（実行時は float32、検証オラクルのみ float64）。
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from src.core.tensor.autograd import GeometryError, ShapeMismatchError, Tensor, record_op
from src.utils.logger import get_logger

logger = get_logger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NonFiniteError(ValueError):
    """NaN/Inf を検出"""


def check_finite(x: Tensor, where: str) -> None:
    """NaN/Inf が含まれていればエラーにする（検証パス用）"""
    if not np.all(np.isfinite(x.data)):
        bad = int(np.size(x.data) - np.count_nonzero(np.isfinite(x.data)))
        raise NonFiniteError(f"{where}: 非有限値が {bad} 個あります (shape={x.shape})")


def _require_rank4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"{what} は4次元 (N,C,H,W) である必要があります: shape={x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  mode="constant", constant_values=value)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) → (N,C,kh,kw,Ho,Wo) のパッチ配列"""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            cols[:, :, i, j] = xp[:, :, hs:hs + h_span:stride, ws:ws + w_span:stride]
    return cols


def _col2im(cols: np.ndarray, hp: int, wp: int, stride: int, dilation: int) -> np.ndarray:
    """_im2col の随伴（重なりは加算）"""
    n, c, kh, kw, ho, wo = cols.shape
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            xp[:, :, hs:hs + h_span:stride, ws:ws + w_span:stride] += cols[:, :, i, j]
    return xp


def _check_geometry(stride: int, padding: int, dilation: int = 1) -> None:
    if stride < 1:
        raise GeometryError(f"stride は1以上である必要があります: {stride}")
    if dilation < 1:
        raise GeometryError(f"dilation は1以上である必要があります: {dilation}")
    if padding < 0:
        raise GeometryError(f"padding は0以上である必要があります: {padding}")


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2次元（膨張）畳み込み

    Args:
        x: 入力 (N, Cin, H, W)
        w: 重み (Cout, Cin, kh, kw)
        b: バイアス (Cout,)（省略可）
        stride: ストライド
        padding: ゼロパディング幅
        dilation: 膨張率

    Returns:
        出力 (N, Cout, Ho, Wo)
    """
    _require_rank4(x, "conv2d の入力")
    _require_rank4(w, "conv2d の重み")
    _check_geometry(stride, padding, dilation)
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ShapeMismatchError(f"conv2d: 入力チャネル {c} と重みの Cin {cin} が一致しません")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatchError(f"conv2d: バイアス形状 {b.shape} は ({cout},) である必要があります")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise GeometryError(
            f"conv2d: 出力サイズが0以下です (入力 {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}, dilation {dilation})"
        )

    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]

    hp, wp = xp.shape[2], xp.shape[3]

    def _backward(g: np.ndarray):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.tensordot(w.data, g, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
            gxp = _col2im(dcols, hp, wp, stride, dilation)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = [x, w] if b is None else [x, w, b]
    return record_op("conv2d", inputs, out, _backward)


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """転置畳み込み（conv2d の入力勾配と同じ線形写像）

    Args:
        x: 入力 (N, Cin, H, W)
        w: 重み (Cin, Cout, kh, kw)
        b: バイアス (Cout,)（省略可）
        stride: ストライド
        padding: 出力側から削るパディング幅
        output_padding: 出力の下端・右端に追加する行列数（stride 未満）

    Returns:
        出力 (N, Cout, (H-1)*stride - 2*padding + kh + output_padding, ...)
    """
    _require_rank4(x, "conv_transpose2d の入力")
    _require_rank4(w, "conv_transpose2d の重み")
    _check_geometry(stride, padding)
    if not 0 <= output_padding < stride:
        raise GeometryError(f"output_padding は 0 以上 stride 未満である必要があります: {output_padding}")
    n, c, h, wd = x.shape
    cin, cout, kh, kw = w.shape
    if c != cin:
        raise ShapeMismatchError(f"conv_transpose2d: 入力チャネル {c} と重みの Cin {cin} が一致しません")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatchError(f"conv_transpose2d: バイアス形状 {b.shape} は ({cout},) である必要があります")
    ho = conv_transpose_output_size(h, kh, stride, padding, output_padding)
    wo = conv_transpose_output_size(wd, kw, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise GeometryError(f"conv_transpose2d: 出力サイズが0以下です ({ho}x{wo})")

    hp, wp = ho + 2 * padding, wo + 2 * padding
    cols = np.tensordot(w.data, x.data, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
    full = _col2im(cols, hp, wp, stride, 1)
    out = np.ascontiguousarray(full[:, :, padding:padding + ho, padding:padding + wo])
    if b is not None:
        out += b.data[None, :, None, None]

    def _backward(g: np.ndarray):
        gx = gw = gb = None
        if x.requires_grad or w.requires_grad:
            gcols = _im2col(_pad(g, padding), kh, kw, stride, 1, h, wd)
            if x.requires_grad:
                gx = np.tensordot(w.data, gcols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
            if w.requires_grad:
                gw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 4, 5]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = [x, w] if b is None else [x, w, b]
    return record_op("conv_transpose2d", inputs, out, _backward)


@dataclass
class RunningStats:
    """BatchNorm の移動平均統計"""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: RunningStats,
    mode: str = "train",
) -> Tensor:
    """チャネル毎のバッチ正規化

    train モードではバッチ統計で正規化し移動平均を更新する。eval モードでは移動平均を使う。
    """
    _require_rank4(x, "batch_norm の入力")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatchError(
            f"batch_norm: gamma/beta 形状 {gamma.shape}/{beta.shape} はチャネル数 {channels} と一致する必要があります"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: 不明なモード {mode}")

    axes = (0, 2, 3)
    g4 = gamma.data[None, :, None, None]
    b4 = beta.data[None, :, None, None]

    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = g4 * xhat + b4

        unbiased = var * (count / (count - 1)) if count > 1 else var
        m = state.momentum
        state.mean = ((1.0 - m) * state.mean + m * mean).astype(state.mean.dtype)
        state.var = ((1.0 - m) * state.var + m * unbiased).astype(state.var.dtype)

        def _backward(g: np.ndarray):
            gx = None
            if x.requires_grad:
                dxhat = g * g4
                gx = (inv_std[None, :, None, None] / count) * (
                    count * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            return gx, ggamma, gbeta
    else:
        if not (np.all(np.isfinite(state.mean)) and np.all(np.isfinite(state.var))):
            raise NonFiniteError("batch_norm: eval モードの移動平均統計が非有限です")
        inv_std = (1.0 / np.sqrt(state.var + state.eps)).astype(x.dtype)
        xhat = (x.data - state.mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
        out = g4 * xhat + b4

        def _backward(g: np.ndarray):
            gx = g * g4 * inv_std[None, :, None, None] if x.requires_grad else None
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            return gx, ggamma, gbeta

    return record_op("batch_norm", [x, gamma, beta], out.astype(np.result_type(x.dtype, gamma.dtype), copy=False), _backward)


def relu(x: Tensor) -> Tensor:
    """ReLU（x = 0 での勾配は 0）"""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def _backward(g: np.ndarray):
        return (g * mask,)

    return record_op("relu", [x], out, _backward)


def max_pool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """最大値プーリング（同値は走査順で最初の位置へ勾配を流す）"""
    _require_rank4(x, "max_pool2d の入力")
    _check_geometry(stride, padding)
    if k < 1 or padding > k // 2:
        raise GeometryError(f"max_pool2d: padding {padding} はカーネル {k} の半分以下である必要があります")
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise GeometryError(f"max_pool2d: 出力サイズが0以下です (入力 {h}x{w}, k={k}, stride={stride})")

    xp = _pad(x.data, padding, value=-np.inf)
    cols = _im2col(xp, k, k, stride, 1, ho, wo).reshape(n, c, k * k, ho, wo)
    arg = np.argmax(cols, axis=2)
    out = np.take_along_axis(cols, arg[:, :, None], axis=2)[:, :, 0]
    hp, wp = xp.shape[2], xp.shape[3]

    def _backward(g: np.ndarray):
        dcols = np.zeros((n, c, k * k, ho, wo), dtype=g.dtype)
        np.put_along_axis(dcols, arg[:, :, None], g[:, :, None], axis=2)
        gxp = _col2im(dcols.reshape(n, c, k, k, ho, wo), hp, wp, stride, 1)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return record_op("max_pool2d", [x], np.ascontiguousarray(out), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """空間方向の平均 → (N, C, 1, 1)"""
    _require_rank4(x, "global_avg_pool の入力")
    h, w = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _backward(g: np.ndarray):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return record_op("global_avg_pool", [x], out, _backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"add: 形状が一致しません {x.shape} vs {y.shape}")

    def _backward(g: np.ndarray):
        return g, g

    return record_op("add", [x, y], x.data + y.data, _backward)


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"mul: 形状が一致しません {x.shape} vs {y.shape}")

    def _backward(g: np.ndarray):
        return g * y.data, g * x.data

    return record_op("mul", [x, y], x.data * y.data, _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = (x.data * factor).astype(x.dtype, copy=False)

    def _backward(g: np.ndarray):
        return (g * factor,)

    return record_op("scale", [x], out, _backward)


def tensor_sum(x: Tensor) -> Tensor:
    """全要素の和（スカラー）"""

    def _backward(g: np.ndarray):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return record_op("sum", [x], np.asarray(x.data.sum(), dtype=x.dtype), _backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """チャネル方向の連結"""
    if not tensors:
        raise ShapeMismatchError("concat_channels: 入力が空です")
    for t in tensors:
        _require_rank4(t, "concat_channels の入力")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeMismatchError(
                f"concat_channels: N,H,W が一致しません {tensors[0].shape} vs {t.shape}"
            )
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def _backward(g: np.ndarray):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return record_op("concat_channels", list(tensors), out, _backward)


def _interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """align_corners=False の1次元補間行列 (out, in)"""
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    ratio = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        matrix[i, i0] += 1.0 - lam
        matrix[i, i1] += lam
    return matrix


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """双線形補間（align_corners=False、端はクランプ）"""
    _require_rank4(x, "bilinear_resize の入力")
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"bilinear_resize: 出力サイズが不正です ({out_h}x{out_w})")
    h, w = x.shape[2], x.shape[3]

    if (h, w) == (out_h, out_w):
        def _identity_backward(g: np.ndarray):
            return (g,)

        return record_op("bilinear_resize", [x], x.data.copy(), _identity_backward)

    ah = _interp_matrix(h, out_h).astype(x.dtype)
    aw = _interp_matrix(w, out_w).astype(x.dtype)
    tmp = np.tensordot(x.data, aw, axes=([3], [1]))
    out = np.ascontiguousarray(np.tensordot(ah, tmp, axes=([1], [2])).transpose(1, 2, 0, 3))

    def _backward(g: np.ndarray):
        t = np.tensordot(g, aw, axes=([3], [0]))
        return (np.tensordot(ah, t, axes=([0], [2])).transpose(1, 2, 0, 3),)

    return record_op("bilinear_resize", [x], out, _backward)


def cross_entropy_2d(logits: Tensor, labels: np.ndarray, ignore_value: int = 255) -> Tensor:
    """画素毎の交差エントロピー（ignore_value の画素は除外して平均）

    Args:
        logits: (N, K, H, W)
        labels: 整数ラベル (N, H, W)
        ignore_value: 無視ラベル値

    Returns:
        スカラー損失。全画素が無視された場合は 0（勾配も 0）
    """
    _require_rank4(logits, "cross_entropy_2d のロジット")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeMismatchError(f"cross_entropy_2d: ラベル形状 {labels.shape} は {(n, h, w)} である必要があります")
    valid = labels != ignore_value
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"cross_entropy_2d: ラベルは [0,{k}) か ignore_value={ignore_value} である必要があります")

    count = int(valid.sum())
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    safe = np.where(valid, labels, 0).astype(np.int64)

    if count == 0:
        logger.warning("cross_entropy_2d: 全画素が ignore_value のため損失を 0 とします",
                       extra={"ignore_value": int(ignore_value)})

        def _zero_backward(g: np.ndarray):
            return (np.zeros_like(z),)

        return record_op("cross_entropy_2d", [logits], np.asarray(0.0, dtype=z.dtype), _zero_backward)

    log_prob = shifted - np.log(denom)
    picked = np.take_along_axis(log_prob, safe[:, None], axis=1)[:, 0]
    loss = np.asarray(-(picked * valid).sum() / count, dtype=z.dtype)

    def _backward(g: np.ndarray):
        grad = exp / denom
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None].astype(z.dtype) * (g / count)
        return (grad.astype(z.dtype, copy=False),)

    return record_op("cross_entropy_2d", [logits], loss, _backward)
