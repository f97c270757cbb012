"""
テンソル型と逆伝播テープ

Tensor は float32 の numpy 配列（特徴マップは NCHW）と勾配スロットを持つ。
微分可能な演算は、アクティブな Tape があり入力のいずれかが requires_grad のときだけ記録される。
アクティブな Tape はスレッド毎に管理する（ワーカースレッドの順伝播は呼び出し元のテープに記録されない）。
"""

import threading
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np


class ShapeMismatchError(ValueError):
    """テンソル形状の不一致"""


class GeometryError(ValueError):
    """畳み込み・プーリング等の幾何パラメータが不正"""


class Tensor:
    """勾配スロット付きの密テンソル"""

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._recorded = False

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """配列をコピー・型変換せずに包む（演算結果用）"""
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out._recorded = False
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._recorded

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"スカラーではありません: shape={self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TapeNode:
    """記録済み演算（入力・出力・逆伝播規則）"""

    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn):
        self.name = name
        self.inputs = list(inputs)
        self.output = output
        self.backward_fn = backward_fn


class _TapeStack(threading.local):
    def __init__(self):
        self.tapes: List["Tape"] = []


_local = _TapeStack()


class Tape:
    """演算の記録テープ（with 文でアクティブ化する）"""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> "Tape":
        _local.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        # 出力は記録と同時に生成されるため、入力は常に葉か既出ノードの出力になる
        node.output._recorded = True
        self.nodes.append(node)


def active_tape() -> Optional[Tape]:
    tapes = _local.tapes
    return tapes[-1] if tapes else None


def record_op(
    name: str,
    inputs: Sequence[Tensor],
    output_data: np.ndarray,
    backward_fn: BackwardFn,
) -> Tensor:
    """演算結果を Tensor にし、必要ならテープへ記録する

    Args:
        name: 演算名（エラーメッセージ用）
        inputs: 入力テンソル
        output_data: 順伝播の結果配列
        backward_fn: 出力勾配 → 各入力の勾配（不要な入力は None）

    Returns:
        出力テンソル
    """
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.wrap(output_data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(TapeNode(name, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """スカラー損失から逆伝播し、requires_grad の葉に勾配を加算する

    ノードは記録の逆順にちょうど一度ずつ処理され、分岐した勾配は合算される。
    """
    if loss.size != 1:
        raise ShapeMismatchError(f"損失はスカラーである必要があります: shape={loss.shape}")

    grads = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}
    leaves = {}

    for node in reversed(tape.nodes):
        grad_out = grads.pop(id(node.output), None)
        if grad_out is None:
            continue
        input_grads = node.backward_fn(grad_out)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
            if key not in produced:
                leaves[key] = tensor

    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss

    for key, tensor in leaves.items():
        grad = grads.get(key)
        if grad is None:
            continue
        grad = grad.astype(tensor.data.dtype, copy=False).reshape(tensor.shape)
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
