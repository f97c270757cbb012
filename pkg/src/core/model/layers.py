"""
C-DLinkNet の構成レイヤー

ParamRegistry がすべての学習パラメータと BN 統計を階層名で保持し、
各レイヤーは生成時に自分のパラメータを登録する。
materialize=False のレジストリは形状のみを記録する（フルスケールの形状・パラメータ数の確認用）。
"""

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.core.model.config import ModelConfigError
from src.core.tensor import ops
from src.core.tensor.autograd import Tensor
from src.core.tensor.ops import RunningStats


class RunMode:
    """train / eval の切り替えフラグ（モデル内の全 BN で共有）"""

    def __init__(self, training: bool = True):
        self.training = training

    @property
    def bn_mode(self) -> str:
        return "train" if self.training else "eval"


class ParamRegistry:
    """階層名 → パラメータの順序付きレジストリ"""

    def __init__(self, materialize: bool = True):
        self.materialize = materialize
        self._params: Dict[str, Optional[Tensor]] = {}
        self._shapes: Dict[str, Tuple[int, ...]] = {}
        self._no_decay: set = set()
        self._stats: Dict[str, RunningStats] = {}

    def _claim(self, name: str) -> None:
        if name in self._shapes or name in self._stats:
            raise KeyError(f"パラメータ名が重複しています: {name}")

    def create(
        self,
        name: str,
        shape: Sequence[int],
        init: str,
        rng: np.random.Generator,
        fan_in: int = 1,
        no_decay: bool = False,
    ) -> Optional[Tensor]:
        """
        パラメータを初期化して登録する

        Args:
            name: 階層名（例: encoder.E3.block0.conv2.weight）
            shape: 形状
            init: 'he'（fan-in 正規分布）/ 'zeros' / 'ones'
            rng: 初期化用乱数
            fan_in: he 初期化の fan-in
            no_decay: weight decay 対象外（BN の gamma/beta）

        Returns:
            登録したテンソル（materialize=False の場合は None）
        """
        self._claim(name)
        shape = tuple(int(s) for s in shape)
        self._shapes[name] = shape
        if no_decay:
            self._no_decay.add(name)
        if not self.materialize:
            self._params[name] = None
            return None
        if init == "he":
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"不明な初期化方式: {init}")
        tensor = Tensor(data.astype(np.float32), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def create_stats(self, name: str, channels: int) -> Optional[RunningStats]:
        self._claim(name)
        if not self.materialize:
            return None
        stats = RunningStats.fresh(channels)
        self._stats[name] = stats
        return stats

    def __getitem__(self, name: str) -> Tensor:
        tensor = self._params[name]
        if tensor is None:
            raise RuntimeError(f"形状のみのレジストリです（データなし）: {name}")
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for name in self._params:
            yield name, self[name]

    def tensors(self) -> List[Tensor]:
        return [self[name] for name in self._params]

    def shape(self, name: str) -> Tuple[int, ...]:
        return self._shapes[name]

    def decays(self, name: str) -> bool:
        return name not in self._no_decay

    def running_stats(self) -> Dict[str, RunningStats]:
        return dict(self._stats)

    def param_count(self, prefix: str = "") -> int:
        return int(sum(int(np.prod(shape)) for name, shape in self._shapes.items() if name.startswith(prefix)))

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            if tensor is not None:
                tensor.grad = None


class Conv2dLayer:
    """畳み込み層（He 初期化、バイアスは任意）"""

    def __init__(self, registry: ParamRegistry, name: str, cin: int, cout: int, k: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0, dilation: int = 1,
                 bias: bool = False):
        self.name = name
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = registry.create(f"{name}.weight", (cout, cin, k, k), "he", rng, fan_in=cin * k * k)
        self.bias = registry.create(f"{name}.bias", (cout,), "zeros", rng) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d:
    def __init__(self, registry: ParamRegistry, name: str, channels: int, mode: RunMode,
                 rng: np.random.Generator):
        self.name = name
        self.mode = mode
        self.gamma = registry.create(f"{name}.gamma", (channels,), "ones", rng, no_decay=True)
        self.beta = registry.create(f"{name}.beta", (channels,), "zeros", rng, no_decay=True)
        self.stats = registry.create_stats(f"{name}.running", channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, self.mode.bn_mode)


class ConvBNReLU:
    """conv → BN →（ReLU）"""

    def __init__(self, registry: ParamRegistry, name: str, cin: int, cout: int, k: int,
                 mode: RunMode, rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dilation: int = 1, relu: bool = True):
        self.conv = Conv2dLayer(registry, name, cin, cout, k, rng, stride, padding, dilation)
        self.bn = BatchNorm2d(registry, f"{name}.bn", cout, mode, rng)
        self.relu = relu

    @property
    def cin(self) -> int:
        return self.conv.cin

    @property
    def cout(self) -> int:
        return self.conv.cout

    def __call__(self, x: Tensor) -> Tensor:
        out = self.bn(self.conv(x))
        return ops.relu(out) if self.relu else out


class ConvTransposeBNReLU:
    """3x3 stride 2 の転置畳み込み（出力はちょうど2倍）→ BN → ReLU"""

    def __init__(self, registry: ParamRegistry, name: str, cin: int, cout: int,
                 mode: RunMode, rng: np.random.Generator):
        self.name = name
        self.cin, self.cout = cin, cout
        self.weight = registry.create(f"{name}.weight", (cin, cout, 3, 3), "he", rng, fan_in=cin * 9)
        self.bn = BatchNorm2d(registry, f"{name}.bn", cout, mode, rng)

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.conv_transpose2d(x, self.weight, stride=2, padding=1, output_padding=1)
        return ops.relu(self.bn(out))


class Bottleneck:
    """ResNet ボトルネック（1x1 → 3x3 → 1x1 + ショートカット）"""

    def __init__(self, registry: ParamRegistry, name: str, cin: int, cout: int, stride: int,
                 dilation: int, mode: RunMode, rng: np.random.Generator):
        mid = max(1, cout // 4)
        self.conv1 = ConvBNReLU(registry, f"{name}.conv1", cin, mid, 1, mode, rng)
        self.conv2 = ConvBNReLU(registry, f"{name}.conv2", mid, mid, 3, mode, rng,
                                stride=stride, padding=dilation, dilation=dilation)
        self.conv3 = ConvBNReLU(registry, f"{name}.conv3", mid, cout, 1, mode, rng, relu=False)
        self.downsample = None
        if cin != cout or stride != 1:
            self.downsample = ConvBNReLU(registry, f"{name}.downsample", cin, cout, 1, mode, rng,
                                         stride=stride, relu=False)

    def __call__(self, x: Tensor) -> Tensor:
        out = self.conv3(self.conv2(self.conv1(x)))
        shortcut = self.downsample(x) if self.downsample is not None else x
        return ops.relu(ops.add(out, shortcut))


def decoder_mid_width(cin: int) -> int:
    """デコーダブロックの縮小幅（Cin/4、Cin<4 は1チャネル）"""
    if cin >= 4 and cin % 4 != 0:
        raise ModelConfigError([f"デコーダブロックの入力チャネル {cin} は4で割り切れる必要があります"])
    return cin // 4 if cin >= 4 else 1


class DecoderBlock:
    """LinkNet デコーダブロック: 1x1 縮小 →（転置畳み込み or 3x3）→ 1x1 射影"""

    def __init__(self, registry: ParamRegistry, name: str, cin: int, cout: int, upsample: bool,
                 mode: RunMode, rng: np.random.Generator):
        self.name = name
        self.upsample = upsample
        mid = decoder_mid_width(cin)
        self.reduce = ConvBNReLU(registry, f"{name}.reduce", cin, mid, 1, mode, rng)
        if upsample:
            self.middle = ConvTransposeBNReLU(registry, f"{name}.deconv", mid, mid, mode, rng)
        else:
            self.middle = ConvBNReLU(registry, f"{name}.conv", mid, mid, 3, mode, rng, padding=1)
        self.project = ConvBNReLU(registry, f"{name}.project", mid, cout, 1, mode, rng)

    @property
    def channel_trace(self) -> List[int]:
        return [self.reduce.cin, self.reduce.cout, self.middle.cout, self.project.cout]

    def __call__(self, x: Tensor) -> Tensor:
        return self.project(self.middle(self.reduce(x)))


class AuxHead:
    """2層の 3x3 畳み込み → 1x1 で K クラス → 正解サイズへ双線形補間"""

    def __init__(self, registry: ParamRegistry, name: str, cin: int, num_classes: int,
                 mode: RunMode, rng: np.random.Generator):
        self.conv1 = ConvBNReLU(registry, f"{name}.conv1", cin, cin, 3, mode, rng, padding=1)
        self.conv2 = ConvBNReLU(registry, f"{name}.conv2", cin, cin, 3, mode, rng, padding=1)
        self.classifier = Conv2dLayer(registry, f"{name}.classifier", cin, num_classes, 1, rng, bias=True)

    def logits_at_feature_size(self, d: Tensor) -> Tensor:
        return self.classifier(self.conv2(self.conv1(d)))

    def __call__(self, d: Tensor, out_hw: Tuple[int, int]) -> Tensor:
        return ops.bilinear_resize(self.logits_at_feature_size(d), out_hw[0], out_hw[1])


class ASPP:
    """縮小型 ASPP: Cb → Cb/2 → 各枝 Cb/8 → 連結 → Cb"""

    def __init__(self, registry: ParamRegistry, name: str, cb: int, dilations: Sequence[int],
                 pool_branch: bool, mode: RunMode, rng: np.random.Generator):
        if cb % 8 != 0:
            raise ModelConfigError([f"ASPP の入力チャネル {cb} は8で割り切れる必要があります"])
        half, branch = cb // 2, cb // 8
        self.cb = cb
        self.reduce = ConvBNReLU(registry, f"{name}.reduce", cb, half, 1, mode, rng)
        self.branches = [ConvBNReLU(registry, f"{name}.branch0", half, branch, 1, mode, rng)]
        for i, d in enumerate(dilations, start=1):
            self.branches.append(
                ConvBNReLU(registry, f"{name}.branch{i}", half, branch, 3, mode, rng, padding=d, dilation=d)
            )
        # 画像プーリング枝は 1x1 マップになるため BN を使わずバイアス付き畳み込みにする
        self.pool = Conv2dLayer(registry, f"{name}.pool", half, branch, 1, rng, bias=True) if pool_branch else None
        concat = branch * (len(self.branches) + (1 if pool_branch else 0))
        self.project = ConvBNReLU(registry, f"{name}.project", concat, cb, 1, mode, rng)

    def channel_trace(self) -> List[int]:
        """入力 → 縮小 → 枝 → 連結 → 出力 のチャネル数"""
        return [self.cb, self.reduce.cout, self.branches[0].cout, self.project.cin, self.project.cout]

    def __call__(self, f: Tensor) -> Tensor:
        h, w = f.shape[2], f.shape[3]
        reduced = self.reduce(f)
        outputs = [branch(reduced) for branch in self.branches]
        if self.pool is not None:
            pooled = ops.relu(self.pool(ops.global_avg_pool(reduced)))
            outputs.append(ops.bilinear_resize(pooled, h, w))
        return self.project(ops.concat_channels(outputs))


class DilatedCenterBlock:
    """ベースライン（B）の中央ブロック: 膨張率 1,2,4 の直列 3x3 畳み込みと残差和

    ASPP より軽くなるよう Cb/8 幅で動かし、1x1 で縮小・復元する。
    """

    def __init__(self, registry: ParamRegistry, name: str, cb: int, mode: RunMode,
                 rng: np.random.Generator, dilations: Sequence[int] = (1, 2, 4)):
        width = max(1, cb // 8)
        self.reduce = ConvBNReLU(registry, f"{name}.reduce", cb, width, 1, mode, rng)
        self.dilated = [
            ConvBNReLU(registry, f"{name}.dilate{d}", width, width, 3, mode, rng, padding=d, dilation=d)
            for d in dilations
        ]
        self.expand = ConvBNReLU(registry, f"{name}.expand", width, cb, 1, mode, rng)

    def __call__(self, f: Tensor) -> Tensor:
        current = self.reduce(f)
        total = current
        for conv in self.dilated:
            current = conv(current)
            total = ops.add(total, current)
        return ops.add(f, self.expand(total))


class SmoothModule:
    """D5〜D3 をデコーダブロックで D2 の解像度・幅へ射影し、連結して 3x3 畳み込み2層でブレンドする"""

    def __init__(self, registry: ParamRegistry, name: str, widths: Dict[str, int],
                 upsample_steps: Dict[str, int], blend_width: int, num_classes: int,
                 mode: RunMode, rng: np.random.Generator):
        self.chains: Dict[str, List[DecoderBlock]] = {}
        for stage in ("D5", "D4", "D3"):
            chain = []
            channels = widths[stage]
            for step in range(upsample_steps[stage]):
                chain.append(DecoderBlock(registry, f"{name}.{stage}.up{step}", channels, channels // 2,
                                          True, mode, rng))
                channels //= 2
            if channels != widths["D2"]:
                raise ModelConfigError([f"Smooth の {stage} 射影後の幅 {channels} が D2 の幅 {widths['D2']} と一致しません"])
            self.chains[stage] = chain
        concat = 4 * widths["D2"]
        self.blend1 = ConvBNReLU(registry, f"{name}.blend1", concat, blend_width, 3, mode, rng, padding=1)
        self.blend2 = ConvBNReLU(registry, f"{name}.blend2", blend_width, blend_width, 3, mode, rng, padding=1)
        self.classifier = Conv2dLayer(registry, f"{name}.classifier", blend_width, num_classes, 1, rng, bias=True)

    def project(self, stage: str, d: Tensor) -> Tensor:
        for block in self.chains[stage]:
            d = block(d)
        return d

    def hyper_feature(self, decoded: Dict[str, Tensor]) -> Tensor:
        aligned = [self.project(stage, decoded[stage]) for stage in ("D5", "D4", "D3")]
        return ops.concat_channels(aligned + [decoded["D2"]])

    def __call__(self, decoded: Dict[str, Tensor], out_hw: Tuple[int, int]) -> Tensor:
        blended = self.blend2(self.blend1(self.hyper_feature(decoded)))
        return ops.bilinear_resize(self.classifier(blended), out_hw[0], out_hw[1])
