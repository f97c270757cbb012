"""
C-DLinkNet 本体

エンコーダ（ResNet 形状、E5 は膨張率2で出力ストライド16）→ 中央ブロック（ASPP または直列膨張畳み込み）
→ LinkNet デコーダ（D5〜D2）→ Smooth モジュール / Refiner ヘッド、および D5〜D2 の補助ヘッド。
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.core.model.config import ModelConfig, ModelConfigError
from src.core.model.layers import (
    ASPP,
    AuxHead,
    Bottleneck,
    ConvBNReLU,
    DecoderBlock,
    DilatedCenterBlock,
    ParamRegistry,
    RunMode,
    SmoothModule,
)
from src.core.tensor import ops
from src.core.tensor.autograd import GeometryError, ShapeMismatchError, Tensor
from src.utils.logger import get_logger

logger = get_logger(__name__)

ENCODER_STAGES = ("E2", "E3", "E4", "E5")
DECODER_STAGES = ("D5", "D4", "D3", "D2")
OUTPUT_STRIDE = 16


@dataclass
class ModelOutputs:
    """Refiner の出力と補助ヘッド（D5→D2 の順）の出力"""

    main_logits: Tensor
    aux_logits: List[Tensor] = field(default_factory=list)


class CDLinkNet:
    """C-DLinkNet モデル（パラメータは registry に階層名で登録される）"""

    def __init__(self, config: ModelConfig, seed: int = 0, materialize: bool = True):
        """
        Args:
            config: モデル構成（生成前に検証する）
            seed: 初期化シード
            materialize: False なら形状のみを登録し配列を確保しない
        """
        self.config = config.validate()
        self.seed = seed
        self.registry = ParamRegistry(materialize=materialize)
        self.mode = RunMode(training=True)
        rng = np.random.default_rng(seed)
        reg, mode = self.registry, self.mode
        b = config.base_width

        self.stem = ConvBNReLU(reg, "encoder.stem", 3, config.stem_width, 7, mode, rng, stride=2, padding=3)
        self.stages: Dict[str, List[Bottleneck]] = {}
        cin = config.stem_width
        geometry = {"E2": (1, 1), "E3": (2, 1), "E4": (2, 1), "E5": (1, 2)}
        for stage, cout, blocks in zip(ENCODER_STAGES, config.stage_widths, config.encoder_blocks):
            stride, dilation = geometry[stage]
            stage_blocks = []
            for i in range(blocks):
                stage_blocks.append(Bottleneck(reg, f"encoder.{stage}.block{i}", cin, cout,
                                               stride if i == 0 else 1, dilation, mode, rng))
                cin = cout
            self.stages[stage] = stage_blocks

        self.aspp: Optional[ASPP] = None
        self.dblock: Optional[DilatedCenterBlock] = None
        if config.use_aspp:
            self.aspp = ASPP(reg, "center.aspp", b, config.aspp_dilations, config.aspp_pool_branch, mode, rng)
        else:
            self.dblock = DilatedCenterBlock(reg, "center.dblock", b, mode, rng)

        widths = self.decoder_widths
        self.decoder = {
            "D5": DecoderBlock(reg, "decoder.D5", b, widths["D5"], False, mode, rng),
            "D4": DecoderBlock(reg, "decoder.D4", widths["D5"], widths["D4"], True, mode, rng),
            "D3": DecoderBlock(reg, "decoder.D3", widths["D4"], widths["D3"], True, mode, rng),
            "D2": DecoderBlock(reg, "decoder.D2", widths["D3"], widths["D2"], False, mode, rng),
        }

        k = config.num_classes
        self.smooth: Optional[SmoothModule] = None
        self.refiner: Optional[AuxHead] = None
        if config.use_smooth:
            self.smooth = SmoothModule(reg, "smooth", widths, {"D5": 2, "D4": 1, "D3": 0},
                                       config.blend_width, k, mode, rng)
        else:
            self.refiner = AuxHead(reg, "refiner", widths["D2"], k, mode, rng)

        self.aux_heads: Dict[str, AuxHead] = {}
        if config.use_multiscale_loss:
            for stage in DECODER_STAGES:
                self.aux_heads[stage] = AuxHead(reg, f"aux.{stage}", widths[stage], k, mode, rng)

        logger.info(
            "モデルを構築しました",
            extra={
                "base_width": b,
                "num_classes": k,
                "switches": self.variant_name,
                "params": self.param_count(),
                "materialized": materialize,
            },
        )

    @property
    def decoder_widths(self) -> Dict[str, int]:
        e2, e3, e4, _ = self.config.stage_widths
        return {"D5": e4, "D4": e3, "D3": e2, "D2": self.config.base_width // 8}

    @property
    def variant_name(self) -> str:
        """アブレーション表記（B, B+A, B+A+S, B+A+S+L など）"""
        parts = ["B"]
        if self.config.use_aspp:
            parts.append("A")
        if self.config.use_smooth:
            parts.append("S")
        if self.config.use_multiscale_loss:
            parts.append("L")
        return "+".join(parts)

    def train(self) -> "CDLinkNet":
        self.mode.training = True
        return self

    def eval(self) -> "CDLinkNet":
        self.mode.training = False
        return self

    @property
    def training(self) -> bool:
        return self.mode.training

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.registry.items())

    def param_count(self, prefix: str = "") -> int:
        return self.registry.param_count(prefix)

    def zero_grad(self) -> None:
        self.registry.zero_grad()

    def feature_shapes(self, h: int, w: int, batch: int = 1) -> Dict[str, Tuple[int, ...]]:
        """入力 (batch,3,h,w) に対する各段の出力形状（配列を確保せずに計算する）"""
        _check_spatial(h, w)
        c = self.config
        b = c.base_width
        widths = self.decoder_widths
        s4, s8, s16 = (h // 4, w // 4), (h // 8, w // 8), (h // 16, w // 16)
        shapes = {
            "E1": (batch, c.stem_width, h // 2, w // 2),
            "E2": (batch, c.stage_widths[0]) + s4,
            "E3": (batch, c.stage_widths[1]) + s8,
            "E4": (batch, c.stage_widths[2]) + s16,
            "E5": (batch, b) + s16,
            "center": (batch, b) + s16,
            "D5": (batch, widths["D5"]) + s16,
            "D4": (batch, widths["D4"]) + s8,
            "D3": (batch, widths["D3"]) + s4,
            "D2": (batch, widths["D2"]) + s4,
            "logits": (batch, c.num_classes, h, w),
        }
        if c.use_smooth:
            shapes["smooth.concat"] = (batch, 4 * widths["D2"]) + s4
            shapes["smooth.blend"] = (batch, c.blend_width) + s4
        return shapes

    def __call__(self, x: Tensor) -> ModelOutputs:
        return model_forward(self, x)


def build_model(config: ModelConfig, seed: int = 0) -> CDLinkNet:
    """構成を検証し、シード固定で初期化したモデルを返す"""
    return CDLinkNet(config, seed=seed)


def _check_spatial(h: int, w: int) -> None:
    if h < OUTPUT_STRIDE or w < OUTPUT_STRIDE or h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
        raise GeometryError(f"入力サイズ {h}x{w} は {OUTPUT_STRIDE} の倍数である必要があります")


def encoder_forward(model: CDLinkNet, x: Tensor) -> Dict[str, Tensor]:
    """E1〜E5 の特徴マップを返す"""
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatchError(f"入力は (N,3,H,W) である必要があります: shape={x.shape}")
    _check_spatial(x.shape[2], x.shape[3])
    e1 = model.stem(x)
    features = {"E1": e1}
    current = ops.max_pool2d(e1, 3, 2, 1)
    for stage in ENCODER_STAGES:
        for block in model.stages[stage]:
            current = block(current)
        features[stage] = current
    return features


def aspp_forward(model: CDLinkNet, f: Tensor) -> Tensor:
    if model.aspp is None:
        raise ModelConfigError(["use_aspp が無効なモデルでは ASPP を実行できません"])
    if f.shape[1] != model.config.base_width:
        raise ShapeMismatchError(f"ASPP の入力チャネル {f.shape[1]} は base_width {model.config.base_width} と一致する必要があります")
    return model.aspp(f)


def center_forward(model: CDLinkNet, f: Tensor) -> Tensor:
    """E5 に ASPP（A）またはベースラインの膨張畳み込みブロック（B）を適用する"""
    if model.aspp is not None:
        return aspp_forward(model, f)
    return model.dblock(f)


def _skip_sum(stage: str, decoded: Tensor, skip: Tensor) -> Tensor:
    if decoded.shape != skip.shape:
        raise ShapeMismatchError(f"{stage}: スキップ接続の形状が一致しません ({decoded.shape} vs {skip.shape})")
    return ops.add(decoded, skip)


def decoder_forward(model: CDLinkNet, center: Tensor, encoded: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """D5〜D2 を返す（D5〜D3 はエンコーダ特徴との和）"""
    d5 = _skip_sum("D5", model.decoder["D5"](center), encoded["E4"])
    d4 = _skip_sum("D4", model.decoder["D4"](d5), encoded["E3"])
    d3 = _skip_sum("D3", model.decoder["D3"](d4), encoded["E2"])
    d2 = model.decoder["D2"](d3)
    return {"D5": d5, "D4": d4, "D3": d3, "D2": d2}


def smooth_refine(model: CDLinkNet, decoded: Dict[str, Tensor], out_hw: Tuple[int, int]) -> Tensor:
    """Refiner の出力（Smooth 無効時は D2 のみに補助ヘッド構造を適用）"""
    if model.smooth is not None:
        return model.smooth(decoded, out_hw)
    return model.refiner(decoded["D2"], out_hw)


def model_forward(model: CDLinkNet, x: Tensor) -> ModelOutputs:
    out_hw = (x.shape[2], x.shape[3])
    encoded = encoder_forward(model, x)
    decoded = decoder_forward(model, center_forward(model, encoded["E5"]), encoded)
    main = smooth_refine(model, decoded, out_hw)
    aux = [model.aux_heads[stage](decoded[stage], out_hw) for stage in DECODER_STAGES if stage in model.aux_heads]
    return ModelOutputs(main_logits=main, aux_logits=aux)


def loss_components(outputs: ModelOutputs, labels: np.ndarray, ignore_value: int = 255) -> List[Tensor]:
    """Refiner 損失と各補助損失（この順）"""
    logits = [outputs.main_logits] + list(outputs.aux_logits)
    return [ops.cross_entropy_2d(item, labels, ignore_value) for item in logits]


def total_loss(
    outputs: ModelOutputs,
    labels: np.ndarray,
    ignore_value: int = 255,
    aux_loss_weight: float = 0.5,
) -> Tensor:
    """Refiner 損失 + aux_loss_weight × 補助損失の和"""
    components = loss_components(outputs, labels, ignore_value)
    total = components[0]
    if len(components) == 1:
        return total
    aux_sum = components[1]
    for item in components[2:]:
        aux_sum = ops.add(aux_sum, item)
    return ops.add(total, ops.scale(aux_sum, aux_loss_weight))
