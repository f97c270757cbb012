"""
モデル構成（ModelConfig）

既定値はフルスケール（ResNet-101 形状、base_width 2048、入力 256x192）。
toy() はデスクスケールの既定値を返す。
"""

import zlib
from dataclasses import asdict, dataclass, replace
from typing import List, Tuple


class ModelConfigError(ValueError):
    """モデル構成の制約違反（違反項目をすべて列挙する）"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("モデル構成が不正です: " + "; ".join(self.violations))


# アーキテクチャ（パラメータ形状）を決める項目
ARCHITECTURE_FIELDS = (
    "num_classes",
    "base_width",
    "encoder_blocks",
    "aspp_dilations",
    "aspp_pool_branch",
    "use_aspp",
    "use_smooth",
    "use_multiscale_loss",
)


@dataclass(frozen=True)
class ModelConfig:
    """C-DLinkNet のハイパーパラメータ"""

    num_classes: int = 20
    base_width: int = 2048
    encoder_blocks: Tuple[int, int, int, int] = (3, 4, 23, 3)
    aspp_dilations: Tuple[int, ...] = (12, 24, 36)
    aspp_pool_branch: bool = False
    use_aspp: bool = True
    use_smooth: bool = True
    use_multiscale_loss: bool = True
    aux_loss_weight: float = 0.5
    input_hw: Tuple[int, int] = (256, 192)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """デスクスケールの構成（base_width 64, 各ステージ1ブロック, 入力 64x64）"""
        params = dict(num_classes=5, base_width=64, encoder_blocks=(1, 1, 1, 1), input_hw=(64, 64))
        params.update(overrides)
        return cls(**params)

    def with_switches(self, use_aspp: bool, use_smooth: bool, use_multiscale_loss: bool) -> "ModelConfig":
        return replace(self, use_aspp=use_aspp, use_smooth=use_smooth, use_multiscale_loss=use_multiscale_loss)

    def violations(self) -> List[str]:
        """制約違反の一覧を返す（空なら妥当）"""
        problems = []
        if self.num_classes < 2:
            problems.append(f"num_classes は2以上である必要があります: {self.num_classes}")
        if self.base_width < 8 or self.base_width % 8 != 0:
            problems.append(f"base_width は8の倍数である必要があります: {self.base_width}")
        if len(self.encoder_blocks) != 4 or any(b < 1 for b in self.encoder_blocks):
            problems.append(f"encoder_blocks は正の整数4つである必要があります: {list(self.encoder_blocks)}")
        if len(self.input_hw) != 2 or any(s < 16 or s % 16 != 0 for s in self.input_hw):
            problems.append(f"input_hw は16の倍数である必要があります: {list(self.input_hw)}")
        if self.use_aspp and not self.aspp_dilations:
            problems.append("use_aspp のとき aspp_dilations は空にできません")
        if any(d < 1 for d in self.aspp_dilations):
            problems.append(f"aspp_dilations は1以上である必要があります: {list(self.aspp_dilations)}")
        if self.aux_loss_weight < 0:
            problems.append(f"aux_loss_weight は0以上である必要があります: {self.aux_loss_weight}")
        return problems

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ModelConfigError(problems)
        return self

    def architecture_string(self) -> str:
        """アーキテクチャ項目の正規化シリアライズ"""
        values = asdict(self)
        parts = []
        for name in ARCHITECTURE_FIELDS:
            value = values[name]
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            parts.append(f"{name}={value}")
        return ";".join(parts)

    def fingerprint(self) -> int:
        """チェックポイント照合用の u32 フィンガープリント"""
        return zlib.crc32(self.architecture_string().encode("utf-8")) & 0xFFFFFFFF

    @property
    def stem_width(self) -> int:
        return max(self.base_width // 32, 4)

    @property
    def stage_widths(self) -> Tuple[int, int, int, int]:
        """E2〜E5 のチャネル数"""
        b = self.base_width
        return (b // 8, b // 4, b // 2, b)

    @property
    def blend_width(self) -> int:
        """Refiner のブレンド後チャネル数（フルスケールで512）"""
        return self.base_width // 4
