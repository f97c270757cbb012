"""
実行設定（RunConfig）の読み込み・上書き・検証・書き出し

設定ファイルは `section.key=value` の平文（# で始まる行はコメント）。
値の型は各セクションの既定値から決まる（タプルはカンマ区切り、真偽値は true/false）。
"""

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from src.core.data.augment import AugmentConfig
from src.core.model.config import ModelConfig
from src.core.trainer.trainer import TrainConfig
from src.utils.logger import get_logger

logger = get_logger(__name__)

ENV_FILE_VAR = "PARSEGRID_ENV_FILE"
# 環境変数 → 設定キー（設定ファイルより優先、コマンドライン指定よりは後）
ENV_KEYS = {
    "PARSEGRID_SEED": "train.seed",
    "PARSEGRID_WORKERS": "run.workers",
}
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


class ConfigError(ValueError):
    """設定ファイル・上書き指定の誤り（該当キーを列挙する）"""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("設定エラー: " + "; ".join(self.problems))


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    root: str = ""
    count: int = 200
    num_classes: int = 5
    seed: int = 0
    hw: Tuple[int, int] = (64, 64)
    val_fraction: float = 0.0
    ignore_value: int = 255


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str = ""
    tta: bool = False
    render: bool = False
    split: str = "val"


@dataclass(frozen=True)
class InferConfig:
    checkpoint: str = ""
    out: str = ""


@dataclass(frozen=True)
class SynthConfig:
    count: int = 10
    k: int = 5
    out: str = "synth_data"
    seed: int = 0
    hw: Tuple[int, int] = (64, 64)
    val_fraction: float = 0.0


@dataclass(frozen=True)
class GradcheckConfig:
    scale: str = "all"
    eps: float = 1e-6
    # パラメータ毎の検査座標数（0 は全座標）
    coords: int = 2


@dataclass(frozen=True)
class RunSection:
    workers: int = 1


SECTIONS: Dict[str, type] = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "augment": AugmentConfig,
    "output": OutputConfig,
    "eval": EvalConfig,
    "infer": InferConfig,
    "synth": SynthConfig,
    "gradcheck": GradcheckConfig,
    "run": RunSection,
}
# 他の設定から導出するため設定ファイルでは受け付けないキー
DERIVED_KEYS = {"augment.crop_hw"}


@dataclass(frozen=True)
class RunConfig:
    """全セクションをまとめた実行設定"""

    model: ModelConfig = field(default_factory=ModelConfig.toy)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    run: RunSection = field(default_factory=RunSection)

    def augment_config(self) -> AugmentConfig:
        """切り出しサイズをモデル入力に合わせた拡張設定"""
        return replace(self.augment, crop_hw=tuple(self.model.input_hw))

    def items(self) -> List[Tuple[str, Any]]:
        """(section.key, 値) を定義順に返す"""
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                key = f"{section}.{f.name}"
                if key not in DERIVED_KEYS:
                    out.append((key, getattr(obj, f.name)))
        return out

    def dump(self) -> str:
        lines = ["# parsegrid effective config"]
        current = None
        for key, value in self.items():
            section = key.split(".", 1)[0]
            if section != current:
                lines.append(f"\n# [{section}]")
                current = section
            lines.append(f"{key}={format_value(value)}")
        return "\n".join(lines) + "\n"

    def write(self, path: os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")
        return path

    def validate(self, command: Optional[str] = None) -> "RunConfig":
        """制約違反をすべて集めて ConfigError にする"""
        problems = [f"model: {p}" for p in self.model.violations()]
        problems += [f"train: {p}" for p in self.train.violations()]
        try:
            self.augment_config().validate()
        except ValueError as e:
            problems.append(f"augment: {e}")
        if self.data.source not in ("synth", "lip"):
            problems.append(f"data.source は synth か lip である必要があります: {self.data.source}")
        if not 0.0 <= self.data.val_fraction < 1.0:
            problems.append(f"data.val_fraction は 0 以上 1 未満である必要があります: {self.data.val_fraction}")
        if self.run.workers < 1:
            problems.append(f"run.workers は1以上である必要があります: {self.run.workers}")
        if self.gradcheck.scale not in ("ops", "model", "all"):
            problems.append(f"gradcheck.scale は ops / model / all のいずれかです: {self.gradcheck.scale}")
        if self.gradcheck.coords < 0:
            problems.append(f"gradcheck.coords は0以上である必要があります（0 は全座標）: {self.gradcheck.coords}")
        if self.data.source == "synth" and self.data.num_classes != self.model.num_classes:
            problems.append(f"data.num_classes ({self.data.num_classes}) と model.num_classes ({self.model.num_classes}) が一致しません")

        if command in ("train", "eval", "ablate") and self.data.source == "lip":
            if not self.data.root:
                problems.append("data.root: データセットのパスが指定されていません")
            elif not Path(self.data.root).is_dir():
                problems.append(f"data.root: ディレクトリがありません: {self.data.root}")
        if command == "eval" and not self.eval.checkpoint:
            problems.append("eval.checkpoint: チェックポイントが指定されていません")
        if command == "infer" and not self.infer.checkpoint:
            problems.append("infer.checkpoint: チェックポイントが指定されていません")
        if problems:
            raise ConfigError(problems)
        return self


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            element = type(default[0]) if default else int
            return tuple(_coerce(key, part, element()) for part in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError([f"{key}: 値 '{raw}' を {type(default).__name__} として解釈できません"])


def all_keys() -> Dict[str, Tuple[str, str]]:
    """section.key → (section, field)"""
    keys = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            key = f"{section}.{f.name}"
            if key not in DERIVED_KEYS:
                keys[key] = (section, f.name)
    return keys


def resolve_key(key: str, prefer_section: Optional[str] = None) -> str:
    """'epochs' のような省略キーを section.key に解決する（候補が一意か、優先セクションにある場合）"""
    known = all_keys()
    if key in known:
        return key
    if "." in key:
        raise ConfigError([f"{key}: 未知の設定キーです"])
    candidates = [k for k, (_, name) in known.items() if name == key]
    if len(candidates) == 1:
        return candidates[0]
    preferred = [c for c in candidates if c.split(".", 1)[0] == prefer_section]
    if len(preferred) == 1:
        return preferred[0]
    if not candidates:
        raise ConfigError([f"{key}: 未知の設定キーです"])
    raise ConfigError([f"{key}: 候補が複数あります（{', '.join(candidates)}）"])


def apply_values(config: RunConfig, values: Dict[str, str]) -> RunConfig:
    """section.key → 文字列値 を型変換して反映する"""
    known = all_keys()
    grouped: Dict[str, Dict[str, Any]] = {}
    problems = []
    for key, raw in values.items():
        if key not in known:
            problems.append(f"{key}: 未知の設定キーです")
            continue
        section, name = known[key]
        default = getattr(getattr(config, section), name)
        try:
            grouped.setdefault(section, {})[name] = _coerce(key, raw, default)
        except ConfigError as e:
            problems.extend(e.problems)
    if problems:
        raise ConfigError(problems)
    updates = {section: replace(getattr(config, section), **changes) for section, changes in grouped.items()}
    return replace(config, **updates)


def parse_config_text(text: str, source: str = "<text>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            problems.append(f"{source}:{lineno}: 'section.key=value' 形式ではありません")
            continue
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return values


def parse_override_args(args: Sequence[str], prefer_section: Optional[str] = None) -> Tuple[Dict[str, str], List[str]]:
    """
    `--key=value` / `--key value` / 真偽値キーの `--key` を上書き指定として取り出す

    Returns:
        (section.key → 値, 残りの位置引数)
    """
    known = all_keys()
    overrides: Dict[str, str] = {}
    positional: List[str] = []
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            positional.append(arg)
            i += 1
            continue
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            overrides[resolve_key(key.replace("-", "_"), prefer_section)] = value
            i += 1
            continue
        key = resolve_key(body.replace("-", "_"), prefer_section)
        section, name = known[key]
        if isinstance(getattr(SECTIONS[section](), name, None), bool):
            overrides[key] = "true"
            i += 1
            continue
        if i + 1 >= len(args):
            raise ConfigError([f"{key}: 値が指定されていません"])
        overrides[key] = args[i + 1]
        i += 2
    return overrides, positional


def load_env() -> None:
    """.env（PARSEGRID_ENV_FILE で変更可）を読み込む"""
    env_path = os.getenv(ENV_FILE_VAR, ".env")
    if os.path.exists(env_path):
        load_dotenv(env_path, override=False)


def load_run_config(
    path: Optional[os.PathLike] = None,
    overrides: Optional[Dict[str, str]] = None,
    base: Optional[RunConfig] = None,
) -> RunConfig:
    """
    設定ファイル → 環境変数（PARSEGRID_SEED / PARSEGRID_WORKERS） → 上書き指定 の順に反映する

    Args:
        path: 設定ファイル（None なら既定値から）
        overrides: section.key → 値
        base: 既定値の代わりに使う設定

    Returns:
        RunConfig: 反映済みの設定（検証は呼び出し側で validate する）
    """
    load_env()
    config = base or RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"設定ファイルがありません: {path}"])
        config = apply_values(config, parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    from_env = {key: os.getenv(var) for var, key in ENV_KEYS.items() if os.getenv(var)}
    if from_env:
        config = apply_values(config, from_env)
        logger.info("環境変数で設定を上書きしました", extra={"keys": sorted(from_env)})
    if overrides:
        config = apply_values(config, overrides)
    return config


def parse_run_config(text: str) -> RunConfig:
    """dump() の出力を読み戻す"""
    return apply_values(RunConfig(), parse_config_text(text))
