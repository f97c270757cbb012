"""
LIP 形式ディレクトリの索引と読み込み

root/
  images/<stem>.ppm   (P6)
  labels/<stem>.pgm   (P5)
  splits/train.txt, splits/val.txt   (1行1ステム)
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Set, Tuple, Union

import numpy as np

from src.core.data.classes import ClassTable
from src.core.data.pnm import read_pnm
from src.core.data.sample import IGNORE_VALUE, SegSample
from src.utils.logger import get_logger

logger = get_logger(__name__)

IMAGE_SUFFIX = ".ppm"
LABEL_SUFFIX = ".pgm"
SPLITS = ("train", "val")


class DatasetIndexError(ValueError):
    """対応ファイルの欠落・不正なラベル値"""

    def __init__(self, message: str, orphans: Iterable[str] = ()):
        self.orphans = sorted(orphans)
        detail = f": {', '.join(self.orphans)}" if self.orphans else ""
        super().__init__(f"{message}{detail}")


@dataclass(frozen=True)
class LipIndex:
    """split → (画像パス, ラベルパス) の一覧（構築後は不変）"""

    root: Path
    splits: Dict[str, List[Tuple[Path, Path]]] = field(default_factory=dict)

    def pairs(self, split: str) -> List[Tuple[Path, Path]]:
        return list(self.splits.get(split, []))

    def __len__(self) -> int:
        return sum(len(v) for v in self.splits.values())


def _stems(directory: Path, suffix: str) -> Set[str]:
    if not directory.is_dir():
        return set()
    return {p.stem for p in directory.iterdir() if p.suffix == suffix}


def load_lip_dir(root: Union[str, Path]) -> LipIndex:
    """
    データセットディレクトリを索引化する（画像は遅延読み込み）

    Args:
        root: データセットのルート

    Returns:
        LipIndex: split 毎の (画像, ラベル) 組

    Raises:
        DatasetIndexError: 対応ファイルのない画像・ラベル、または split に載っているのに存在しないステム
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetIndexError(f"データセットのディレクトリがありません: {root}")
    images = _stems(root / "images", IMAGE_SUFFIX)
    labels = _stems(root / "labels", LABEL_SUFFIX)
    if not images and not labels:
        logger.warning("データセットが空です", extra={"root": str(root)})
        return LipIndex(root, {})

    orphans = [f"images/{s}{IMAGE_SUFFIX}" for s in images - labels]
    orphans += [f"labels/{s}{LABEL_SUFFIX}" for s in labels - images]
    if orphans:
        raise DatasetIndexError("対応するファイルがありません", orphans)

    split_stems: Dict[str, List[str]] = {}
    for split in SPLITS:
        path = root / "splits" / f"{split}.txt"
        if path.is_file():
            split_stems[split] = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not split_stems:
        logger.warning("split ファイルがないため全サンプルを train とします", extra={"root": str(root)})
        split_stems["train"] = sorted(images)

    missing = [f"splits: {s}" for stems in split_stems.values() for s in stems if s not in images]
    if missing:
        raise DatasetIndexError("split に載っているサンプルがありません", missing)

    splits = {
        split: [(root / "images" / f"{s}{IMAGE_SUFFIX}", root / "labels" / f"{s}{LABEL_SUFFIX}") for s in stems]
        for split, stems in split_stems.items()
    }
    logger.info("データセットを索引化しました",
                extra={"root": str(root), "counts": {k: len(v) for k, v in splits.items()}})
    return LipIndex(root, splits)


class LipDataset:
    """LipIndex の1 split をサンプル列として読む"""

    def __init__(self, index: LipIndex, split: str, table: ClassTable, ignore_value: int = IGNORE_VALUE):
        self.index = index
        self.split = split
        self.class_table = table
        self.num_classes = table.num_classes
        self.ignore_value = ignore_value
        self._pairs = index.pairs(split)

    def __len__(self) -> int:
        return len(self._pairs)

    def __getitem__(self, i: int) -> SegSample:
        image_path, label_path = self._pairs[i]
        image = read_pnm(image_path)
        labels = read_pnm(label_path)
        if image.ndim != 4 or labels.ndim != 2:
            raise DatasetIndexError(f"画像は P6、ラベルは P5 である必要があります: {image_path.stem}")
        return SegSample(image, labels, self.ignore_value, source=image_path.stem)


def scan_label_values(index: LipIndex, split: str) -> List[int]:
    """split 内の全ラベルファイルに現れる値（昇順）"""
    values: Set[int] = set()
    for _, label_path in index.pairs(split):
        values.update(int(v) for v in np.unique(read_pnm(label_path)))
    return sorted(values)


def check_label_values(values: Iterable[int], num_classes: int, ignore_value: int = IGNORE_VALUE) -> None:
    """[0,K) と ignore_value 以外の値があれば DatasetIndexError"""
    bad = [v for v in values if not (0 <= v < num_classes) and v != ignore_value]
    if bad:
        raise DatasetIndexError(
            f"ラベル値がクラス数 {num_classes} の範囲外です", [str(v) for v in sorted(bad)]
        )
