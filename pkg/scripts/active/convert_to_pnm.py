#!/usr/bin/env python3
"""
LIP 形式（JPEG 画像 + PNG ラベル）を parsegrid の netpbm ディレクトリに変換する

出力: <out>/images/<stem>.ppm, <out>/labels/<stem>.pgm, <out>/splits/<split>.txt

例:
    python scripts/active/convert_to_pnm.py \
        --images LIP/TrainVal_images/train_images \
        --labels LIP/TrainVal_parsing_annotations/train_segmentations \
        --out data/lip_pnm --split train --limit 500
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

# パスの設定
sys.path.append(str(Path(__file__).parent.parent.parent))

from src.core.data.pnm import write_pnm
from src.utils.logger import get_logger

logger = get_logger("convert_to_pnm")

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


def convert_pair(image_path: Path, label_path: Path, out: Path) -> None:
    with Image.open(image_path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    with Image.open(label_path) as lab:
        # パレット画像はインデックスをそのままラベル値として使う
        labels = np.asarray(lab if lab.mode in ("L", "P") else lab.convert("L"), dtype=np.int64)
    if rgb.shape[:2] != labels.shape:
        raise ValueError(f"画像とラベルのサイズが一致しません: {image_path.name}")
    write_pnm(out / "images" / f"{image_path.stem}.ppm", rgb.transpose(2, 0, 1)[None])
    write_pnm(out / "labels" / f"{image_path.stem}.pgm", labels)


def convert(images: Path, labels: Path, out: Path, split: str, limit: Optional[int] = None) -> List[str]:
    """
    画像ディレクトリとラベルディレクトリの共通 stem を変換し、split ファイルに追記する

    Returns:
        List[str]: 変換した stem
    """
    stems = []
    skipped = 0
    for image_path in sorted(p for p in images.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        label_path = labels / f"{image_path.stem}.png"
        if not label_path.exists():
            skipped += 1
            continue
        convert_pair(image_path, label_path, out)
        stems.append(image_path.stem)
        if limit and len(stems) >= limit:
            break
    (out / "splits").mkdir(parents=True, exist_ok=True)
    with open(out / "splits" / f"{split}.txt", "a", encoding="utf-8") as f:
        f.writelines(f"{s}\n" for s in stems)
    logger.info("変換完了", extra={"split": split, "converted": len(stems), "skipped": skipped, "out": str(out)})
    return stems


def main():
    """メイン関数"""
    parser = argparse.ArgumentParser(description="LIP JPEG/PNG → netpbm 変換")
    parser.add_argument("--images", type=Path, required=True, help="画像ディレクトリ（.jpg/.png）")
    parser.add_argument("--labels", type=Path, required=True, help="ラベルディレクトリ（.png）")
    parser.add_argument("--out", type=Path, required=True, help="出力ディレクトリ")
    parser.add_argument("--split", choices=["train", "val"], default="train", help="追記する split")
    parser.add_argument("--limit", type=int, default=None, help="変換する最大枚数")
    args = parser.parse_args()

    try:
        convert(args.images, args.labels, args.out, args.split, args.limit)
    except Exception as e:
        logger.error(f"変換エラー: {str(e)}")
        sys.exit(2)


if __name__ == "__main__":
    main()
