"""
評価・推論

画像は下端・右端を16の倍数までパディング（正規化後の0 = 平均色）してから推論し、ロジットを元サイズに切り戻す。
予測は画素毎の argmax（同値は小さいクラス番号）。
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from src.core.data.classes import ClassTable
from src.core.data.pnm import read_pnm, write_pnm
from src.core.data.sample import IGNORE_VALUE, SegSample, normalize
from src.core.evaluator.metrics import ConfusionMatrix, SegMetrics, lr_confusion, metrics, small_class_miou
from src.core.evaluator.tta import LogitsFn, flip_tta
from src.core.model.network import OUTPUT_STRIDE, CDLinkNet
from src.core.tensor.autograd import Tensor
from src.scheduler.worker_pool import Worker_Pool
from src.utils.logger import get_logger

logger = get_logger(__name__)

Predictor = Callable[[SegSample], np.ndarray]


def pad_to_multiple(x: np.ndarray, multiple: int = OUTPUT_STRIDE) -> np.ndarray:
    """(N,C,H,W) を下端・右端に0埋めして H,W を multiple の倍数にする"""
    h, w = x.shape[2], x.shape[3]
    pad_h, pad_w = (-h) % multiple, (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))


def padded_logits_fn(model: CDLinkNet) -> LogitsFn:
    """入力を下端・右端にパディングして推論し、ロジットを入力サイズに切り戻す関数"""

    def run(x: Tensor) -> np.ndarray:
        h, w = x.shape[2], x.shape[3]
        logits = model(Tensor(pad_to_multiple(x.data), dtype=x.dtype)).main_logits.data
        return logits[:, :, :h, :w]

    return run


def predict_logits(model: CDLinkNet, image: np.ndarray, tta: bool = False,
                   flip_pairs: Sequence[Sequence[int]] = ()) -> np.ndarray:
    """[0,1] 画像 (N,3,H,W) → ロジット (N,K,H,W)"""
    x = normalize(image)
    logits_fn = padded_logits_fn(model)
    if tta:
        # 反転してからパディングするので、どちらの入力でもパディングは下端・右端になる
        return flip_tta(model, x, flip_pairs, logits_fn).data
    return logits_fn(x)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1)


def model_predictor(model: CDLinkNet, tta: bool = False, flip_pairs: Sequence[Sequence[int]] = ()) -> Predictor:
    def predict(sample: SegSample) -> np.ndarray:
        return argmax_labels(predict_logits(model, sample.image, tta, flip_pairs))[0]

    return predict


def _file_stem(sample: SegSample, index: int) -> str:
    if sample.source:
        return sample.source.replace(":", "_").replace("/", "_")
    return f"{index:05d}"


@dataclass
class EvalResult:
    metrics: SegMetrics
    confusion: ConfusionMatrix
    lr_confusion: Optional[float] = None
    small_class_miou: Optional[float] = None
    rendered: List[Path] = field(default_factory=list)

    def summary(self) -> dict:
        out = self.metrics.to_dict()
        out["lr_confusion"] = self.lr_confusion
        out["small_class_miou"] = self.small_class_miou
        return out


def evaluate(
    model: Optional[CDLinkNet],
    dataset,
    tta: bool = False,
    table: Optional[ClassTable] = None,
    render_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    predictor: Optional[Predictor] = None,
    ignore_value: int = IGNORE_VALUE,
) -> EvalResult:
    """
    データセット全体の混同行列と指標を計算する

    Args:
        model: 評価するモデル（eval モードに切り替える。predictor 指定時は None 可）
        dataset: len() と添字で SegSample を返すデータセット
        tta: 左右反転 TTA を使う
        table: クラス表（None なら dataset.class_table）
        render_dir: 指定時は予測を <stem>_pred.ppm として書き出す
        workers: シャード並列数（結果は並列数に依存しない）
        predictor: サンプル → ラベルマップ の差し替え（動作確認用）
        ignore_value: 無視ラベル値

    Returns:
        EvalResult: 指標・混同行列・左右取り違え率・小物体 mIoU
    """
    table = table or dataset.class_table
    k = table.num_classes
    if predictor is None:
        if model is None:
            raise ValueError("model か predictor のどちらかが必要です")
        model.eval()
        predictor = model_predictor(model, tta, table.flip_pairs)
    render_path = Path(render_dir) if render_dir else None
    if render_path:
        render_path.mkdir(parents=True, exist_ok=True)

    n = len(dataset)
    shard_count = max(1, min(workers, n))
    shards = [list(range(s, n, shard_count)) for s in range(shard_count)]

    def run_shard(indices: List[int]):
        cm = ConfusionMatrix(k)
        paths = []
        for i in indices:
            sample = dataset[i]
            pred = predictor(sample)
            cm.update(pred, sample.labels, ignore_value)
            if render_path:
                paths.append(write_pnm(render_path / f"{_file_stem(sample, i)}_pred.ppm", table.render(pred)))
        return cm, paths

    with Worker_Pool(shard_count) as pool:
        partial = pool.map(run_shard, shards)
    cm = ConfusionMatrix(k)
    rendered: List[Path] = []
    for part, paths in partial:
        cm = cm + part
        rendered += paths

    result = metrics(cm)
    _, lr_rate = lr_confusion(cm, table.flip_pairs, table.names)
    logger.info("評価が完了しました",
                extra={"samples": n, "tta": tta, "miou": result.miou, "pixel_acc": result.pixel_acc})
    return EvalResult(result, cm, lr_rate, small_class_miou(cm), rendered)


def infer_images(model: CDLinkNet, image_paths: Sequence[Union[str, Path]], out_dir: Union[str, Path],
                 table: ClassTable, tta: bool = False) -> List[Path]:
    """
    画像ファイル（P6）を推論し、<stem>_pred.ppm（描画）と <stem>_labels.pgm（生ラベル）を書き出す

    Returns:
        List[Path]: 書き出したファイル
    """
    model.eval()
    out = Path(out_dir)
    written: List[Path] = []
    for path in image_paths:
        path = Path(path)
        image = read_pnm(path)
        if image.ndim != 4:
            raise ValueError(f"推論入力は P6 画像である必要があります: {path}")
        labels = argmax_labels(predict_logits(model, image, tta, table.flip_pairs))[0]
        written.append(write_pnm(out / f"{path.stem}_pred.ppm", table.render(labels)))
        written.append(write_pnm(out / f"{path.stem}_labels.pgm", labels))
    logger.info("推論が完了しました", extra={"images": len(image_paths), "out_dir": str(out)})
    return written
