"""
学習サンプルと入力正規化
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.core.tensor.autograd import Tensor

IGNORE_VALUE = 255
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)


@dataclass
class SegSample:
    """画像 (1,3,H,W) [0,1] float32 とラベル (H,W) の組"""

    image: np.ndarray
    labels: np.ndarray
    ignore_value: int = IGNORE_VALUE
    source: Optional[str] = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 3):
            raise ValueError(f"画像は (1,3,H,W) である必要があります: shape={self.image.shape}")
        if self.labels.shape != self.image.shape[2:]:
            raise ValueError(f"画像 {self.image.shape[2:]} とラベル {self.labels.shape} のサイズが一致しません")

    @property
    def hw(self) -> Tuple[int, int]:
        return self.labels.shape[0], self.labels.shape[1]

    def hwc(self) -> np.ndarray:
        """OpenCV 用の (H,W,3) 画像"""
        return np.ascontiguousarray(self.image[0].transpose(1, 2, 0))

    @classmethod
    def from_hwc(cls, image: np.ndarray, labels: np.ndarray, ignore_value: int = IGNORE_VALUE,
                 source: Optional[str] = None) -> "SegSample":
        return cls(np.asarray(image, dtype=np.float32).transpose(2, 0, 1)[None], labels, ignore_value, source)

    def invalid_labels(self, num_classes: int) -> np.ndarray:
        """[0,K) と ignore_value 以外のラベル値"""
        values = np.unique(self.labels)
        return values[((values < 0) | (values >= num_classes)) & (values != self.ignore_value)]


def _stats(values: Sequence[float]) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).reshape(1, 3, 1, 1)


def normalize(image: Union[np.ndarray, Tensor], mean: Sequence[float] = DEFAULT_MEAN,
              std: Sequence[float] = DEFAULT_STD) -> Tensor:
    """チャネル毎に (x - mean) / std を適用する"""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    return Tensor((data - _stats(mean)) / _stats(std))


def denormalize(image: Union[np.ndarray, Tensor], mean: Sequence[float] = DEFAULT_MEAN,
                std: Sequence[float] = DEFAULT_STD) -> np.ndarray:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    return (data * _stats(std) + _stats(mean)).astype(np.float32)
