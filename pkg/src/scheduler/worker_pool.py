"""
並列数を制限したワーカープール
バッチ組み立てと評価シャードに使う。結果は常に投入順で返る。
"""
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from src.utils.logger import get_logger

T = TypeVar("T")
R = TypeVar("R")


class Worker_Pool:
    """投入順を保つ map を提供するワーカープール"""

    def __init__(self, max_workers: Optional[int] = None):
        """初期化

        Args:
            max_workers: 最大並列数（None なら環境変数 PARSEGRID_WORKERS、未設定なら1）
        """
        if max_workers is None:
            max_workers = int(os.getenv("PARSEGRID_WORKERS", "1"))
        if max_workers < 1:
            raise ValueError(f"max_workers は1以上である必要があります: {max_workers}")
        self.max_workers = max_workers
        self.logger = get_logger(__name__)
        self._executor: Optional[ThreadPoolExecutor] = None

    def __enter__(self) -> "Worker_Pool":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.shutdown()

    def _get_executor(self) -> ThreadPoolExecutor:
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.max_workers, thread_name_prefix="parsegrid")
            self.logger.debug(f"ワーカープール起動: {self.max_workers}並列")
        return self._executor

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """fn を各要素に適用し、投入順の結果リストを返す（max_workers=1 は同一スレッドで実行）

        例外は投入順で最初に失敗した要素のものがそのまま送出される。
        """
        items = list(items)
        if self.max_workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        futures = [self._get_executor().submit(fn, item) for item in items]
        return [future.result() for future in futures]

    def shutdown(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
