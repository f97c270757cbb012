"""
Training/evaluation monitor: JSON-lines metrics log plus a short console line per record
"""

import json
import math
import os
from typing import Any, Dict, List, Optional

from src.utils.logger import get_logger


def _jsonable(value: Any) -> Any:
    """Convert numpy scalars and non-finite floats into plain JSON values"""
    if hasattr(value, "item") and callable(value.item):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


class Monitor:
    """Metrics monitor"""

    def __init__(self, metrics_file: Optional[str] = None, name: str = "parsegrid.monitor"):
        """
        Initialize Monitor

        Args:
            metrics_file: Path to the JSON-lines metrics log. If None, records go to the logger only.
        """
        self.logger = get_logger(name)
        self.metrics_file = metrics_file
        self.records: List[Dict[str, Any]] = []
        if metrics_file:
            directory = os.path.dirname(metrics_file)
            if directory:
                os.makedirs(directory, exist_ok=True)
            # truncate: one metrics log per run
            with open(metrics_file, "w", encoding="utf-8"):
                pass

    def log_metrics(self, record: Dict[str, Any]) -> Dict[str, Any]:
        """Append one record (iter, epoch, lr, loss, split metrics) and mirror a summary line"""
        record = _jsonable(record)
        self.records.append(record)
        if self.metrics_file:
            with open(self.metrics_file, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
        summary = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in record.items() if not isinstance(v, (dict, list)))
        self.logger.info(summary)
        return record

    def log_error(self, message: str) -> None:
        self.logger.error(message)

    def log_warning(self, message: str) -> None:
        self.logger.warning(message)

    def log_info(self, message: str) -> None:
        self.logger.info(message)

    def log_debug(self, message: str) -> None:
        self.logger.debug(message)


def read_metrics(path: str) -> List[Dict[str, Any]]:
    """Load a JSON-lines metrics log"""
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
