"""
エラー記録（種類別の件数と詳細）

詳細は error_details.jsonl に1行1件で追記し、件数は error_stats.json に保存する。
同じディレクトリの記録は実行をまたいで累積する。
"""

import json
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.utils.logger import get_log_dir, get_logger

STATS_FILE = "error_stats.json"
DETAILS_FILE = "error_details.jsonl"


class Error_Logger:
    """学習・評価・CLI のエラーを種類別に記録するクラス"""

    def __init__(self, log_dir: Optional[str] = None):
        """
        Args:
            log_dir: 統計・詳細ファイルの保存先（省略時は PARSEGRID_LOG_DIR）
        """
        self.log_dir = Path(log_dir) if log_dir else get_log_dir()
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.logger = get_logger("parsegrid.errors")
        self.error_stats: Dict[str, int] = {}
        self.error_details: Dict[str, List[Dict[str, Any]]] = {}
        self.load_error_details()

    @property
    def stats_path(self) -> Path:
        return self.log_dir / STATS_FILE

    @property
    def details_path(self) -> Path:
        return self.log_dir / DETAILS_FILE

    def log_error(
        self,
        error_type: str,
        message: str,
        details: Optional[Dict[str, Any]] = None,
        run_id: Optional[str] = None,
    ) -> None:
        """
        エラーを記録する

        Args:
            error_type: 種類（'NONFINITE_LOSS', 'CHECKPOINT_ERROR', 'ABLATION_VARIANT_FAILED' など）
            message: メッセージ
            details: 再現に必要な情報（バッチのサンプルシード、出力先など）
            run_id: 関連する実行（アブレーションのバリアント名など）
        """
        record = {
            "timestamp": datetime.now().isoformat(),
            "error_type": error_type,
            "message": message,
            "details": details or {},
            "run_id": run_id,
        }
        # 例外処理中ならトレースバックも残す
        self.logger.error(f"[{error_type}] {message}", exc_info=sys.exc_info()[0] is not None,
                          extra={"error_type": error_type, "run_id": run_id})

        self.error_stats[error_type] = self.error_stats.get(error_type, 0) + 1
        self.error_details.setdefault(error_type, []).append(record)
        with open(self.details_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, ensure_ascii=False, default=str) + "\n")
        self.stats_path.write_text(json.dumps(self.error_stats, ensure_ascii=False, indent=2), encoding="utf-8")

    def get_error_stats(self) -> Dict[str, int]:
        """種類 → 件数"""
        return self.error_stats

    def get_error_details(self, error_type: Optional[str] = None) -> Dict[str, List[Dict[str, Any]]]:
        """種類 → 詳細の一覧（error_type 指定時はその種類だけ）"""
        if error_type:
            return {error_type: self.error_details.get(error_type, [])}
        return self.error_details

    def load_error_details(self) -> None:
        """保存済みの統計と詳細を読み込む（前回の実行分を含む）"""
        if self.stats_path.exists():
            self.error_stats = json.loads(self.stats_path.read_text(encoding="utf-8"))
        self.error_details = {}
        if self.details_path.exists():
            with open(self.details_path, "r", encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        record = json.loads(line)
                        self.error_details.setdefault(record["error_type"], []).append(record)

    def clear_error_stats(self) -> None:
        """統計と詳細を消去する（保存ファイルも削除）"""
        self.error_stats = {}
        self.error_details = {}
        for path in (self.stats_path, self.details_path):
            if path.exists():
                path.unlink()
        self.logger.info("エラー統計をクリアしました", extra={"log_dir": str(self.log_dir)})
