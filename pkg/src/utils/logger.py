"""
JSON ロガー

ハンドラーはパッケージのロガー "parsegrid" にだけ付け、各モジュールのロガーはその子として伝播させる。
出力先は PARSEGRID_LOG_DIR（既定 logs/）、レベルは PARSEGRID_LOG_LEVEL（既定 INFO）。
"""

import logging
import os
import sys
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path

from pythonjsonlogger import jsonlogger

ROOT_NAME = "parsegrid"
DEFAULT_LOG_DIR = "logs"
LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"
MAX_BYTES = 10 * 1024 * 1024
BACKUP_COUNT = 5


def get_log_dir() -> Path:
    """ログディレクトリ（PARSEGRID_LOG_DIR で上書き可能）"""
    return Path(os.getenv("PARSEGRID_LOG_DIR", DEFAULT_LOG_DIR))


def _level_from_env() -> int:
    name = os.getenv("PARSEGRID_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def _child_name(name: str) -> str:
    """モジュール名をパッケージロガー配下の名前に変換する（src.core.x → parsegrid.core.x）"""
    if name == ROOT_NAME or name.startswith(ROOT_NAME + "."):
        return name
    if name.startswith("src."):
        name = name[len("src."):]
    return f"{ROOT_NAME}.{name}"


def setup_logger() -> logging.Logger:
    """パッケージロガーにファイル（ローテーション付き）と標準エラーのハンドラーを設定する"""
    root = logging.getLogger(ROOT_NAME)
    if root.handlers:
        return root

    log_dir = get_log_dir()
    log_dir.mkdir(parents=True, exist_ok=True)
    formatter = jsonlogger.JsonFormatter(LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")

    file_handler = RotatingFileHandler(
        log_dir / f"parsegrid_{datetime.now().strftime('%Y%m%d')}.log",
        maxBytes=MAX_BYTES,
        backupCount=BACKUP_COUNT,
        encoding="utf-8",
    )
    file_handler.setFormatter(formatter)

    # 標準出力は予測結果などのコマンド出力に使うため、ログは標準エラーへ
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)

    root.addHandler(file_handler)
    root.addHandler(console_handler)
    root.setLevel(_level_from_env())
    root.propagate = False
    return root


def get_logger(name: str) -> logging.Logger:
    """
    モジュール用のロガーを取得する

    Args:
        name: 通常は __name__

    Returns:
        パッケージロガーの子ロガー
    """
    setup_logger()
    return logging.getLogger(_child_name(name))


def set_debug_level() -> None:
    """パッケージ全体を DEBUG に切り替える（--debug 用）"""
    setup_logger().setLevel(logging.DEBUG)
