import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# パスの設定（エントリースクリプトと同じく repo ルートを追加）
sys.path.append(str(Path(__file__).parent.parent))

# ロガーはインポート時にログディレクトリを作るため、src を読み込む前に設定する
os.environ.setdefault("PARSEGRID_LOG_DIR", str(Path(tempfile.gettempdir()) / "parsegrid-test-logs"))
os.environ.setdefault("PARSEGRID_LOG_LEVEL", "WARNING")

from src.core.model.config import ModelConfig  # noqa: E402


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    """シード上書きと .env の影響を受けないようにする"""
    monkeypatch.delenv("PARSEGRID_SEED", raising=False)
    monkeypatch.delenv("PARSEGRID_WORKERS", raising=False)
    monkeypatch.setenv("PARSEGRID_ENV_FILE", str(tmp_path / "missing.env"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """base_width 8、入力 32x32、全スイッチ有効"""
    return ModelConfig.toy(num_classes=5, base_width=8, input_hw=(32, 32))
