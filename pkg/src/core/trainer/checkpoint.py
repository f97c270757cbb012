"""
チェックポイントのバイナリ形式

ヘッダ: b"CDLK", u32 version, u32 fingerprint, u32 record_count
レコード: u16 name_len, name(utf-8), u8 rank, u32 dims..., u32 byte_len, f32 LE payload, u32 CRC32(name + payload)
すべてリトルエンディアン。レコードはパラメータ（登録順）→ BN 統計 → 最適化器の速度 → meta の順。
"""

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from src.core.model.config import ModelConfig
from src.core.model.network import CDLinkNet
from src.utils.logger import get_logger

logger = get_logger(__name__)

MAGIC = b"CDLK"
VERSION = 1
ITERATION_RECORD = "meta.iteration"
VELOCITY_PREFIX = "optim."
VELOCITY_SUFFIX = ".velocity"
_ITER_BASE = 1 << 16


class CheckpointError(ValueError):
    """チェックポイントの読み書きエラー"""


class CheckpointFormatError(CheckpointError):
    """マジック不一致・切り詰め・レコード構成の不整合"""


class CheckpointVersionError(CheckpointError):
    """未対応のバージョン"""


class FingerprintMismatchError(CheckpointError):
    """モデル構成のフィンガープリント不一致"""

    def __init__(self, expected: int, found: int):
        self.expected = expected
        self.found = found
        super().__init__(f"モデル構成が一致しません: expected=0x{expected:08x}, found=0x{found:08x}")


class CheckpointCorruptError(CheckpointError):
    """レコードの CRC32 不一致"""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"チェックサムが一致しません: {name}")


@dataclass
class CheckpointArchive:
    """読み込んだチェックポイントの中身"""

    version: int
    fingerprint: int
    records: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def iteration(self) -> Optional[int]:
        value = self.records.get(ITERATION_RECORD)
        if value is None:
            return None
        hi, lo = (int(v) for v in value)
        return hi * _ITER_BASE + lo

    def velocities(self) -> Dict[str, np.ndarray]:
        return {
            name[len(VELOCITY_PREFIX):-len(VELOCITY_SUFFIX)]: data
            for name, data in self.records.items()
            if name.startswith(VELOCITY_PREFIX) and name.endswith(VELOCITY_SUFFIX)
        }


def stats_record_names(stats_name: str) -> Tuple[str, str]:
    """BN 統計 'X.bn.running' → ('X.bn.running_mean', 'X.bn.running_var')"""
    return f"{stats_name}_mean", f"{stats_name}_var"


def _encode_record(name: str, data: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    parts = [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", data.ndim)]
    parts += [struct.pack("<I", int(d)) for d in data.shape]
    parts += [struct.pack("<I", len(payload)), payload, struct.pack("<I", zlib.crc32(encoded + payload) & 0xFFFFFFFF)]
    return b"".join(parts)


def model_records(model: CDLinkNet) -> Dict[str, np.ndarray]:
    """パラメータと BN 統計を記録順に並べる"""
    records: Dict[str, np.ndarray] = {}
    for name, tensor in model.registry.items():
        records[name] = tensor.data
    for stats_name, stats in model.registry.running_stats().items():
        mean_name, var_name = stats_record_names(stats_name)
        records[mean_name] = stats.mean
        records[var_name] = stats.var
    return records


def encode_checkpoint(records: Dict[str, np.ndarray], fingerprint: int) -> bytes:
    header = MAGIC + struct.pack("<III", VERSION, fingerprint & 0xFFFFFFFF, len(records))
    return header + b"".join(_encode_record(name, np.asarray(data)) for name, data in records.items())


def save_checkpoint(
    model: CDLinkNet,
    path: Union[str, Path],
    velocity: Optional[Dict[str, np.ndarray]] = None,
    iteration: Optional[int] = None,
) -> Path:
    """
    モデル（と任意で最適化器の速度・反復数）を保存する

    Args:
        model: 保存するモデル
        path: 出力パス（一時ファイルに書いてから置き換える）
        velocity: パラメータ名 → モーメンタム速度
        iteration: 完了済みの反復数

    Returns:
        Path: 保存先
    """
    records = model_records(model)
    for name, data in (velocity or {}).items():
        records[f"{VELOCITY_PREFIX}{name}{VELOCITY_SUFFIX}"] = data
    if iteration is not None:
        if not 0 <= iteration < _ITER_BASE * _ITER_BASE:
            raise CheckpointFormatError(f"iteration が範囲外です: {iteration}")
        records[ITERATION_RECORD] = np.array([iteration // _ITER_BASE, iteration % _ITER_BASE], dtype=np.float32)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(records, model.config.fingerprint()))
    os.replace(tmp, path)
    logger.info("チェックポイントを保存しました", extra={"path": str(path), "records": len(records)})
    return path


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        end = self.pos + size
        if end > len(self.buf):
            raise CheckpointFormatError(f"{self.path}: ファイルが途中で切れています（{what}, offset={self.pos}）")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes, path: str = "<bytes>") -> CheckpointArchive:
    reader = _Reader(buf, path)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointFormatError(f"{path}: マジックが一致しません")
    version, fingerprint, count = reader.unpack("<III", "header")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: 未対応のバージョン {version}（対応: {VERSION}）")

    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        encoded = reader.take(name_len, "name")
        name = encoded.decode("utf-8")
        (rank,) = reader.unpack("<B", "rank")
        shape = reader.unpack(f"<{rank}I", f"{name} dims") if rank else ()
        (byte_len,) = reader.unpack("<I", f"{name} byte length")
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if byte_len != expected:
            raise CheckpointFormatError(f"{path}: {name} のバイト長 {byte_len} が形状 {shape} と一致しません")
        payload = reader.take(byte_len, f"{name} payload")
        (crc,) = reader.unpack("<I", f"{name} crc")
        if zlib.crc32(encoded + payload) & 0xFFFFFFFF != crc:
            raise CheckpointCorruptError(name)
        if name in records:
            raise CheckpointFormatError(f"{path}: レコード名が重複しています: {name}")
        records[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if reader.pos != len(buf):
        raise CheckpointFormatError(f"{path}: 末尾に余分なデータがあります（offset={reader.pos}）")
    return CheckpointArchive(version, fingerprint, records)


def read_checkpoint(path: Union[str, Path]) -> CheckpointArchive:
    """チェックポイントを検証して読み込む（モデルは作らない）"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f"チェックポイントがありません: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


def restore_model(model: CDLinkNet, archive: CheckpointArchive) -> CDLinkNet:
    """アーカイブの値をモデルへ書き戻す（全パラメータ・全 BN 統計が揃っていること）"""
    expected = model.config.fingerprint()
    if archive.fingerprint != expected:
        raise FingerprintMismatchError(expected, archive.fingerprint)
    records = archive.records
    known = set()
    for name, tensor in model.registry.items():
        tensor.data = _take(records, name, tensor.shape)
        known.add(name)
    for stats_name, stats in model.registry.running_stats().items():
        mean_name, var_name = stats_record_names(stats_name)
        stats.mean = _take(records, mean_name, stats.mean.shape)
        stats.var = _take(records, var_name, stats.var.shape)
        known.update((mean_name, var_name))
    extra = [n for n in records if n not in known and n != ITERATION_RECORD
             and not (n.startswith(VELOCITY_PREFIX) and n.endswith(VELOCITY_SUFFIX))]
    if extra:
        raise CheckpointFormatError(f"モデルにないレコードがあります: {extra[:5]}")
    return model


def _take(records: Dict[str, np.ndarray], name: str, shape: Tuple[int, ...]) -> np.ndarray:
    data = records.get(name)
    if data is None:
        raise CheckpointFormatError(f"レコードがありません: {name}")
    if data.shape != tuple(shape):
        raise CheckpointFormatError(f"{name} の形状 {data.shape} がモデルの {tuple(shape)} と一致しません")
    return data.copy()


def load_checkpoint(path: Union[str, Path], config: ModelConfig, seed: int = 0) -> CDLinkNet:
    """
    チェックポイントから config のモデルを復元する

    Raises:
        FingerprintMismatchError: 構成が保存時と異なる
        CheckpointFormatError / CheckpointVersionError / CheckpointCorruptError: ファイル不正
    """
    archive = read_checkpoint(path)
    expected = config.fingerprint()
    if archive.fingerprint != expected:
        raise FingerprintMismatchError(expected, archive.fingerprint)
    model = restore_model(CDLinkNet(config, seed=seed), archive)
    logger.info("チェックポイントを読み込みました", extra={"path": str(path), "iteration": archive.iteration})
    return model
