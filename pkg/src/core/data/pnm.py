"""
バイナリ netpbm（P5 グレースケール / P6 RGB、maxval 255）の読み書き

P6 は (1,3,H,W) の [0,1] float32、P5 は (H,W) の整数ラベルとして扱う。
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np

MAXVAL = 255
_WHITESPACE = b" \t\n\r\v\f"


class PNMParseError(ValueError):
    """netpbm の解析エラー（offset は問題のあるバイト位置）"""

    def __init__(self, message: str, offset: int, path: str = ""):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (offset={offset})")


def _next_token(buf: bytes, pos: int, path: str) -> Tuple[bytes, int]:
    """空白とコメントを読み飛ばしてヘッダのトークンを1つ返す"""
    size = len(buf)
    while pos < size:
        if buf[pos:pos + 1] == b"#":
            while pos < size and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos] in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < size and buf[pos] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMParseError("ヘッダが途中で終わっています", start, path)
    return buf[start:pos], pos


def _parse_int(token: bytes, offset: int, what: str, path: str) -> int:
    if not token.isdigit():
        raise PNMParseError(f"{what} が整数ではありません: {token!r}", offset, path)
    return int(token)


def parse_pnm(buf: bytes, path: str = "") -> np.ndarray:
    """バイト列を解析する（P6 → (1,3,H,W) float32、P5 → (H,W) int64）"""
    magic, pos = _next_token(buf, 0, path)
    if magic not in (b"P5", b"P6"):
        raise PNMParseError(f"未対応のマジック {magic!r}（P5/P6 のみ）", 0, path)
    values = []
    for what in ("幅", "高さ", "maxval"):
        start = pos
        token, pos = _next_token(buf, pos, path)
        values.append(_parse_int(token, start, what, path))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise PNMParseError(f"画像サイズが不正です: {width}x{height}", pos, path)
    if maxval != MAXVAL:
        raise PNMParseError(f"maxval は {MAXVAL} である必要があります: {maxval}", pos, path)
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise PNMParseError("ヘッダ直後の区切り文字がありません", pos, path)
    pos += 1

    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = buf[pos:pos + expected]
    if len(payload) < expected:
        raise PNMParseError(f"ペイロードが不足しています（{len(payload)}/{expected} バイト）", pos + len(payload), path)

    pixels = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return pixels.reshape(height, width).astype(np.int64)
    image = pixels.reshape(height, width, 3).transpose(2, 0, 1)[None]
    return (image.astype(np.float32) / MAXVAL).astype(np.float32)


def read_pnm(path: Union[str, Path]) -> np.ndarray:
    """netpbm ファイルを読み込む

    Args:
        path: P5/P6 ファイル

    Returns:
        np.ndarray: P6 は (1,3,H,W) の [0,1] float32、P5 は (H,W) の整数ラベル

    Raises:
        PNMParseError: ヘッダ不正・ペイロード不足・maxval ≠ 255
    """
    path = Path(path)
    return parse_pnm(path.read_bytes(), str(path))


def encode_pnm(data: np.ndarray) -> bytes:
    """配列を P5/P6 のバイト列にする（画像は round(x*255)、ラベルはそのまま）"""
    data = np.asarray(data)
    if data.ndim == 2:
        if data.size and (data.min() < 0 or data.max() > MAXVAL):
            raise ValueError(f"P5 の値は 0〜{MAXVAL} である必要があります")
        height, width = data.shape
        header = f"P5\n{width} {height}\n{MAXVAL}\n".encode("ascii")
        return header + data.astype(np.uint8).tobytes()
    if data.ndim == 4 and data.shape[:2] == (1, 3):
        data = data[0]
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"P6 は (1,3,H,W) または (3,H,W) である必要があります: shape={data.shape}")
    _, height, width = data.shape
    pixels = np.clip(np.rint(np.asarray(data, dtype=np.float64) * MAXVAL), 0, MAXVAL).astype(np.uint8)
    header = f"P6\n{width} {height}\n{MAXVAL}\n".encode("ascii")
    return header + pixels.transpose(1, 2, 0).tobytes()


def write_pnm(path: Union[str, Path], data: np.ndarray) -> Path:
    """2次元なら P5、(1,3,H,W)/(3,H,W) なら P6 として書き出す"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pnm(data))
    return path
