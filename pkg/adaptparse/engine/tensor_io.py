"""
TNSR 二进制张量格式

布局（全部小端）：
    "TNSR" | 版本 0x01 | dtype（0=f32, 1=u8, 2=f64）| rank | 4 字节 0
    rank 个 u64 维度 | 行优先数据
rank 0 的标量按 rank 1、长度 1 存储。不压缩。
"""
import os
import struct
import tempfile
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from adaptparse.engine.tensor import Tensor
from adaptparse.errors import StorageError

MAGIC = b"TNSR"
VERSION = 1
HEADER = struct.Struct("<4sBBB4x")

DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.uint8): 1,
    np.dtype(np.float64): 2,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


# ============================================================
# 原子写入
# ============================================================

def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> None:
    """写临时文件再 rename，避免留下半个文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ============================================================
# 编解码
# ============================================================

def encode_tensor(t: Union[Tensor, np.ndarray]) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in DTYPE_CODES:
        raise StorageError(f"unknown dtype: {arr.dtype} 不能写入 TNSR")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 4:
        raise StorageError(f"TNSR 最大 rank 为 4，收到 {arr.ndim}")
    header = HEADER.pack(MAGIC, VERSION, DTYPE_CODES[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes(order="C")
    return header + dims + payload


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """从 buf[offset:] 解出一个张量，返回 (数组, 结束位置)"""
    if len(buf) - offset < HEADER.size:
        raise StorageError("truncated payload: 文件头不完整")
    magic, version, code, rank = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise StorageError(f"bad magic: 期望 {MAGIC!r}，收到 {magic!r}")
    if version != VERSION:
        raise StorageError(f"version mismatch: 不支持的 TNSR 版本 {version}")
    if code not in CODE_DTYPES:
        raise StorageError(f"unknown dtype: 代码 {code}")
    offset += HEADER.size
    if len(buf) - offset < 8 * rank:
        raise StorageError("truncated payload: 维度信息不完整")
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    dtype = CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) - offset < nbytes:
        raise StorageError(f"truncated payload: 需要 {nbytes} 字节，剩余 {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=count, offset=offset)
    arr = arr.astype(dtype).reshape(dims)
    return arr, offset + nbytes


def tensor_write(t: Union[Tensor, np.ndarray], path: Union[str, Path]) -> None:
    atomic_write_bytes(path, encode_tensor(t))


def tensor_read(path: Union[str, Path]) -> Tensor:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"文件不存在: {path}")
    buf = path.read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise StorageError(f"{path}: 数据之后还有 {len(buf) - end} 字节多余内容")
    return Tensor(arr)
