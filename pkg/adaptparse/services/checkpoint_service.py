"""
Checkpoint 容器

布局（小端）：
    "CKPT" | 版本 0x01 | 3 字节 0 | u64 记录数
    每条记录：u32 名字长度 | UTF-8 名字 | 一个 TNSR 张量

记录按写入顺序排列，不含时间戳，同一状态总是得到相同字节。
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from adaptparse.engine.tensor_io import atomic_write_bytes, decode_tensor, encode_tensor
from adaptparse.errors import StorageError

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1
CKPT_HEADER = struct.Struct("<4sB3xQ")
NAME_LEN = struct.Struct("<I")
META_CONFIG_KEY = "meta.config"


def encode_checkpoint(records: Dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(records))]
    for name, arr in records.items():
        raw = name.encode("utf-8")
        parts.append(NAME_LEN.pack(len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(arr))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    if len(buf) < CKPT_HEADER.size:
        raise StorageError("truncated payload: checkpoint 头不完整")
    magic, version, count = CKPT_HEADER.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise StorageError(f"bad magic: 期望 {CKPT_MAGIC!r}，收到 {magic!r}")
    if version != CKPT_VERSION:
        raise StorageError(f"version mismatch: checkpoint 版本 {version}，支持 {CKPT_VERSION}")
    offset = CKPT_HEADER.size
    records: Dict[str, np.ndarray] = {}
    for i in range(count):
        if len(buf) - offset < NAME_LEN.size:
            raise StorageError(f"truncated payload: 第 {i} 条记录缺少名字长度")
        (n,) = NAME_LEN.unpack_from(buf, offset)
        offset += NAME_LEN.size
        if len(buf) - offset < n:
            raise StorageError(f"truncated payload: 第 {i} 条记录名字不完整")
        name = buf[offset:offset + n].decode("utf-8")
        offset += n
        arr, offset = decode_tensor(buf, offset)
        records[name] = arr
    if offset != len(buf):
        raise StorageError(f"checkpoint 末尾有 {len(buf) - offset} 字节多余内容")
    return records


def checkpoint_save(
    records: Dict[str, np.ndarray],
    path: Union[str, Path],
    meta: Optional[Dict[str, Any]] = None,
) -> None:
    """写 checkpoint；meta 以 JSON 文本存成 u8 张量"""
    payload = dict(records)
    if meta is not None:
        text = json.dumps(meta, sort_keys=True, ensure_ascii=False)
        payload[META_CONFIG_KEY] = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()
    atomic_write_bytes(path, encode_checkpoint(payload))
    logger.info(f"checkpoint 已写入: {path}（{len(payload)} 条记录）")


def checkpoint_load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"checkpoint 不存在: {path}")
    return decode_checkpoint(path.read_bytes())


def read_meta(records: Dict[str, np.ndarray]) -> Dict[str, Any]:
    if META_CONFIG_KEY not in records:
        raise StorageError(f"missing tensor: {META_CONFIG_KEY}")
    return json.loads(records[META_CONFIG_KEY].tobytes().decode("utf-8"))


def require(records: Dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in records:
        raise StorageError(f"missing tensor: {name}")
    return records[name]
