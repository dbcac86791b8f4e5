# -*- coding: utf-8 -*-
"""
文件: src/core/checkpoint.py
描述: "MFMK" 命名张量容器：魔数、版本、张量个数，之后依次为
      名称长度、名称(UTF-8)、行数、列数、float64 小端数据。写入采用临时文件 + 重命名。
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
from typing import Dict, Mapping

import numpy as np

from core.errors import DataFormatError


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MFMK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_DIMS = struct.Struct("<II")


def save_tensors(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    """
    函数: save_tensors
    作用: 原子写出命名张量；同目录下先写临时文件，再 os.replace 覆盖目标。
    参数:
        path: 目标路径。
        tensors: 名称到二维矩阵的映射，按插入顺序写出。
    返回:
        无。
    """
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"张量 {name} 必须是二维矩阵")
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_DIMS.pack(arr.shape[0], arr.shape[1]))
        chunks.append(np.ascontiguousarray(arr).tobytes())

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".mfmk-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    logger.debug("检查点已写出: %s（%d 个张量）", path, len(tensors))


def load_tensors(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    return decode_tensors(raw)


def decode_tensors(raw: bytes) -> Dict[str, np.ndarray]:
    """
    函数: decode_tensors
    作用: 解析 MFMK 字节串；任何截断或格式错误都带偏移报告。
    参数:
        raw: 文件内容。
    返回:
        保持文件顺序的名称到矩阵字典。
    """
    if len(raw) < _HEADER.size:
        raise DataFormatError("检查点文件头不完整", len(raw))
    magic, version, count = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"检查点魔数错误: {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"不支持的检查点版本: {version}", 4)

    offset = _HEADER.size
    out: Dict[str, np.ndarray] = {}
    for index in range(count):
        if offset + _U32.size > len(raw):
            raise DataFormatError(f"第 {index} 个张量的名称长度缺失", offset)
        (name_len,) = _U32.unpack_from(raw, offset)
        offset += _U32.size
        if offset + name_len > len(raw):
            raise DataFormatError(f"第 {index} 个张量的名称被截断", offset)
        try:
            name = raw[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"第 {index} 个张量名称不是 UTF-8", offset) from exc
        offset += name_len
        if offset + _DIMS.size > len(raw):
            raise DataFormatError(f"张量 {name} 的形状缺失", offset)
        rows, cols = _DIMS.unpack_from(raw, offset)
        offset += _DIMS.size
        nbytes = rows * cols * 8
        if offset + nbytes > len(raw):
            raise DataFormatError(f"张量 {name} 的数据被截断（需要 {nbytes} 字节）", offset)
        if name in out:
            raise DataFormatError(f"张量名称重复: {name}", offset)
        out[name] = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise DataFormatError(f"检查点末尾有 {len(raw) - offset} 字节多余数据", offset)
    return out
