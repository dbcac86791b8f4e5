# -*- coding: utf-8 -*-
"""
文件: src/core/tokenizer.py
描述: 视觉词表量化。按余弦相似度把 patch 嵌入映射到最近的码本条目，
      并统计整段视频的 token 计数向量 u 与 top-r 二值目标 v。
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import os
import struct

import numpy as np

from core.errors import DataFormatError, ShapeError


logger = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"MFMC"
CODEBOOK_VERSION = 1
_CODEBOOK_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class Codebook:
    """
    类: Codebook
    作用: L 个 D 维视觉词嵌入；预先缓存每行范数用于余弦相似度。
    """

    entries: np.ndarray
    norms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 1 or entries.shape[1] < 1:
            raise ShapeError(f"码本必须是 L×D 矩阵（L,D ≥ 1），当前形状 {entries.shape}")
        norms = np.linalg.norm(entries, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise DataFormatError(f"码本第 {int(zero[0])} 行范数为 0")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "norms", norms)

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])

    @property
    def dim(self) -> int:
        return int(self.entries.shape[1])


@dataclass(frozen=True, eq=False)
class TokenTarget:
    u: np.ndarray
    v: np.ndarray
    r: int


def quantize(h: np.ndarray, codebook: Codebook) -> int:
    """
    函数: quantize
    作用: 返回与 h 余弦相似度最大的码本下标，并列时取最小下标。
    参数:
        h: 长度 D 的非零向量。
        codebook: 码本。
    返回:
        [0, L) 内的整数下标。
    """
    return int(quantize_many(np.asarray(h, dtype=np.float64).reshape(1, -1), codebook)[0])


def quantize_many(h: np.ndarray, codebook: Codebook) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != codebook.dim:
        raise ShapeError(f"patch 维度 {h.shape} 与码本维度 D={codebook.dim} 不一致")
    h_norms = np.linalg.norm(h, axis=1)
    zero = np.flatnonzero(h_norms == 0.0)
    if zero.size:
        raise DataFormatError(f"第 {int(zero[0])} 个 patch 范数为 0，余弦相似度无定义")
    sims = (h @ codebook.entries.T) / (h_norms[:, None] * codebook.norms[None, :])
    # argmax 在并列时返回第一个，即最小下标
    return np.argmax(sims, axis=1)


def top_r(u: np.ndarray, r: int) -> np.ndarray:
    """
    函数: top_r
    作用: 在 u 的 r 个最大位置置 1，其余置 0；数值相等时下标小者优先。
    参数:
        u: 长度 L 的计数向量。
        r: 1 ≤ r ≤ L。
    返回:
        长度 L 的 0/1 整数向量，恰有 r 个 1。
    """
    u = np.asarray(u).reshape(-1)
    if not 1 <= r <= u.size:
        raise ValueError(f"top_r 的 r={r} 超出范围 [1, {u.size}]")
    order = np.argsort(-u, kind="stable")
    v = np.zeros(u.size, dtype=np.int64)
    v[order[:r]] = 1
    return v


def tokenize_video(patches: np.ndarray, codebook: Codebook, r: int) -> TokenTarget:
    """
    函数: tokenize_video
    作用: 量化整段视频的全部 patch，得到直方图 u 与 top-r 目标 v。
    参数:
        patches: N×K×Q×D 的 patch 嵌入。
        codebook: 码本。
        r: top-r 的 r。
    返回:
        TokenTarget。
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4:
        raise ShapeError(f"patch 嵌入必须是 N×K×Q×D，当前形状 {patches.shape}")
    if not 1 <= r <= codebook.size:
        raise ValueError(f"top_r 的 r={r} 超出范围 [1, {codebook.size}]")
    n, k, q, d = patches.shape
    flat = patches.reshape(-1, d)
    norms = np.linalg.norm(flat, axis=1) if flat.size else np.zeros(0)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        fn, fk, fj = np.unravel_index(int(zero[0]), (n, k, q))
        raise DataFormatError(f"patch (n={fn}, k={fk}, j={fj}) 范数为 0，无法量化")
    tokens = quantize_many(flat, codebook)
    u = np.bincount(tokens, minlength=codebook.size).astype(np.int64)
    return TokenTarget(u=u, v=top_r(u, r), r=int(r))


def generate_codebook(size: int, dim: int, seed: int) -> Codebook:
    """标准正态采样后逐行归一化为单位范数。"""
    if size < 1 or dim < 1:
        raise ValueError(f"码本尺寸必须为正: L={size}, D={dim}")
    rng = np.random.default_rng([int(seed), 0x4D46])
    entries = rng.standard_normal((size, dim))
    norms = np.linalg.norm(entries, axis=1, keepdims=True)
    # 维度极小时可能抽到全零行，重抽直到非零
    while np.any(norms == 0.0):
        bad = (norms == 0.0).reshape(-1)
        entries[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(entries, axis=1, keepdims=True)
    return Codebook(entries / norms)


def save_codebook(path: str, codebook: Codebook) -> None:
    """
    函数: save_codebook
    作用: 以 "MFMC" 小端格式写出码本（float32 负载），先写临时文件再替换。
    参数:
        path: 目标路径。
        codebook: 码本。
    返回:
        无。
    """
    header = _CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, codebook.size, codebook.dim)
    payload = codebook.entries.astype("<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)
    logger.info("码本已写出: %s (L=%d, D=%d)", path, codebook.size, codebook.dim)


def load_codebook(path: str) -> Codebook:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CODEBOOK_HEADER.size:
        raise DataFormatError("码本文件头不完整", len(raw))
    magic, version, size, dim = _CODEBOOK_HEADER.unpack_from(raw, 0)
    if magic != CODEBOOK_MAGIC:
        raise DataFormatError(f"码本魔数错误: {magic!r}", 0)
    if version != CODEBOOK_VERSION:
        raise DataFormatError(f"不支持的码本版本: {version}", 4)
    if size < 1 or dim < 1:
        raise DataFormatError(f"码本尺寸非法: L={size}, D={dim}", 8)
    expected = size * dim * 4
    body = raw[_CODEBOOK_HEADER.size:]
    if len(body) != expected:
        raise DataFormatError(f"码本负载长度 {len(body)} 与 L·D·4={expected} 不符", _CODEBOOK_HEADER.size + len(body))
    entries = np.frombuffer(body, dtype="<f4").reshape(size, dim).astype(np.float64)
    if not np.all(np.isfinite(entries)):
        raise DataFormatError("码本含非有限值", _CODEBOOK_HEADER.size)
    return Codebook(entries)
