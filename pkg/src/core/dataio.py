# -*- coding: utf-8 -*-
"""
文件: src/core/dataio.py
描述: 每段视频预计算特征的 "MFMV" 二进制容器、语料清单读写，以及桌面规模的合成语料生成器。
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
import os
import struct
from typing import List, Optional, Tuple

import numpy as np

from core.errors import DataFormatError, ShapeError
from core.tokenizer import Codebook, generate_codebook


logger = logging.getLogger(__name__)

VIDEO_MAGIC = b"MFMV"
VIDEO_VERSION = 1
VIDEO_EXTENSION = ".mfmv"
MANIFEST_NAME = "manifest.tsv"

_FLAG_FRAMES = 1
_FLAG_PATCHES = 2
_FLAG_LABEL = 4

# magic, version, N, K, F, flags, Q, D, label, id_len
_VIDEO_HEADER = struct.Struct("<4sIIIIIIIiI")


@dataclass(eq=False)
class VideoFeatures:
    """
    类: VideoFeatures
    作用: 一段视频的对象特征 N×K×F，可选帧特征 N×F、patch 嵌入 N×K×Q×D 与类别标签。
    """

    id: str
    objects: np.ndarray
    frames: Optional[np.ndarray] = None
    patches: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self) -> None:
        self.objects = np.asarray(self.objects, dtype=np.float64)
        if self.objects.ndim != 3:
            raise ShapeError(f"视频 {self.id} 的对象特征必须是 N×K×F，当前形状 {self.objects.shape}")
        n, k, f = self.objects.shape
        if n < 1 or k < 1 or f < 1:
            raise ShapeError(f"视频 {self.id} 的维度必须为正: N={n}, K={k}, F={f}")
        if self.frames is not None:
            self.frames = np.asarray(self.frames, dtype=np.float64)
            if self.frames.shape != (n, f):
                raise ShapeError(f"视频 {self.id} 帧特征形状 {self.frames.shape}，期望 {(n, f)}")
        if self.patches is not None:
            self.patches = np.asarray(self.patches, dtype=np.float64)
            if self.patches.ndim != 4 or self.patches.shape[:2] != (n, k) or min(self.patches.shape[2:]) < 1:
                raise ShapeError(f"视频 {self.id} patch 形状 {self.patches.shape} 与 N={n}, K={k} 不一致")
        if self.label is not None:
            self.label = int(self.label)

    @property
    def num_frames(self) -> int:
        return int(self.objects.shape[0])

    @property
    def num_objects(self) -> int:
        return int(self.objects.shape[1])

    @property
    def feature_dim(self) -> int:
        return int(self.objects.shape[2])


def encode_video(video: VideoFeatures) -> bytes:
    n, k, f = video.objects.shape
    flags = 0
    q = d = 0
    if video.frames is not None:
        flags |= _FLAG_FRAMES
    if video.patches is not None:
        flags |= _FLAG_PATCHES
        q, d = video.patches.shape[2], video.patches.shape[3]
    if video.label is not None:
        flags |= _FLAG_LABEL
    encoded_id = video.id.encode("utf-8")
    parts = [
        _VIDEO_HEADER.pack(VIDEO_MAGIC, VIDEO_VERSION, n, k, f, flags, q, d,
                           -1 if video.label is None else video.label, len(encoded_id)),
        encoded_id,
        video.objects.astype("<f4").tobytes(),
    ]
    if video.frames is not None:
        parts.append(video.frames.astype("<f4").tobytes())
    if video.patches is not None:
        parts.append(video.patches.astype("<f4").tobytes())
    return b"".join(parts)


def decode_video(raw: bytes) -> VideoFeatures:
    """
    函数: decode_video
    作用: 解析 MFMV 字节串。任何段缺失、截断或维度不符都报告段名与偏移。
    参数:
        raw: 文件内容。
    返回:
        VideoFeatures（负载加宽为 float64）。
    """
    if len(raw) < _VIDEO_HEADER.size:
        raise DataFormatError("视频文件头不完整", len(raw))
    magic, version, n, k, f, flags, q, d, label, id_len = _VIDEO_HEADER.unpack_from(raw, 0)
    if magic != VIDEO_MAGIC:
        raise DataFormatError(f"视频魔数错误: {magic!r}", 0)
    if version != VIDEO_VERSION:
        raise DataFormatError(f"不支持的视频容器版本: {version}", 4)
    if n < 1 or k < 1 or f < 1:
        raise DataFormatError(f"视频维度非法: N={n}, K={k}, F={f}", 8)
    if flags & ~(_FLAG_FRAMES | _FLAG_PATCHES | _FLAG_LABEL):
        raise DataFormatError(f"未知的段标志: {flags:#x}", 20)
    has_patches = bool(flags & _FLAG_PATCHES)
    if has_patches and (q < 1 or d < 1):
        raise DataFormatError(f"patch 段维度非法: Q={q}, D={d}", 24)

    offset = _VIDEO_HEADER.size
    if offset + id_len > len(raw):
        raise DataFormatError("id 段被截断", offset)
    try:
        video_id = raw[offset:offset + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError("id 不是合法 UTF-8", offset) from exc
    offset += id_len

    def _section(name: str, shape: Tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        count = math.prod(int(x) for x in shape)
        nbytes = count * 4
        if nbytes > len(raw) - offset:
            raise DataFormatError(f"{name} 段被截断（需要 {nbytes} 字节，剩余 {len(raw) - offset}）", offset)
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise DataFormatError(f"{name} 段含非有限值", offset)
        offset += nbytes
        return arr.astype(np.float64)

    objects = _section("objects", (n, k, f))
    frames = _section("frames", (n, f)) if flags & _FLAG_FRAMES else None
    patches = _section("patches", (n, k, q, d)) if has_patches else None
    if offset != len(raw):
        raise DataFormatError(f"文件末尾有 {len(raw) - offset} 字节多余数据", offset)
    return VideoFeatures(
        id=video_id,
        objects=objects,
        frames=frames,
        patches=patches,
        label=label if flags & _FLAG_LABEL else None,
    )


def write_video(path: str, video: VideoFeatures) -> None:
    with open(path, "wb") as f:
        f.write(encode_video(video))


def read_video(path: str) -> VideoFeatures:
    with open(path, "rb") as f:
        return decode_video(f.read())


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: Optional[int] = None


@dataclass(frozen=True)
class CorpusManifest:
    entries: List[ManifestEntry]
    split: str = ""


def write_manifest(directory: str, manifest: CorpusManifest) -> str:
    path = os.path.join(directory, MANIFEST_NAME)
    lines = []
    for entry in manifest.entries:
        label = "" if entry.label is None else str(entry.label)
        lines.append(f"{entry.id}\t{entry.path}\t{label}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_manifest(directory: str) -> CorpusManifest:
    """
    函数: read_manifest
    作用: 读取 "id<TAB>path<TAB>label?" 清单；路径相对清单所在目录，id 必须唯一且文件必须存在。
    参数:
        directory: 语料目录。
    返回:
        CorpusManifest，split 取目录名。
    """
    path = os.path.join(directory, MANIFEST_NAME)
    entries: List[ManifestEntry] = []
    seen = set()
    offset = 0
    with open(path, "rb") as f:
        raw = f.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError("清单不是合法 UTF-8", exc.start) from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        offset_here = offset
        offset += len(line.encode("utf-8")) + 1
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 2 or len(fields) > 3:
            raise DataFormatError(f"清单第 {lineno} 行字段数应为 2 或 3", offset_here)
        video_id, rel_path = fields[0], fields[1]
        label_text = fields[2].strip() if len(fields) == 3 else ""
        if video_id in seen:
            raise DataFormatError(f"清单第 {lineno} 行 id 重复: {video_id}", offset_here)
        seen.add(video_id)
        try:
            label = int(label_text) if label_text else None
        except ValueError as exc:
            raise DataFormatError(f"清单第 {lineno} 行标签无法解析: {label_text}", offset_here) from exc
        full = rel_path if os.path.isabs(rel_path) else os.path.join(directory, rel_path)
        if not os.path.isfile(full):
            raise DataFormatError(f"清单第 {lineno} 行文件不存在: {rel_path}", offset_here)
        entries.append(ManifestEntry(video_id, full, label))
    return CorpusManifest(entries=entries, split=os.path.basename(os.path.normpath(directory)))


def save_corpus(directory: str, videos: List[VideoFeatures]) -> CorpusManifest:
    os.makedirs(directory, exist_ok=True)
    entries = []
    for video in videos:
        name = f"{video.id}{VIDEO_EXTENSION}"
        write_video(os.path.join(directory, name), video)
        entries.append(ManifestEntry(video.id, name, video.label))
    manifest = CorpusManifest(entries=entries, split=os.path.basename(os.path.normpath(directory)))
    write_manifest(directory, manifest)
    logger.info("语料已写出: %s（%d 段视频）", directory, len(videos))
    return manifest


def load_corpus(directory: str) -> List[VideoFeatures]:
    """按清单顺序读取语料；清单标签优先于文件内标签。"""
    manifest = read_manifest(directory)
    videos = []
    for entry in manifest.entries:
        video = read_video(entry.path)
        if video.id != entry.id:
            raise DataFormatError(f"文件 {entry.path} 的 id {video.id} 与清单 {entry.id} 不一致", 0)
        if entry.label is not None:
            video.label = entry.label
        videos.append(video)
    logger.info("已加载语料 %s：%d 段视频", directory, len(videos))
    return videos


def select_frames(video: VideoFeatures, frames: int) -> VideoFeatures:
    """
    函数: select_frames
    作用: 等间隔取 frames 帧（含首尾帧），对象、帧特征与 patch 同步取子集；帧数相等时原样返回。
    参数:
        video: 视频特征。
        frames: 目标帧数 N（≥ 1，且不超过视频帧数）。
    返回:
        VideoFeatures。
    """
    total = video.num_frames
    if frames == total:
        return video
    if frames > total:
        raise DataFormatError(f"视频 {video.id} 只有 {total} 帧，无法取 {frames} 帧")
    index = [i * (total - 1) // (frames - 1) for i in range(frames)] if frames > 1 else [0]
    return VideoFeatures(
        id=video.id,
        objects=video.objects[index],
        frames=None if video.frames is None else video.frames[index],
        patches=None if video.patches is None else video.patches[index],
        label=video.label,
    )


# ---------------------------------------------------------------------------
# 合成语料
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    """码本与共享线性映射（token 直方图 → 对象特征），由 world_seed 唯一决定。"""

    codebook: Codebook
    mixing: np.ndarray


def make_world(vocab_size: int, patch_dim: int, feature_dim: int, world_seed: int = 0) -> SyntheticWorld:
    codebook = generate_codebook(vocab_size, patch_dim, world_seed)
    rng = np.random.default_rng([int(world_seed), 1, feature_dim])
    mixing = rng.standard_normal((vocab_size, feature_dim))
    return SyntheticWorld(codebook=codebook, mixing=mixing)


def pretrain_topics(seed: int, index: int, vocab_size: int, topics_per_video: int) -> Tuple[np.ndarray, np.ndarray]:
    """第 index 段预训练视频的主题 token 及其权重。"""
    rng = np.random.default_rng([int(seed), int(index), 0])
    t = max(1, min(vocab_size, topics_per_video))
    topics = np.sort(rng.choice(vocab_size, size=t, replace=False))
    weights = rng.dirichlet(np.ones(t))
    return topics, weights


def _render_objects(rng: np.random.Generator, world: SyntheticWorld, tokens: np.ndarray,
                    patch_noise: float, feature_noise: float) -> Tuple[np.ndarray, np.ndarray]:
    # tokens: N×K×Q 的码本下标
    n, k, q = tokens.shape
    vocab, d = world.codebook.entries.shape
    f = world.mixing.shape[1]
    patches = world.codebook.entries[tokens] + (patch_noise / np.sqrt(d)) * rng.standard_normal((n, k, q, d))
    hist = np.zeros((n, k, vocab))
    for ni in range(n):
        for ki in range(k):
            hist[ni, ki] = np.bincount(tokens[ni, ki], minlength=vocab) / q
    objects = hist @ world.mixing + feature_noise * rng.standard_normal((n, k, f))
    return objects, patches


def synth_pretrain_corpus(num_videos: int, frames: int, objects: int, feature_dim: int,
                          patches: int, patch_dim: int, vocab_size: int, seed: int, *,
                          topics_per_video: int = 6,
                          patch_noise: float = 0.1,
                          feature_noise: float = 0.1,
                          world_seed: int = 0,
                          with_frames: bool = True) -> Tuple[List[VideoFeatures], Codebook]:
    """
    函数: synth_pretrain_corpus
    作用: 生成无标签预训练语料。patch 是所属主题码本条目的带噪副本；对象特征是其 patch-token
          直方图经共享线性映射后的像加噪声，因此“被遮挡特征 → token”可学习。
    参数:
        num_videos, frames, objects, feature_dim, patches, patch_dim, vocab_size: 各维度（均 ≥ 1）。
        seed: 视频采样种子。
        topics_per_video: 每段视频的主题 token 数。
        patch_noise: patch 噪声的相对范数。
        feature_noise: 对象特征噪声标准差。
        world_seed: 决定码本与线性映射的种子。
        with_frames: 是否生成帧特征。
    返回:
        (视频列表, 码本)。
    """
    dims = (num_videos, frames, objects, feature_dim, patches, patch_dim, vocab_size)
    if min(dims) < 1:
        raise ValueError(f"合成语料各维度必须 ≥ 1: {dims}")
    world = make_world(vocab_size, patch_dim, feature_dim, world_seed)
    videos = []
    for i in range(num_videos):
        topics, weights = pretrain_topics(seed, i, vocab_size, topics_per_video)
        rng = np.random.default_rng([int(seed), i, 1])
        picks = rng.choice(topics.size, size=(frames, objects, patches), p=weights)
        tokens = topics[picks]
        obj, pat = _render_objects(rng, world, tokens, patch_noise, feature_noise)
        frame_feats = obj.mean(axis=1) + feature_noise * rng.standard_normal((frames, feature_dim)) if with_frames else None
        videos.append(VideoFeatures(id=f"pre{i:05d}", objects=obj, frames=frame_feats, patches=pat))
    return videos, world.codebook


def class_topics(num_classes: int, vocab_size: int, topics_per_class: int, world_seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """各类别的主题 token 与权重；只依赖 world_seed，训练集与测试集共享。"""
    rng = np.random.default_rng([int(world_seed), 7, num_classes, vocab_size])
    t = max(1, min(vocab_size, topics_per_class))
    out = []
    for _ in range(num_classes):
        topics = np.sort(rng.choice(vocab_size, size=t, replace=False))
        out.append((topics, rng.dirichlet(np.ones(t))))
    return out


def synth_labeled_corpus(num_videos: int, num_classes: int, frames: int, objects: int,
                         feature_dim: int, seed: int, *,
                         vocab_size: int = 64,
                         patches: int = 4,
                         patch_dim: int = 16,
                         topics_per_class: int = 4,
                         class_signal: float = 0.5,
                         patch_noise: float = 0.1,
                         feature_noise: float = 0.1,
                         world_seed: int = 0,
                         with_frames: bool = True,
                         with_patches: bool = False) -> List[VideoFeatures]:
    """
    函数: synth_labeled_corpus
    作用: 生成带标签语料。每个对象以概率 class_signal 取自所属类别的主题，否则取自随机背景 token；
          特征与预训练语料共用同一线性映射，使预训练的 ω_t 可以迁移。标签按 i % C 轮转，天然均衡。
    参数:
        num_videos: 视频数。
        num_classes: 类别数（≥ 2）。
        frames, objects, feature_dim: N、K、F。
        seed: 视频采样种子。
        其余关键字参数同 synth_pretrain_corpus。
    返回:
        视频列表。
    """
    if num_classes < 2:
        raise ValueError(f"类别数必须 ≥ 2，当前 {num_classes}")
    if min(num_videos, frames, objects, feature_dim) < 1:
        raise ValueError("合成语料各维度必须 ≥ 1")
    world = make_world(vocab_size, patch_dim, feature_dim, world_seed)
    classes = class_topics(num_classes, vocab_size, topics_per_class, world_seed)
    videos = []
    for i in range(num_videos):
        label = i % num_classes
        topics, weights = classes[label]
        rng = np.random.default_rng([int(seed), i, 2])
        signal = rng.random((frames, objects)) < class_signal
        class_tokens = topics[rng.choice(topics.size, size=(frames, objects, patches), p=weights)]
        background = rng.integers(0, vocab_size, size=(frames, objects, patches))
        tokens = np.where(signal[..., None], class_tokens, background)
        obj, pat = _render_objects(rng, world, tokens, patch_noise, feature_noise)
        frame_feats = obj.mean(axis=1) + feature_noise * rng.standard_normal((frames, feature_dim)) if with_frames else None
        videos.append(VideoFeatures(
            id=f"lab{i:05d}",
            objects=obj,
            frames=frame_feats,
            patches=pat if with_patches else None,
            label=label,
        ))
    return videos
