# -*- coding: utf-8 -*-
"""
文件: src/core/mfm.py
描述: 遮挡特征建模（MFM）无监督预训练：按帧遮挡对象特征，经 ω_t 与全连接头得到 L 维分数，
      与视频的 top-r 视觉 token 目标计算交叉熵并优化。
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import numerics as nx
from core.checkpoint import load_tensors, save_tensors
from core.dataio import VideoFeatures
from core.errors import ConfigError, DataFormatError, NumericError, ShapeError
from core.gat import GatBlockParams, gat_forward, init_params, params_from_tensors
from core.optim import Adam, multistep_lr, validate_milestones
from core.run_log import MetricsLog
from core.tokenizer import Codebook, TokenTarget, generate_codebook, tokenize_video


logger = logging.getLogger(__name__)

NONLINEARITIES = ("sigmoid", "softmax")


@dataclass(frozen=True)
class MaskingConfig:
    gamma: float = 0.4
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"遮挡比例 gamma={self.gamma} 必须位于 [0, 1]")


@dataclass(frozen=True)
class PretrainConfig:
    """
    类: PretrainConfig
    作用: 预训练超参数；默认值为 200 轮、学习率 1e-3、在第 50/100 轮乘以 0.1。
    """

    epochs: int = 200
    lr: float = 1e-3
    milestones: Tuple[int, ...] = (50, 100)
    lr_decay: float = 0.1
    batch_size: int = 16
    seed: int = 0
    top_r: int = 50
    attention_dim: Optional[int] = None
    nonlinearity: str = "sigmoid"
    checkpoint_path: Optional[str] = None
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs 必须 ≥ 1，当前 {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 必须 ≥ 1，当前 {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"学习率必须为正，当前 {self.lr}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"不支持的输出非线性: {self.nonlinearity}")
        if self.top_r < 1:
            raise ConfigError(f"top_r 必须 ≥ 1，当前 {self.top_r}")
        object.__setattr__(self, "milestones", tuple(validate_milestones(self.milestones, self.epochs)))


@dataclass(eq=False)
class ScoreHead:
    """全连接打分头：F 个输入、L 个输出。"""

    W_fc: nx.Parameter
    b_fc: nx.Parameter
    nonlinearity: str = "sigmoid"

    def parameters(self) -> List[nx.Parameter]:
        return [self.W_fc, self.b_fc]


def init_head(feature_dim: int, vocab_size: int, seed: int, nonlinearity: str = "sigmoid") -> ScoreHead:
    if nonlinearity not in NONLINEARITIES:
        raise ConfigError(f"不支持的输出非线性: {nonlinearity}")
    rng = np.random.default_rng(int(seed))
    bound = math.sqrt(6.0 / (feature_dim + vocab_size))
    return ScoreHead(
        W_fc=nx.Parameter(rng.uniform(-bound, bound, size=(feature_dim, vocab_size)), "mfm/head/W_fc"),
        b_fc=nx.Parameter(np.zeros((1, vocab_size)), "mfm/head/b_fc"),
        nonlinearity=nonlinearity,
    )


def init_mask_embedding(feature_dim: int, seed: int) -> nx.Parameter:
    rng = np.random.default_rng(int(seed))
    return nx.Parameter(0.02 * rng.standard_normal((1, feature_dim)), "mfm/p")


def mask_count(gamma: float, objects: int) -> int:
    # 浮点乘法可能得到 19.999999...，加一个极小量再取 floor
    return min(objects, int(math.floor(gamma * objects + 1e-9)))


@dataclass(eq=False)
class MaskedFeatures:
    nodes: nx.Node
    masks: List[np.ndarray]
    shape: Tuple[int, int, int]

    def as_array(self) -> np.ndarray:
        return self.nodes.data.reshape(self.shape)


def mask_features(objects: np.ndarray, cfg: MaskingConfig, p: nx.Parameter,
                  video_id: str = "", epoch: int = 0) -> MaskedFeatures:
    """
    函数: mask_features
    作用: 每帧独立地均匀抽取 floor(gamma·K) 个对象，把它们的特征整行替换为共享可学习向量 p；
          抽样由 (seed, video_id, epoch) 唯一决定。
    参数:
        objects: N×K×F 对象特征。
        cfg: 遮挡配置。
        p: 1×F 共享遮挡嵌入。
        video_id: 视频 id。
        epoch: 当前轮次。
    返回:
        MaskedFeatures：展平为 (N·K)×F 的节点矩阵与每帧被遮挡的下标（升序）。
    """
    objects = np.asarray(objects)
    if objects.ndim != 3:
        raise ShapeError(f"对象特征必须是 N×K×F，当前形状 {objects.shape}")
    n, k, f = objects.shape
    if k < 1:
        raise ShapeError("每帧至少需要一个对象")
    if p.shape != (1, f):
        raise ShapeError(f"遮挡嵌入形状 {p.shape} 与 F={f} 不一致")
    m = mask_count(cfg.gamma, k)
    rng = np.random.default_rng(nx.derive_seed(cfg.seed, "mask", video_id, epoch))
    masks = []
    flat_mask = np.zeros(n * k, dtype=bool)
    for frame in range(n):
        chosen = np.sort(rng.choice(k, size=m, replace=False)) if m else np.zeros(0, dtype=np.int64)
        masks.append(chosen)
        flat_mask[frame * k + chosen] = True
    base = nx.constant(objects.reshape(n * k, f))
    return MaskedFeatures(nodes=nx.fill_rows(base, flat_mask, p), masks=masks, shape=(n, k, f))


@dataclass(eq=False)
class MfmOutput:
    latent: nx.Node
    logits: nx.Node
    scores: nx.Node


def mfm_forward(masked: nx.Node, gat: GatBlockParams, head: ScoreHead) -> MfmOutput:
    """
    函数: mfm_forward
    作用: 视频全部 N·K 个对象作为同一节点集经 ω_t 得到 F 维潜表示，再经仿射变换与非线性得到 g。
    参数:
        masked: (N·K)×F 遮挡后的对象特征。
        gat: ω_t 参数。
        head: 打分头。
    返回:
        MfmOutput（潜表示、logit、分数 g）。
    """
    if head.W_fc.shape[0] != gat.feature_dim:
        raise ShapeError(f"打分头输入维度 {head.W_fc.shape[0]} 与 F={gat.feature_dim} 不一致")
    latent = gat_forward(gat, masked)
    logits = nx.add(nx.matmul(latent, head.W_fc), head.b_fc)
    scores = nx.sigmoid(logits) if head.nonlinearity == "sigmoid" else nx.rowsoftmax(logits)
    return MfmOutput(latent=latent, logits=logits, scores=scores)


def mfm_loss(logits: nx.Node, v: np.ndarray, nonlinearity: str = "sigmoid") -> nx.Node:
    """
    函数: mfm_loss
    作用: sigmoid 头使用平均二元交叉熵（logit 稳定形式）；softmax 头使用对 v/Σv 的类别交叉熵。
    参数:
        logits: 1×L 预激活。
        v: 长度 L 的 0/1 目标。
        nonlinearity: "sigmoid" 或 "softmax"。
    返回:
        1×1 损失节点。
    """
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    if v.shape != logits.shape:
        raise ShapeError(f"目标长度 {v.shape[1]} 与分数长度 {logits.shape[1]} 不一致")
    try:
        if nonlinearity == "sigmoid":
            return nx.bce_with_logits(logits, v)
        if nonlinearity == "softmax":
            total = v.sum()
            if total <= 0:
                raise ShapeError("softmax 损失需要至少一个正目标")
            return nx.softmax_cross_entropy(logits, v / total)
    except NumericError as exc:
        raise NumericError(f"MFM 损失非有限: logit 范围 [{logits.data.min():.3g}, {logits.data.max():.3g}]") from exc
    raise ConfigError(f"不支持的输出非线性: {nonlinearity}")


@dataclass(eq=False)
class TrainState:
    """
    类: TrainState
    作用: 预训练的全部可学习参数、优化器矩估计、已完成轮次与种子。
    """

    gat: GatBlockParams
    p: nx.Parameter
    head: ScoreHead
    optimizer: Adam
    epoch: int = 0
    seed: int = 0

    def parameters(self) -> List[nx.Parameter]:
        return self.gat.parameters() + [self.p] + self.head.parameters()

    def to_tensors(self) -> Dict[str, np.ndarray]:
        tensors: Dict[str, np.ndarray] = {}
        tensors.update(self.gat.named_tensors())
        tensors["mfm/p"] = self.p.data.copy()
        tensors["mfm/head/W_fc"] = self.head.W_fc.data.copy()
        tensors["mfm/head/b_fc"] = self.head.b_fc.data.copy()
        tensors.update(self.optimizer.state_tensors())
        tensors["state/epoch"] = np.array([[float(self.epoch)]])
        tensors["state/seed"] = np.array([[float(self.seed)]])
        tensors["state/softmax_head"] = np.array([[1.0 if self.head.nonlinearity == "softmax" else 0.0]])
        return tensors

    def save(self, path: str) -> None:
        save_tensors(path, self.to_tensors())


def new_train_state(feature_dim: int, vocab_size: int, cfg: PretrainConfig) -> TrainState:
    attention_dim = cfg.attention_dim or feature_dim
    gat = init_params(feature_dim, attention_dim, nx.derive_seed(cfg.seed, "omega_t"), block="omega_t")
    p = init_mask_embedding(feature_dim, nx.derive_seed(cfg.seed, "mask_embedding"))
    head = init_head(feature_dim, vocab_size, nx.derive_seed(cfg.seed, "head"), cfg.nonlinearity)
    state = TrainState(gat=gat, p=p, head=head, optimizer=None, seed=cfg.seed)  # type: ignore[arg-type]
    state.optimizer = Adam(state.parameters(), lr=cfg.lr)
    return state


def load_train_state(path: str) -> TrainState:
    """
    函数: load_train_state
    作用: 从 MFMK 检查点恢复 TrainState（含优化器矩估计），用于续训或迁移。
    参数:
        path: 检查点路径。
    返回:
        TrainState。
    """
    tensors = load_tensors(path)
    for key in ("mfm/p", "mfm/head/W_fc", "mfm/head/b_fc"):
        if key not in tensors:
            raise DataFormatError(f"检查点缺少张量 {key}")
    gat = params_from_tensors(tensors, "omega_t")
    softmax = float(tensors.get("state/softmax_head", np.zeros((1, 1)))[0, 0]) > 0.5
    head = ScoreHead(
        W_fc=nx.Parameter(tensors["mfm/head/W_fc"], "mfm/head/W_fc"),
        b_fc=nx.Parameter(tensors["mfm/head/b_fc"], "mfm/head/b_fc"),
        nonlinearity="softmax" if softmax else "sigmoid",
    )
    p = nx.Parameter(tensors["mfm/p"], "mfm/p")
    f = gat.feature_dim
    if p.shape != (1, f) or head.W_fc.shape[0] != f or head.b_fc.shape != (1, head.W_fc.shape[1]):
        raise DataFormatError(f"检查点张量形状不一致: p {p.shape}, W_fc {head.W_fc.shape}, b_fc {head.b_fc.shape}")
    state = TrainState(
        gat=gat,
        p=p,
        head=head,
        optimizer=None,  # type: ignore[arg-type]
        epoch=int(tensors.get("state/epoch", np.zeros((1, 1)))[0, 0]),
        seed=int(tensors.get("state/seed", np.zeros((1, 1)))[0, 0]),
    )
    state.optimizer = Adam(state.parameters())
    state.optimizer.load_state_tensors(tensors)
    return state


def compute_targets(corpus: Sequence[VideoFeatures], codebook: Codebook, r: int) -> List[TokenTarget]:
    targets = []
    for video in corpus:
        if video.patches is None:
            raise DataFormatError(f"视频 {video.id} 缺少 patch 嵌入，无法计算 token 目标")
        if video.patches.shape[3] != codebook.dim:
            raise DataFormatError(f"视频 {video.id} 的 patch 维度 D={video.patches.shape[3]} 与码本 D={codebook.dim} 不一致")
        targets.append(tokenize_video(video.patches, codebook, r))
    return targets


def video_loss(state: TrainState, video: VideoFeatures, target: TokenTarget,
               mask_cfg: MaskingConfig, epoch: int) -> nx.Node:
    masked = mask_features(video.objects, mask_cfg, state.p, video.id, epoch)
    out = mfm_forward(masked.nodes, state.gat, state.head)
    return mfm_loss(out.logits, target.v, state.head.nonlinearity)


def pretrain(corpus: Sequence[VideoFeatures], codebook: Codebook, cfg: PretrainConfig,
             mask_cfg: MaskingConfig, resume: Optional[TrainState] = None) -> Tuple[TrainState, MetricsLog]:
    """
    函数: pretrain
    作用: MFM 预训练主循环。目标由未遮挡的 patch 计算一次；每轮重新抽取遮挡；
          批内损失取平均，每批一次 Adam 更新；学习率按里程碑衰减；周期性与最终检查点。
    参数:
        corpus: 带 patch 嵌入的视频序列。
        codebook: 码本。
        cfg: 预训练配置。
        mask_cfg: 遮挡配置。
        resume: 可选，从已保存的 TrainState 继续。
    返回:
        (TrainState, MetricsLog)。
    """
    if not corpus:
        raise DataFormatError("预训练语料为空")
    feature_dim = corpus[0].feature_dim
    for video in corpus:
        if video.feature_dim != feature_dim:
            raise DataFormatError(f"视频 {video.id} 的 F={video.feature_dim} 与语料 F={feature_dim} 不一致")
    if cfg.top_r > codebook.size:
        raise ConfigError(f"top_r={cfg.top_r} 超过码本大小 L={codebook.size}")
    targets = compute_targets(corpus, codebook, cfg.top_r)

    if resume is not None:
        state = resume
        if state.gat.feature_dim != feature_dim or state.head.W_fc.shape[1] != codebook.size:
            raise DataFormatError("续训检查点与语料或码本维度不一致")
    else:
        state = new_train_state(feature_dim, codebook.size, cfg)
    optimizer = state.optimizer
    metrics = MetricsLog()
    for epoch in range(1, state.epoch + 1):
        # 续训时补齐之前轮次的占位，保持 epoch 连续
        metrics.record(epoch, lr=multistep_lr(cfg.lr, cfg.milestones, cfg.lr_decay, epoch), resumed=True)

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        optimizer.lr = multistep_lr(cfg.lr, cfg.milestones, cfg.lr_decay, epoch)
        order = np.random.default_rng(nx.derive_seed(cfg.seed, "order", epoch)).permutation(len(corpus))
        # 轮首快照，中途出现非有限数值时保存它
        snapshot = state.to_tensors() if cfg.checkpoint_path else None
        epoch_losses: List[float] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            try:
                losses = [video_loss(state, corpus[i], targets[i], mask_cfg, epoch) for i in batch]
                batch_loss = nx.scale(nx.total(losses), 1.0 / len(batch))
                batch_loss.backward()
                optimizer.step()
            except NumericError:
                logger.error("第 %d 轮出现非有限数值，终止预训练", epoch)
                if snapshot is not None:
                    save_tensors(cfg.checkpoint_path, snapshot)
                    logger.error("已保存最后一个有效检查点: %s（完成 %d 轮）", cfg.checkpoint_path, state.epoch)
                raise
            epoch_losses.extend(loss.item() for loss in losses)
        state.epoch = epoch
        epoch_loss = float(np.mean(epoch_losses))
        metrics.record(epoch, lr=optimizer.lr, loss=epoch_loss)
        logger.info("预训练 epoch %d/%d lr=%.1e loss=%.6f", epoch, cfg.epochs, optimizer.lr, epoch_loss)
        if cfg.checkpoint_path and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            state.save(cfg.checkpoint_path)
            logger.info("已写出周期检查点: %s", cfg.checkpoint_path)

    if cfg.checkpoint_path:
        state.save(cfg.checkpoint_path)
        logger.info("已写出最终检查点: %s", cfg.checkpoint_path)
    losses = [r["loss"] for r in metrics.records if not r.get("resumed")]
    metrics.set_summary(epochs=cfg.epochs, final_loss=losses[-1] if losses else float("nan"))
    return state, metrics


def gradcheck_mfm(seed: int = 0, frames: int = 2, objects: int = 3, feature_dim: int = 5,
                  vocab_size: int = 7, patches: int = 2, patch_dim: int = 4, top_r: int = 3,
                  gamma: float = 0.4, nonlinearity: str = "sigmoid",
                  tolerance: float = 1e-4) -> List[nx.GradCheckReport]:
    """
    函数: gradcheck_mfm
    作用: 在一个极小的随机实例上对完整 MFM 损失做中心差分校验，覆盖 ω_t、遮挡嵌入 p 与打分头。
    参数:
        seed: 实例与参数种子。
        其余参数为实例维度与损失设置。
    返回:
        每个参数一条 GradCheckReport。
    """
    rng = np.random.default_rng([int(seed), 0x6763])
    video = VideoFeatures(
        id="gradcheck",
        objects=rng.standard_normal((frames, objects, feature_dim)),
        patches=rng.standard_normal((frames, objects, patches, patch_dim)),
    )
    codebook = generate_codebook(vocab_size, patch_dim, seed)
    target = tokenize_video(video.patches, codebook, min(top_r, vocab_size))
    cfg = PretrainConfig(epochs=1, milestones=(), seed=seed, top_r=min(top_r, vocab_size),
                         attention_dim=feature_dim, nonlinearity=nonlinearity)
    state = new_train_state(feature_dim, vocab_size, cfg)
    mask_cfg = MaskingConfig(gamma=gamma, seed=seed)
    return nx.grad_check(lambda: video_loss(state, video, target, mask_cfg, 1), state.parameters(),
                         tolerance=tolerance, seed=seed)
