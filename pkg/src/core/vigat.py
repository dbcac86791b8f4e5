# -*- coding: utf-8 -*-
"""
文件: src/core/vigat.py
描述: 下游事件识别头：全局分支 ω_1（帧特征）、局部分支 ω_2（帧内对象）→ ω_3（跨帧），
      拼接后经两层全连接分类。支持用预训练 ω_t 初始化、ω_2/ω_3 权重共享与均值池化消融。
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
import logging
import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core import numerics as nx
from core.checkpoint import load_tensors, save_tensors
from core.dataio import VideoFeatures
from core.errors import ConfigError, DataFormatError, ShapeError
from core.gat import GatBlockParams, copy_params, gat_forward, init_params, params_from_tensors
from core.optim import Adam, multistep_lr, unique_parameters, validate_milestones
from core.run_log import MetricsLog


logger = logging.getLogger(__name__)

GAT_RANDOM = "gat_random"
GAT_PRETRAINED = "gat_pretrained"
MEAN_POOL = "mean_pool"
BLOCK_MODES = (GAT_RANDOM, GAT_PRETRAINED, MEAN_POOL)

MODE_LABELS = {
    GAT_RANDOM: "Rand Init",
    GAT_PRETRAINED: "Pretrained ω_t",
    MEAN_POOL: "Mean Pooling",
}


@dataclass(frozen=True)
class VigatConfig:
    """
    类: VigatConfig
    作用: 下游模型结构与微调计划。ω_1 只能随机初始化或均值池化；共享 ω_2/ω_3 时两者模式必须同为 GAT 且相同。
    """

    num_classes: int = 10
    use_global: bool = True
    omega1_mode: str = GAT_RANDOM
    omega2_mode: str = GAT_RANDOM
    omega3_mode: str = GAT_RANDOM
    weight_sharing_23: bool = False
    hidden: Optional[int] = None
    attention_dim: Optional[int] = None
    epochs: int = 200
    lr: float = 1e-4
    milestones: Tuple[int, ...] = (60, 110)
    lr_decay: float = 0.1
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        for key in ("omega1_mode", "omega2_mode", "omega3_mode"):
            if getattr(self, key) not in BLOCK_MODES:
                raise ConfigError(f"{key}={getattr(self, key)} 不是合法模式 {BLOCK_MODES}")
        if self.omega1_mode == GAT_PRETRAINED:
            raise ConfigError("ω_1 不从 ω_t 初始化，只能为 gat_random 或 mean_pool")
        if self.weight_sharing_23:
            if MEAN_POOL in (self.omega2_mode, self.omega3_mode):
                raise ConfigError("权重共享要求 ω_2 与 ω_3 都是 GAT 块")
            if self.omega2_mode != self.omega3_mode:
                raise ConfigError("权重共享要求 ω_2 与 ω_3 的初始化方式相同")
        if self.num_classes < 2:
            raise ConfigError(f"类别数必须 ≥ 2，当前 {self.num_classes}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs、batch_size 必须 ≥ 1，学习率必须为正")
        object.__setattr__(self, "milestones", tuple(validate_milestones(self.milestones, self.epochs)))

    @property
    def needs_checkpoint(self) -> bool:
        return GAT_PRETRAINED in (self.omega2_mode, self.omega3_mode)


@dataclass(eq=False)
class ClassifierHead:
    """两层全连接：F_cat → hidden → num_classes，中间 ReLU。"""

    W1: nx.Parameter
    b1: nx.Parameter
    W2: nx.Parameter
    b2: nx.Parameter

    def parameters(self) -> List[nx.Parameter]:
        return [self.W1, self.b1, self.W2, self.b2]


def init_classifier(input_dim: int, hidden: int, num_classes: int, seed: int) -> ClassifierHead:
    rng = np.random.default_rng(int(seed))
    a1 = math.sqrt(6.0 / (input_dim + hidden))
    a2 = math.sqrt(6.0 / (hidden + num_classes))
    return ClassifierHead(
        W1=nx.Parameter(rng.uniform(-a1, a1, size=(input_dim, hidden)), "vigat/cls/W1"),
        b1=nx.Parameter(np.zeros((1, hidden)), "vigat/cls/b1"),
        W2=nx.Parameter(rng.uniform(-a2, a2, size=(hidden, num_classes)), "vigat/cls/W2"),
        b2=nx.Parameter(np.zeros((1, num_classes)), "vigat/cls/b2"),
    )


@dataclass(eq=False)
class VigatModel:
    cfg: VigatConfig
    feature_dim: int
    omega1: Optional[GatBlockParams]
    omega2: Optional[GatBlockParams]
    omega3: Optional[GatBlockParams]
    classifier: ClassifierHead

    def parameters(self) -> List[nx.Parameter]:
        params: List[nx.Parameter] = []
        for block in (self.omega1, self.omega2, self.omega3):
            if block is not None:
                params.extend(block.parameters())
        params.extend(self.classifier.parameters())
        return unique_parameters(params)

    def to_tensors(self) -> Dict[str, np.ndarray]:
        tensors: Dict[str, np.ndarray] = {}
        for slot in ("omega1", "omega2", "omega3"):
            block = getattr(self, slot)
            if block is not None:
                for key, value in block.named_tensors(prefix="vigat").items():
                    tensors[f"vigat/{slot}/{key.rsplit('/', 1)[1]}"] = value
        for p in self.classifier.parameters():
            tensors[p.name] = p.data.copy()
        tensors["vigat/config/use_global"] = np.array([[1.0 if self.cfg.use_global else 0.0]])
        tensors["vigat/config/share_23"] = np.array([[1.0 if self.cfg.weight_sharing_23 else 0.0]])
        return tensors


def _load_omega_t(tensors: Mapping[str, np.ndarray], feature_dim: int,
                  attention_dim: Optional[int]) -> GatBlockParams:
    params = params_from_tensors(tensors, "omega_t")
    if params.feature_dim != feature_dim:
        raise DataFormatError(f"检查点 ω_t 的 F={params.feature_dim} 与数据 F={feature_dim} 不一致")
    if attention_dim is not None and params.attention_dim != attention_dim:
        raise DataFormatError(f"检查点 ω_t 的 F_a={params.attention_dim} 与配置 F_a={attention_dim} 不一致")
    return params


def init_from_pretrained(cfg: VigatConfig, feature_dim: int,
                         checkpoint: Union[None, str, Mapping[str, np.ndarray]] = None) -> VigatModel:
    """
    函数: init_from_pretrained
    作用: 按配置构建下游模型。gat_pretrained 的块从检查点 ω_t 拷贝；共享时 ω_2 与 ω_3 指向同一组参数；
          ω_1 与分类头总是随机初始化。
    参数:
        cfg: 下游配置。
        feature_dim: 特征维度 F。
        checkpoint: ω_t 检查点路径或张量字典；需要预训练块时必填。
    返回:
        VigatModel。
    """
    if cfg.needs_checkpoint and checkpoint is None:
        raise ConfigError("配置要求 gat_pretrained，但未提供检查点")
    attention_dim = cfg.attention_dim or feature_dim
    if isinstance(checkpoint, str):
        checkpoint = load_tensors(checkpoint)
    omega_t = _load_omega_t(checkpoint, feature_dim, cfg.attention_dim) if cfg.needs_checkpoint else None

    def _block(mode: str, name: str) -> Optional[GatBlockParams]:
        if mode == MEAN_POOL:
            return None
        if mode == GAT_PRETRAINED:
            return copy_params(omega_t, block=name)  # type: ignore[arg-type]
        return init_params(feature_dim, attention_dim, nx.derive_seed(cfg.seed, name), block=name)

    omega1 = _block(cfg.omega1_mode, "omega1") if cfg.use_global else None
    if cfg.weight_sharing_23:
        omega2 = omega3 = _block(cfg.omega2_mode, "omega23")
    else:
        omega2 = _block(cfg.omega2_mode, "omega2")
        omega3 = _block(cfg.omega3_mode, "omega3")
    input_dim = 2 * feature_dim if cfg.use_global else feature_dim
    hidden = cfg.hidden or feature_dim
    classifier = init_classifier(input_dim, hidden, cfg.num_classes, nx.derive_seed(cfg.seed, "classifier"))
    return VigatModel(cfg=cfg, feature_dim=feature_dim, omega1=omega1, omega2=omega2, omega3=omega3,
                      classifier=classifier)


def _pool(block: Optional[GatBlockParams], nodes: nx.Node) -> nx.Node:
    return nx.mean_rows(nodes) if block is None else gat_forward(block, nodes)


@dataclass(eq=False)
class VigatOutput:
    local: nx.Node
    global_: Optional[nx.Node]
    logits: nx.Node


def vigat_trace(model: VigatModel, video: VideoFeatures) -> VigatOutput:
    """
    函数: vigat_trace
    作用: 前向计算并保留两个分支的向量。
    参数:
        model: 下游模型。
        video: 视频特征。
    返回:
        VigatOutput。
    """
    if video.feature_dim != model.feature_dim:
        raise ShapeError(f"视频 {video.id} 的 F={video.feature_dim} 与模型 F={model.feature_dim} 不一致")
    per_frame = [_pool(model.omega2, nx.constant(video.objects[n])) for n in range(video.num_frames)]
    local = _pool(model.omega3, nx.stack_rows(per_frame))
    global_ = None
    branch = local
    if model.cfg.use_global:
        if video.frames is None:
            raise DataFormatError(f"视频 {video.id} 缺少帧特征，无法计算全局分支")
        global_ = _pool(model.omega1, nx.constant(video.frames))
        branch = nx.concat_cols([local, global_])
    head = model.classifier
    hidden = nx.relu(nx.add(nx.matmul(branch, head.W1), head.b1))
    logits = nx.add(nx.matmul(hidden, head.W2), head.b2)
    return VigatOutput(local=local, global_=global_, logits=logits)


def vigat_forward(model: VigatModel, video: VideoFeatures) -> nx.Node:
    return vigat_trace(model, video).logits


def class_probabilities(model: VigatModel, video: VideoFeatures) -> np.ndarray:
    logits = vigat_forward(model, video).data
    return np.exp(nx.log_softmax_rows(logits)).reshape(-1)


def predict(model: VigatModel, video: VideoFeatures) -> int:
    # argmax 并列时取最小下标
    return int(np.argmax(vigat_forward(model, video).data.reshape(-1)))


def _check_labels(corpus: Sequence[VideoFeatures], num_classes: int) -> None:
    for video in corpus:
        if video.label is None:
            raise DataFormatError(f"视频 {video.id} 缺少标签")
        if not 0 <= video.label < num_classes:
            raise DataFormatError(f"视频 {video.id} 的标签 {video.label} 超出 [0, {num_classes})")


def evaluate(model: VigatModel, corpus: Sequence[VideoFeatures], threads: int = 1) -> float:
    """
    函数: evaluate
    作用: 计算 top-1 准确率（百分比，保留两位小数）。threads > 1 时用线程池并行只读前向。
    参数:
        model: 下游模型。
        corpus: 带标签语料。
        threads: 工作线程上限。
    返回:
        准确率百分比。
    """
    if not corpus:
        raise DataFormatError("评估语料为空")
    _check_labels(corpus, model.cfg.num_classes)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            predictions = list(pool.map(lambda v: predict(model, v), corpus))
    else:
        predictions = [predict(model, v) for v in corpus]
    correct = sum(1 for video, pred in zip(corpus, predictions) if pred == video.label)
    return round(100.0 * correct / len(corpus), 2)


def finetune(cfg: VigatConfig, model: VigatModel, train: Sequence[VideoFeatures],
             val: Optional[Sequence[VideoFeatures]] = None,
             on_step: Optional[Callable[[VigatModel, int], None]] = None) -> Tuple[VigatModel, MetricsLog]:
    """
    函数: finetune
    作用: 以类别交叉熵、Adam 与多里程碑学习率训练整个下游模型；逐轮记录训练损失与（可选）验证 top-1。
    参数:
        cfg: 下游配置（提供训练计划）。
        model: 由 init_from_pretrained 构建的模型。
        train: 带标签训练语料。
        val: 可选验证语料。
        on_step: 每次优化器更新后的回调，参数为模型与累计步数。
    返回:
        (训练后的模型, MetricsLog)。
    """
    if not train:
        raise DataFormatError("微调训练语料为空")
    _check_labels(train, cfg.num_classes)
    if val:
        _check_labels(val, cfg.num_classes)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    metrics = MetricsLog()
    eye = np.eye(cfg.num_classes)

    for epoch in range(1, cfg.epochs + 1):
        optimizer.lr = multistep_lr(cfg.lr, cfg.milestones, cfg.lr_decay, epoch)
        order = np.random.default_rng(nx.derive_seed(cfg.seed, "finetune-order", epoch)).permutation(len(train))
        losses: List[float] = []
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            batch_losses = []
            for i in batch:
                video = train[i]
                logits = vigat_forward(model, video)
                if int(np.argmax(logits.data.reshape(-1))) == video.label:
                    correct += 1
                batch_losses.append(nx.softmax_cross_entropy(logits, eye[video.label]))
            nx.scale(nx.total(batch_losses), 1.0 / len(batch)).backward()
            optimizer.step()
            if on_step is not None:
                on_step(model, optimizer.step_count)
            losses.extend(loss.item() for loss in batch_losses)
        record = {"lr": optimizer.lr, "loss": float(np.mean(losses)),
                  "train_top1": round(100.0 * correct / len(train), 2)}
        if val:
            record["val_top1"] = evaluate(model, val)
        metrics.record(epoch, **record)
        logger.info("微调 epoch %d/%d %s", epoch, cfg.epochs,
                    " ".join(f"{k}={v:.6g}" for k, v in record.items()))
    metrics.set_summary(epochs=cfg.epochs, final_loss=metrics.records[-1]["loss"])
    return model, metrics


def save_model(path: str, model: VigatModel) -> None:
    save_tensors(path, model.to_tensors())


def load_model(path: str, cfg: Optional[VigatConfig] = None) -> VigatModel:
    """
    函数: load_model
    作用: 读取 "vigat/..." 张量文件重建模型；块缺失即视为均值池化，共享标志恢复别名关系。
    参数:
        path: 模型文件。
        cfg: 可选的基础配置（训练计划等），结构字段以文件为准。
    返回:
        VigatModel。
    """
    tensors = load_tensors(path)
    for key in ("vigat/cls/W1", "vigat/cls/b1", "vigat/cls/W2", "vigat/cls/b2"):
        if key not in tensors:
            raise DataFormatError(f"模型文件缺少张量 {key}")
    use_global = float(tensors.get("vigat/config/use_global", np.zeros((1, 1)))[0, 0]) > 0.5
    share = float(tensors.get("vigat/config/share_23", np.zeros((1, 1)))[0, 0]) > 0.5

    def _block(slot: str) -> Optional[GatBlockParams]:
        if f"vigat/{slot}/W1" not in tensors:
            return None
        return params_from_tensors(tensors, slot, prefix="vigat")

    omega1 = _block("omega1")
    omega2 = _block("omega2")
    omega3 = omega2 if share else _block("omega3")
    classifier = ClassifierHead(*(nx.Parameter(tensors[f"vigat/cls/{k}"], f"vigat/cls/{k}")
                                  for k in ("W1", "b1", "W2", "b2")))
    num_classes = classifier.W2.shape[1]
    input_dim = classifier.W1.shape[0]
    feature_dim = input_dim // 2 if use_global else input_dim

    def _mode(block: Optional[GatBlockParams]) -> str:
        return MEAN_POOL if block is None else GAT_RANDOM

    base = cfg or VigatConfig(num_classes=num_classes)
    structure = replace(
        base,
        num_classes=num_classes,
        use_global=use_global,
        omega1_mode=_mode(omega1),
        omega2_mode=_mode(omega2),
        omega3_mode=_mode(omega3),
        weight_sharing_23=share,
        hidden=classifier.W1.shape[1],
    )
    for block in (omega1, omega2, omega3):
        if block is not None and block.feature_dim != feature_dim:
            raise DataFormatError(f"模型块 {block.block} 的 F={block.feature_dim} 与分类头输入 F={feature_dim} 不一致")
    return VigatModel(cfg=structure, feature_dim=feature_dim, omega1=omega1, omega2=omega2,
                      omega3=omega3, classifier=classifier)


# ---------------------------------------------------------------------------
# 对照实验
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyRow:
    label: str
    use_global: bool
    omega1_mode: str
    omega2_mode: str
    omega3_mode: str
    weight_sharing_23: bool


# 仅局部分支的六种组合
ABLATION_ROWS: Tuple[StudyRow, ...] = (
    StudyRow("mean/mean", False, MEAN_POOL, MEAN_POOL, MEAN_POOL, False),
    StudyRow("pretrained/rand", False, MEAN_POOL, GAT_PRETRAINED, GAT_RANDOM, False),
    StudyRow("rand/mean", False, MEAN_POOL, GAT_RANDOM, MEAN_POOL, False),
    StudyRow("rand/rand+share", False, MEAN_POOL, GAT_RANDOM, GAT_RANDOM, True),
    StudyRow("pretrained/mean", False, MEAN_POOL, GAT_PRETRAINED, MEAN_POOL, False),
    StudyRow("pretrained/pretrained+share", False, MEAN_POOL, GAT_PRETRAINED, GAT_PRETRAINED, True),
)

# 随机初始化与预训练初始化的对比：仅局部分支、完整结构各两行
TRANSFER_ROWS: Tuple[StudyRow, ...] = (
    StudyRow("local rand/rand", False, MEAN_POOL, GAT_RANDOM, GAT_RANDOM, True),
    StudyRow("local pretrained/pretrained", False, MEAN_POOL, GAT_PRETRAINED, GAT_PRETRAINED, True),
    StudyRow("full rand/rand/rand", True, GAT_RANDOM, GAT_RANDOM, GAT_RANDOM, True),
    StudyRow("full rand/pretrained/pretrained", True, GAT_RANDOM, GAT_PRETRAINED, GAT_PRETRAINED, True),
)


@dataclass(frozen=True)
class StudyResult:
    row: StudyRow
    accuracies: Tuple[float, ...]

    @property
    def mean(self) -> float:
        return round(float(np.mean(self.accuracies)), 2)


def run_study(rows: Sequence[StudyRow], base: VigatConfig, train: Sequence[VideoFeatures],
              test: Sequence[VideoFeatures],
              checkpoint: Union[None, str, Mapping[str, np.ndarray]] = None,
              seeds: Sequence[int] = (0,), threads: int = 1) -> List[StudyResult]:
    """
    函数: run_study
    作用: 对每一行配置、每个种子构建模型、微调并在测试集上评估。
    参数:
        rows: 配置行。
        base: 基础配置（类别数、训练计划等）。
        train, test: 训练与测试语料。
        checkpoint: ω_t 检查点。
        seeds: 种子列表。
        threads: 评估线程上限。
    返回:
        每行一个 StudyResult。
    """
    if not train or not test:
        raise DataFormatError("对照实验需要非空的训练与测试语料")
    if isinstance(checkpoint, str):
        checkpoint = load_tensors(checkpoint)
    feature_dim = train[0].feature_dim
    results = []
    for row in rows:
        accs = []
        for seed in seeds:
            cfg = replace(base, use_global=row.use_global, omega1_mode=row.omega1_mode,
                          omega2_mode=row.omega2_mode, omega3_mode=row.omega3_mode,
                          weight_sharing_23=row.weight_sharing_23, seed=int(seed))
            model = init_from_pretrained(cfg, feature_dim, checkpoint)
            model, _ = finetune(cfg, model, train)
            accs.append(evaluate(model, test, threads=threads))
            logger.info("对照 %s seed=%d top-1=%.2f", row.label, seed, accs[-1])
        results.append(StudyResult(row=row, accuracies=tuple(accs)))
    return results


def format_study_table(results: Sequence[StudyResult]) -> str:
    lines = [f"{'ω_1':<16}{'ω_2':<16}{'ω_3':<16}{'sharing':<9}{'top-1(%)':>9}"]
    for result in results:
        row = result.row
        w1 = MODE_LABELS[row.omega1_mode] if row.use_global else "-"
        lines.append(
            f"{w1:<16}{MODE_LABELS[row.omega2_mode]:<16}{MODE_LABELS[row.omega3_mode]:<16}"
            f"{'yes' if row.weight_sharing_23 else 'no':<9}{result.mean:>9.2f}"
        )
    return "\n".join(lines)
