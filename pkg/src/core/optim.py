# -*- coding: utf-8 -*-
"""
文件: src/core/optim.py
描述: Adam 优化器与多里程碑学习率衰减，预训练与微调共用。
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Sequence

import numpy as np

from core.errors import ConfigError, NumericError
from core.numerics import Parameter


def multistep_lr(base_lr: float, milestones: Sequence[int], decay: float, epoch: int) -> float:
    """
    函数: multistep_lr
    作用: 计算第 epoch 轮（从 1 开始）的学习率；里程碑 m 从第 m 轮起生效。
    参数:
        base_lr: 初始学习率。
        milestones: 严格递增的里程碑轮次。
        decay: 每个里程碑的乘数。
        epoch: 当前轮次。
    返回:
        学习率。
    """
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * decay ** passed


def validate_milestones(milestones: Sequence[int], epochs: int) -> List[int]:
    values = [int(m) for m in milestones]
    for prev, cur in zip(values, values[1:]):
        if cur <= prev:
            raise ConfigError(f"里程碑必须严格递增: {values}")
    for m in values:
        if not 1 <= m <= epochs:
            raise ConfigError(f"里程碑 {m} 超出 [1, {epochs}]")
    return values


def unique_parameters(params: Iterable[Parameter]) -> List[Parameter]:
    """按对象身份去重并保持首次出现的顺序，共享权重只更新一次。"""
    seen = set()
    out: List[Parameter] = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


class Adam:
    """
    类: Adam
    作用: 带偏差修正的 Adam，无权重衰减；参数原地更新。
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = unique_parameters(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"参数 {p.name} 的梯度含非有限值")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for p in self.params:
            out[f"optim/m/{p.name}"] = self._m[p.name].copy()
            out[f"optim/v/{p.name}"] = self._v[p.name].copy()
        out["optim/step"] = np.array([[float(self.step_count)]])
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        for p in self.params:
            m_key, v_key = f"optim/m/{p.name}", f"optim/v/{p.name}"
            if m_key in tensors and v_key in tensors:
                self._m[p.name] = np.array(tensors[m_key], dtype=p.data.dtype).reshape(p.shape)
                self._v[p.name] = np.array(tensors[v_key], dtype=p.data.dtype).reshape(p.shape)
        if "optim/step" in tensors:
            self.step_count = int(np.asarray(tensors["optim/step"]).reshape(-1)[0])
