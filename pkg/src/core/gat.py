# -*- coding: utf-8 -*-
"""
文件: src/core/gat.py
描述: 图注意力块 ω：注意力邻接矩阵、两层图传播、注意力池化，把一组节点特征映射为单个 F 维向量。
      结构为：A = softmax((YU)(YV)ᵀ/√F_a)，H1 = relu(A·Y·W1)，H2 = relu(A·H1·W2)，
      α = softmax((H2·w_p)ᵀ)，输出 Σ α_m·H2_m。
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Dict, List, Mapping, Tuple

import numpy as np

from core import numerics as nx
from core.errors import DataFormatError, ShapeError


PARAM_NAMES = ("U", "V", "W1", "W2", "w_p")


@dataclass(eq=False)
class GatBlockParams:
    """
    类: GatBlockParams
    作用: 单个 GAT 块的可学习参数；w_p 以 F×1 列存放。
    """

    block: str
    U: nx.Parameter
    V: nx.Parameter
    W1: nx.Parameter
    W2: nx.Parameter
    w_p: nx.Parameter

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def attention_dim(self) -> int:
        return self.U.shape[1]

    def parameters(self) -> List[nx.Parameter]:
        return [self.U, self.V, self.W1, self.W2, self.w_p]

    def named_tensors(self, prefix: str = "gat") -> Dict[str, np.ndarray]:
        return {f"{prefix}/{self.block}/{name}": getattr(self, name).data.copy() for name in PARAM_NAMES}


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(feature_dim: int, attention_dim: int, seed: int, block: str = "omega_t") -> GatBlockParams:
    """
    函数: init_params
    作用: 按 uniform(-a, a)、a = sqrt(6/(fan_in+fan_out)) 逐矩阵初始化，同一种子结果一致。
    参数:
        feature_dim: 节点特征维度 F。
        attention_dim: 注意力投影维度 F_a。
        seed: 随机种子。
        block: 块名，用于参数命名。
    返回:
        GatBlockParams。
    """
    if feature_dim < 1 or attention_dim < 1:
        raise ShapeError(f"GAT 维度必须为正: F={feature_dim}, F_a={attention_dim}")
    rng = np.random.default_rng(int(seed))
    shapes = {
        "U": (feature_dim, attention_dim),
        "V": (feature_dim, attention_dim),
        "W1": (feature_dim, feature_dim),
        "W2": (feature_dim, feature_dim),
        "w_p": (feature_dim, 1),
    }
    values = {}
    for name in PARAM_NAMES:
        rows, cols = shapes[name]
        bound = glorot_bound(rows, cols)
        values[name] = nx.Parameter(rng.uniform(-bound, bound, size=(rows, cols)), f"{block}/{name}")
    return GatBlockParams(block=block, **values)


def copy_params(src: GatBlockParams, block: str | None = None) -> GatBlockParams:
    """深拷贝参数值，梯度清零；可改名为新的块名。"""
    name = block or src.block
    values = {key: nx.Parameter(getattr(src, key).data.copy(), f"{name}/{key}") for key in PARAM_NAMES}
    return GatBlockParams(block=name, **values)


def params_from_tensors(tensors: Mapping[str, np.ndarray], source_block: str,
                        block: str | None = None, prefix: str = "gat") -> GatBlockParams:
    """
    函数: params_from_tensors
    作用: 从检查点张量字典中取出某个块的参数，并校验形状。
    参数:
        tensors: 名称到矩阵的映射。
        source_block: 检查点中的块名，如 "omega_t"。
        block: 新块名，缺省沿用 source_block。
        prefix: 键前缀。
    返回:
        GatBlockParams。
    """
    name = block or source_block
    values = {}
    for key in PARAM_NAMES:
        full = f"{prefix}/{source_block}/{key}"
        if full not in tensors:
            raise DataFormatError(f"检查点缺少张量 {full}")
        values[key] = nx.Parameter(np.array(tensors[full]), f"{name}/{key}")
    f = values["W1"].shape[0]
    fa = values["U"].shape[1]
    expected = {"U": (f, fa), "V": (f, fa), "W1": (f, f), "W2": (f, f), "w_p": (f, 1)}
    for key, shape in expected.items():
        if values[key].shape != shape:
            raise DataFormatError(f"张量 {prefix}/{source_block}/{key} 形状 {values[key].shape}，期望 {shape}")
    return GatBlockParams(block=name, **values)


def gat_trace(params: GatBlockParams, nodes: nx.Node) -> Tuple[nx.Node, nx.Node, nx.Node]:
    """
    函数: gat_trace
    作用: 执行前向并同时返回邻接矩阵 A 与池化权重 α，供检查与测试使用。
    参数:
        params: 块参数。
        nodes: M×F 节点特征。
    返回:
        (1×F 输出, M×M 邻接, 1×M 池化权重)。
    """
    if nodes.shape[0] == 0:
        raise ShapeError("GAT 节点集为空")
    if nodes.shape[1] != params.feature_dim:
        raise ShapeError(f"节点特征维度 {nodes.shape[1]} 与块 {params.block} 的 F={params.feature_dim} 不一致")

    keys = nx.matmul(nodes, params.U)
    queries = nx.matmul(nodes, params.V)
    logits = nx.scale(nx.matmul(keys, nx.transpose(queries)), 1.0 / math.sqrt(params.attention_dim))
    adjacency = nx.rowsoftmax(logits)

    h1 = nx.relu(nx.matmul(nx.matmul(adjacency, nodes), params.W1))
    h2 = nx.relu(nx.matmul(nx.matmul(adjacency, h1), params.W2))

    alpha = nx.rowsoftmax(nx.transpose(nx.matmul(h2, params.w_p)))
    return nx.matmul(alpha, h2), adjacency, alpha


def gat_forward(params: GatBlockParams, nodes: nx.Node) -> nx.Node:
    return gat_trace(params, nodes)[0]
