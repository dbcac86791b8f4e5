# -*- coding: utf-8 -*-
"""
文件: src/core/numerics.py
描述: 稠密矩阵上的反向模式自动求导底座。仅覆盖流水线需要的少量运算，
      另附有限差分梯度检查。所有矩阵均为二维 numpy 数组，向量用 1×n 行表示。
"""

from __future__ import annotations

from dataclasses import dataclass
import zlib
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import NumericError, ShapeError


_DTYPE = np.float64

_ELEMENTWISE_KINDS = ("relu", "sigmoid", "add", "hadamard", "scale")


def set_precision(name: str) -> None:
    """
    函数: set_precision
    作用: 切换新建参数与常量的浮点精度。梯度检查只在 float64 下可靠。
    参数:
        name: "float64" 或 "float32"。
    返回:
        无。
    """
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ValueError(f"不支持的精度: {name}")
    _DTYPE = np.float64 if name == "float64" else np.float32


class Node:
    """
    类: Node
    作用: 计算图中的一个矩阵值。记录父节点与局部反传函数，backward() 时按拓扑逆序传播。
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self,
                 data: np.ndarray,
                 parents: Tuple["Node", ...] = (),
                 backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None) -> None:
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        """
        函数: backward
        作用: 从本节点（必须是 1×1 标量）出发反向传播；叶子参数的梯度会累加到 Parameter.grad。
        参数:
            无。
        返回:
            无。
        """
        if self.data.size != 1:
            raise ShapeError(f"只能从标量反传，当前形状 {self.data.shape}")

        order: List[Node] = []
        visited = set()
        stack: List[Tuple[Node, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Node):
    """
    类: Parameter
    作用: 可学习的叶子矩阵，带名称与同形状的梯度缓冲。
    """

    __slots__ = ("name",)

    def __init__(self, value: np.ndarray, name: str) -> None:
        value = np.array(value, dtype=_DTYPE)
        if value.ndim != 2:
            raise ShapeError(f"参数 {name} 必须是二维矩阵，当前维度 {value.ndim}")
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def constant(value: np.ndarray) -> Node:
    value = np.asarray(value, dtype=_DTYPE)
    if value.ndim == 1:
        value = value.reshape(1, -1)
    return Node(value)


def _make(data: np.ndarray, parents: Tuple[Node, ...], backward) -> Node:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"运算输出含非有限值，形状 {data.shape}")
    return Node(data, parents, backward)


def matmul(a: Node, b: Node) -> Node:
    """
    函数: matmul
    作用: 矩阵乘法，两侧输入都注册梯度。
    参数:
        a: m×k 矩阵。
        b: k×n 矩阵。
    返回:
        m×n 矩阵节点。
    """
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"矩阵乘法维度不匹配: {a.shape} × {b.shape}")
    a_val, b_val = a.data, b.data

    def _backward(g: np.ndarray):
        return g @ b_val.T, a_val.T @ g

    return _make(a_val @ b_val, (a, b), _backward)


def transpose(a: Node) -> Node:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def rowsoftmax(a: Node) -> Node:
    """
    函数: rowsoftmax
    作用: 按行 softmax，先减去行最大值保证数值稳定；全等行得到均匀分布。
    参数:
        a: 非空矩阵。
    返回:
        每行和为 1 的矩阵节点。
    """
    if a.data.size == 0:
        raise ShapeError("rowsoftmax 输入为空")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (a,), _backward)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # 负半轴用 exp(x)/(1+exp(x))，避免 exp(-x) 溢出
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def elementwise(a: Node, kind: str, b: Optional[Node] = None, alpha: float = 1.0) -> Node:
    """
    函数: elementwise
    作用: 逐元素运算。add 允许 b 为 1×n 行向量并按行广播（偏置）。
    参数:
        a: 输入矩阵。
        kind: relu / sigmoid / add / hadamard / scale。
        b: 二元运算的第二个操作数。
        alpha: scale 的系数。
    返回:
        结果节点。
    """
    if kind not in _ELEMENTWISE_KINDS:
        raise ValueError(f"不支持的逐元素运算: {kind}")

    if kind == "relu":
        mask = a.data > 0
        return _make(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * mask,))

    if kind == "sigmoid":
        s = stable_sigmoid(a.data)
        return _make(s, (a,), lambda g: (g * s * (1.0 - s),))

    if kind == "scale":
        return _make(a.data * alpha, (a,), lambda g: (g * alpha,))

    if b is None:
        raise ShapeError(f"{kind} 需要两个操作数")

    if kind == "add":
        if a.shape == b.shape:
            return _make(a.data + b.data, (a, b), lambda g: (g, g))
        if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
            return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
        raise ShapeError(f"加法形状不匹配: {a.shape} + {b.shape}")

    if a.shape != b.shape:
        raise ShapeError(f"逐元素乘形状不匹配: {a.shape} ⊙ {b.shape}")
    a_val, b_val = a.data, b.data
    return _make(a_val * b_val, (a, b), lambda g: (g * b_val, g * a_val))


def relu(a: Node) -> Node:
    return elementwise(a, "relu")


def sigmoid(a: Node) -> Node:
    return elementwise(a, "sigmoid")


def add(a: Node, b: Node) -> Node:
    return elementwise(a, "add", b)


def hadamard(a: Node, b: Node) -> Node:
    return elementwise(a, "hadamard", b)


def scale(a: Node, alpha: float) -> Node:
    return elementwise(a, "scale", alpha=alpha)


def total(nodes: Sequence[Node]) -> Node:
    """按给定顺序逐个相加，保证归约顺序固定。"""
    if not nodes:
        raise ShapeError("total 需要至少一个节点")
    acc = nodes[0]
    for node in nodes[1:]:
        acc = add(acc, node)
    return acc


def mean_rows(a: Node) -> Node:
    m = a.shape[0]
    if m == 0:
        raise ShapeError("mean_rows 输入没有行")
    cols = a.shape[1]
    return _make(a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / m, (m, cols)).copy(),))


def stack_rows(nodes: Sequence[Node]) -> Node:
    """把若干 1×n 行向量按顺序叠成 m×n 矩阵。"""
    if not nodes:
        raise ShapeError("stack_rows 需要至少一个节点")
    sizes = [n.shape[0] for n in nodes]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=0))

    return _make(np.vstack([n.data for n in nodes]), tuple(nodes), _backward)


def concat_cols(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ShapeError("concat_cols 需要至少一个节点")
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError(f"列拼接行数不一致: {[n.shape for n in nodes]}")
    bounds = np.cumsum([n.shape[1] for n in nodes])[:-1]

    def _backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=1))

    return _make(np.hstack([n.data for n in nodes]), tuple(nodes), _backward)


def fill_rows(base: Node, mask: np.ndarray, row: Node) -> Node:
    """
    函数: fill_rows
    作用: 把 base 中 mask 为真的行整行替换为 row；未选中的行逐位保持不变。
    参数:
        base: m×n 矩阵。
        mask: 长度 m 的布尔向量。
        row: 1×n 行向量。
    返回:
        替换后的矩阵节点；row 的梯度为所有被替换行梯度之和。
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != base.shape[0] or row.shape != (1, base.shape[1]):
        raise ShapeError(f"fill_rows 形状不匹配: base {base.shape}, mask {mask.shape}, row {row.shape}")
    out = base.data.copy()
    out[mask] = row.data[0]
    keep = (~mask).reshape(-1, 1)

    def _backward(g: np.ndarray):
        return g * keep, g[mask].sum(axis=0, keepdims=True)

    return _make(out, (base, row), _backward)


def bce_with_logits(z: Node, target: np.ndarray) -> Node:
    """
    函数: bce_with_logits
    作用: 以 logit 形式计算平均二元交叉熵 mean(max(z,0) - z·t + log(1+exp(-|z|)))。
    参数:
        z: 1×L logit。
        target: 长度 L 的 0/1 目标。
    返回:
        1×1 损失节点。
    """
    t = np.asarray(target, dtype=z.data.dtype).reshape(z.shape)
    x = z.data
    n = x.size
    value = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()

    def _backward(g: np.ndarray):
        return (g.reshape(1, 1) * (stable_sigmoid(x) - t) / n,)

    return _make(np.array([[value]], dtype=x.dtype), (z,), _backward)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(z: Node, target: np.ndarray) -> Node:
    """类别交叉熵 -Σ t·log softmax(z)，t 为 1×C 的概率分布。"""
    t = np.asarray(target, dtype=z.data.dtype).reshape(z.shape)
    logp = log_softmax_rows(z.data)
    value = -(t * logp).sum()
    probs = np.exp(logp)
    t_sum = t.sum()

    def _backward(g: np.ndarray):
        return (g.reshape(1, 1) * (probs * t_sum - t),)

    return _make(np.array([[value]], dtype=z.data.dtype), (z,), _backward)


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool


def relative_error(analytic: float, numeric: float, eps: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), eps)


def grad_check(loss_fn: Callable[[], Node],
               params: Iterable[Parameter],
               step: float = 1e-5,
               tolerance: float = 1e-4,
               max_coords: int = 128,
               seed: int = 0) -> List[GradCheckReport]:
    """
    函数: grad_check
    作用: 中心差分校验解析梯度。参数元素较多时随机抽取 max_coords 个坐标（不少于 64）。
    参数:
        loss_fn: 无参函数，每次调用重新建图并返回 1×1 损失；必须是确定性的。
        params: 需要检查的参数。
        step: 差分步长。
        tolerance: 相对误差阈值。
        max_coords: 每个参数最多检查的坐标数。
        seed: 抽样坐标所用的随机种子。
    返回:
        每个参数一条 GradCheckReport。
    """
    params = list(params)
    rng = np.random.default_rng(seed)
    sample = max(64, int(max_coords))

    for p in params:
        p.zero_grad()
    try:
        loss_fn().backward()
    except NumericError:
        return [GradCheckReport(p.name, float("inf"), tolerance, False) for p in params]
    analytic = {id(p): p.grad.copy() for p in params}

    def _value() -> float:
        v = loss_fn().item()
        if not np.isfinite(v):
            raise NumericError("损失非有限")
        return v

    reports: List[GradCheckReport] = []
    for p in params:
        flat = p.data.reshape(-1)
        size = flat.size
        coords = np.arange(size) if size <= sample else np.sort(rng.choice(size, sample, replace=False))
        worst = 0.0
        failed = False
        for idx in coords:
            orig = flat[idx]
            try:
                flat[idx] = orig + step
                plus = _value()
                flat[idx] = orig - step
                minus = _value()
            except NumericError:
                failed = True
                break
            finally:
                flat[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, relative_error(float(analytic[id(p)].reshape(-1)[idx]), numeric))
        if failed:
            reports.append(GradCheckReport(p.name, float("inf"), tolerance, False))
        else:
            reports.append(GradCheckReport(p.name, worst, tolerance, worst < tolerance))
    for p in params:
        p.zero_grad()
    return reports


def derive_seed(seed: int, *tags: object) -> int:
    """由基础种子与若干标签派生子种子，标签经 crc32 哈希，跨进程稳定。"""
    words = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(tag).encode("utf-8")) for tag in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])
