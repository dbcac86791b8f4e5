# -*- coding: utf-8 -*-
"""
文件: src/core/run_log.py
描述: 逐轮指标记录与运行清单。两者都是 UTF-8、一行一条的 key=value 文本，便于 diff。
"""

from __future__ import annotations

import os
import subprocess
from typing import Dict, List, Mapping, Optional


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


class MetricsLog:
    """
    类: MetricsLog
    作用: 保存逐轮记录（epoch 从 1 连续递增）与最终汇总。
    """

    def __init__(self) -> None:
        self.records: List[Dict[str, object]] = []
        self.summary: Dict[str, object] = {}

    def record(self, epoch: int, **fields: object) -> None:
        expected = len(self.records) + 1
        if epoch != expected:
            raise ValueError(f"指标轮次不连续: 期望 {expected}，收到 {epoch}")
        self.records.append({"epoch": int(epoch), **fields})

    def set_summary(self, **fields: object) -> None:
        self.summary.update(fields)

    def column(self, key: str) -> List[object]:
        return [r[key] for r in self.records if key in r]

    def lines(self) -> List[str]:
        out = [" ".join(f"{k}={format_value(v)}" for k, v in r.items()) for r in self.records]
        if self.summary:
            out.append("summary " + " ".join(f"{k}={format_value(v)}" for k, v in self.summary.items()))
        return out

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.lines()) + "\n")


def git_describe(cwd: Optional[str] = None) -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=cwd or os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    text = result.stdout.strip()
    return text if result.returncode == 0 and text else "unknown"


def write_manifest(path: str, config: Mapping[str, object]) -> None:
    """
    函数: write_manifest
    作用: 写出运行清单：全部生效配置按键排序，外加 git_describe。
    参数:
        path: 目标文件。
        config: 生效配置。
    返回:
        无。
    """
    items = dict(config)
    items.setdefault("git_describe", git_describe())
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(items):
            f.write(f"{key}={format_value(items[key])}\n")
