# -*- coding: utf-8 -*-
"""
文件: src/core/errors.py
描述: 统一的异常类型。全部继承 ValueError，命令行入口据此映射退出码。
"""

from __future__ import annotations

from typing import Optional


class MfmError(ValueError):
    """
    类: MfmError
    作用: 本项目所有领域错误的基类。
    """

    exit_code = 2


class ShapeError(MfmError):
    """维度不匹配。"""

    exit_code = 3


class DataFormatError(MfmError):
    """
    类: DataFormatError
    作用: 二进制容器、码本、检查点或清单文件损坏；可携带出错的字节偏移。
    """

    exit_code = 2

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        if offset is not None:
            message = f"{message}（偏移 {offset}）"
        super().__init__(message)
        self.offset = offset


class ConfigError(MfmError):
    """配置项或命令行参数非法。"""

    exit_code = 1


class NumericError(MfmError):
    """损失或梯度出现 NaN/Inf。"""

    exit_code = 3
