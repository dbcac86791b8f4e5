# -*- coding: utf-8 -*-
"""
文件: src/core/settings_service.py
描述: QSettings 轻量封装：读取 key=value 配置文件，统一键名、类型转换与范围校验，
      并按“命令行参数 > 配置文件 > 环境变量 MFM_SEED > 内置默认值”合成运行配置。
"""

from __future__ import annotations

import os
from dataclasses import fields
from typing import Any, Dict, List, Mapping, Optional, Sequence

from PySide6.QtCore import QSettings

from core.errors import ConfigError, MfmError
from core.mfm import MaskingConfig, PretrainConfig
from core.vigat import VigatConfig


SEED_ENV = "MFM_SEED"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_bool(text: str) -> Optional[bool]:
    """true/yes/on/1 与 false/no/off/0（不区分大小写）；其他取值返回 None。"""
    text = text.strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    return None


class SettingsService:
    """
    类: SettingsService
    作用: 提供配置项的统一读取入口。键可写在 [pretrain]/[finetune] 等分组下，也可不带分组；
          分组内的键优先。
    """

    def __init__(self, path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None) -> None:
        self.path = path
        self._env = os.environ if environ is None else environ
        self._settings: Optional[QSettings] = None
        if path:
            if not os.path.isfile(path):
                raise ConfigError(f"配置文件不存在: {path}")
            settings = QSettings(path, QSettings.Format.IniFormat)
            if settings.status() != QSettings.Status.NoError:
                raise ConfigError(f"配置文件无法解析: {path}")
            self._settings = settings

    def has(self, key: str, section: Optional[str] = None) -> bool:
        return self._raw(key, section) is not None

    def _raw(self, key: str, section: Optional[str]) -> Any:
        if self._settings is None:
            return None
        candidates = (f"{section}/{key}", key) if section else (key,)
        for full in candidates:
            if self._settings.contains(full):
                return self._settings.value(full)
        return None

    @staticmethod
    def _text(key: str, raw: Any) -> str:
        if isinstance(raw, (list, tuple)):
            raise ConfigError(f"配置项 {key} 应为单个值，收到列表 {raw}")
        return str(raw).strip()

    def get_str(self, key: str, default: Optional[str], section: Optional[str] = None,
                choices: Optional[Sequence[str]] = None) -> Optional[str]:
        raw = self._raw(key, section)
        value = default if raw is None else self._text(key, raw)
        if choices is not None and value is not None and value not in choices:
            raise ConfigError(f"配置项 {key}={value} 不在可选值 {tuple(choices)} 中")
        return value

    def get_int(self, key: str, default: Optional[int], section: Optional[str] = None,
                minimum: Optional[int] = None) -> Optional[int]:
        raw = self._raw(key, section)
        if raw is None:
            return default
        text = self._text(key, raw)
        if text.lower() in ("", "none"):
            return None
        try:
            value = int(text)
        except ValueError:
            raise ConfigError(f"配置项 {key} 不是整数: {text}") from None
        if minimum is not None and value < minimum:
            raise ConfigError(f"配置项 {key}={value} 小于下限 {minimum}")
        return value

    def get_float(self, key: str, default: float, section: Optional[str] = None) -> float:
        raw = self._raw(key, section)
        if raw is None:
            return default
        text = self._text(key, raw)
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"配置项 {key} 不是数值: {text}") from None

    def get_bool(self, key: str, default: bool, section: Optional[str] = None) -> bool:
        raw = self._raw(key, section)
        if raw is None:
            return default
        if isinstance(raw, bool):
            return raw
        text = self._text(key, raw)
        value = parse_bool(text)
        if value is not None:
            return value
        raise ConfigError(f"配置项 {key} 不是布尔值: {text}")

    def get_int_list(self, key: str, default: Sequence[int], section: Optional[str] = None) -> List[int]:
        """IniFormat 会把 "50,100" 拆成字符串列表；单值或空串同样接受。"""
        raw = self._raw(key, section)
        if raw is None:
            return list(default)
        items = raw if isinstance(raw, (list, tuple)) else str(raw).split(",")
        try:
            return [int(str(item).strip()) for item in items if str(item).strip()]
        except ValueError:
            raise ConfigError(f"配置项 {key} 不是整数列表: {raw}") from None

    def seed(self, default: int = 0, section: Optional[str] = None) -> int:
        value = self.get_int("seed", None, section)
        if value is not None:
            return value
        env = self._env.get(SEED_ENV)
        if env:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"环境变量 {SEED_ENV} 不是整数: {env}") from None
        return default


def _merge(defaults: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(defaults)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _fit_milestones(values: Dict[str, Any], explicit: bool) -> Dict[str, Any]:
    # 未显式给出里程碑时，默认里程碑中超出 epochs 的部分丢弃
    if not explicit:
        values["milestones"] = tuple(m for m in values["milestones"] if m <= values["epochs"])
    return values


def _build(cls, values: Mapping[str, Any]):
    known = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in values.items() if k in known})
    except MfmError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__} 配置无效: {exc}") from None


def build_pretrain_config(service: SettingsService, overrides: Mapping[str, Any] = ()) -> PretrainConfig:
    """
    函数: build_pretrain_config
    作用: 从 [pretrain] 分组与命令行覆盖项合成预训练配置。
    参数:
        service: 配置服务。
        overrides: 命令行中显式给出的值（None 表示未给出）。
    返回:
        PretrainConfig。
    """
    base = PretrainConfig()
    s = "pretrain"
    values = {
        "epochs": service.get_int("epochs", base.epochs, s, minimum=1),
        "lr": service.get_float("lr", base.lr, s),
        "milestones": tuple(service.get_int_list("milestones", base.milestones, s)),
        "lr_decay": service.get_float("lr_decay", base.lr_decay, s),
        "batch_size": service.get_int("batch_size", base.batch_size, s, minimum=1),
        "seed": service.seed(base.seed, s),
        "top_r": service.get_int("top_r", base.top_r, s, minimum=1),
        "attention_dim": service.get_int("attention_dim", base.attention_dim, s, minimum=1),
        "nonlinearity": service.get_str("nonlinearity", base.nonlinearity, s, choices=("sigmoid", "softmax")),
        "checkpoint_every": service.get_int("checkpoint_every", base.checkpoint_every, s, minimum=0),
    }
    overrides = dict(overrides)
    explicit = service.has("milestones", s) or overrides.get("milestones") is not None
    return _build(PretrainConfig, _fit_milestones(_merge(values, overrides), explicit))


def build_masking_config(service: SettingsService, overrides: Mapping[str, Any] = ()) -> MaskingConfig:
    base = MaskingConfig()
    values = {
        "gamma": service.get_float("gamma", base.gamma, "pretrain"),
        "seed": service.seed(base.seed, "pretrain"),
    }
    return _build(MaskingConfig, _merge(values, dict(overrides)))


def build_vigat_config(service: SettingsService, overrides: Mapping[str, Any] = ()) -> VigatConfig:
    """
    函数: build_vigat_config
    作用: 从 [finetune] 分组与命令行覆盖项合成下游配置。
    参数:
        service: 配置服务。
        overrides: 命令行中显式给出的值。
    返回:
        VigatConfig。
    """
    base = VigatConfig()
    s = "finetune"
    values = {
        "num_classes": service.get_int("num_classes", base.num_classes, s, minimum=2),
        "use_global": service.get_bool("use_global", base.use_global, s),
        "omega1_mode": service.get_str("omega1_mode", base.omega1_mode, s),
        "omega2_mode": service.get_str("omega2_mode", base.omega2_mode, s),
        "omega3_mode": service.get_str("omega3_mode", base.omega3_mode, s),
        "weight_sharing_23": service.get_bool("weight_sharing_23", base.weight_sharing_23, s),
        "hidden": service.get_int("hidden", base.hidden, s, minimum=1),
        "attention_dim": service.get_int("attention_dim", base.attention_dim, s, minimum=1),
        "epochs": service.get_int("epochs", base.epochs, s, minimum=1),
        "lr": service.get_float("lr", base.lr, s),
        "milestones": tuple(service.get_int_list("milestones", base.milestones, s)),
        "lr_decay": service.get_float("lr_decay", base.lr_decay, s),
        "batch_size": service.get_int("batch_size", base.batch_size, s, minimum=1),
        "seed": service.seed(base.seed, s),
    }
    overrides = dict(overrides)
    explicit = service.has("milestones", s) or overrides.get("milestones") is not None
    return _build(VigatConfig, _fit_milestones(_merge(values, overrides), explicit))


def config_items(prefix: str, cfg: Any) -> Dict[str, Any]:
    """把配置数据类展开为 "prefix.key" 形式，写入运行清单。"""
    return {f"{prefix}.{f.name}": getattr(cfg, f.name) for f in fields(cfg)}
