# -*- coding: utf-8 -*-
"""
文件: src/app.py
描述: 命令行入口。子命令 synth-gen / pretrain / finetune / evaluate / gradcheck / ablate / transfer，
      配置优先级为 命令行参数 > --config 文件 > MFM_SEED > 默认值；异常统一映射为退出码。
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from core import numerics as nx
from core.dataio import (
    VideoFeatures,
    load_corpus,
    save_corpus,
    select_frames,
    synth_labeled_corpus,
    synth_pretrain_corpus,
)
from core.errors import ConfigError, DataFormatError, MfmError
from core.mfm import gradcheck_mfm, load_train_state, pretrain
from core.run_log import write_manifest
from core.settings_service import (
    SettingsService,
    build_masking_config,
    build_pretrain_config,
    build_vigat_config,
    config_items,
    parse_bool,
)
from core.tokenizer import load_codebook, save_codebook
from core.vigat import (
    ABLATION_ROWS,
    BLOCK_MODES,
    TRANSFER_ROWS,
    evaluate,
    finetune,
    format_study_table,
    init_from_pretrained,
    load_model,
    run_study,
    save_model,
)


logger = logging.getLogger("mfm")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """参数解析失败。"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"不是逗号分隔的整数列表: {text}") from None


def _bool(text: str) -> bool:
    value = parse_bool(text)
    if value is None:
        raise argparse.ArgumentTypeError(f"不是布尔值: {text}")
    return value


def _checkpoint(text: str) -> Optional[str]:
    return None if text.strip().lower() == "none" else text


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value 配置文件")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1, help="只读评估的工作线程上限；1 为参考路径")
    p.add_argument("--precision", choices=("float64", "float32"), default="float64")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")


def _add_schedule(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--milestones", type=_int_list, default=None)
    p.add_argument("--lr-decay", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)


def _add_vigat(p: argparse.ArgumentParser) -> None:
    _add_schedule(p)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--attention-dim", type=int, default=None)
    p.add_argument("--global", dest="use_global", type=_bool, default=None, metavar="BOOL")
    p.add_argument("--no-global", dest="use_global", action="store_const", const=False)
    p.add_argument("--omega1", choices=BLOCK_MODES, default=None)
    p.add_argument("--omega2", "--init-w2", dest="omega2", choices=BLOCK_MODES, default=None)
    p.add_argument("--omega3", "--init-w3", dest="omega3", choices=BLOCK_MODES, default=None)
    p.add_argument("--share-23", dest="weight_sharing_23", type=_bool, default=None, metavar="BOOL")
    p.add_argument("--share", dest="weight_sharing_23", action="store_const", const=True)
    p.add_argument("--frames", type=int, default=None, help="每段视频等间隔取 N 帧")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfm", description="遮挡特征建模预训练与下游事件识别")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("synth-gen", help="生成合成语料")
    _add_common(gen)
    gen.add_argument("kind", choices=("pretrain", "labeled"))
    gen.add_argument("--out", required=True)
    gen.add_argument("--videos", type=int, default=64)
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--frames", type=int, default=5)
    gen.add_argument("--objects", type=int, default=8)
    gen.add_argument("--feature-dim", type=int, default=32)
    gen.add_argument("--patches", type=int, default=4)
    gen.add_argument("--patch-dim", type=int, default=16)
    gen.add_argument("--vocab", type=int, default=64)
    gen.add_argument("--world-seed", type=int, default=0)
    gen.add_argument("--with-patches", action="store_true", help="带标签语料也写出 patch 嵌入")

    pre = sub.add_parser("pretrain", help="MFM 预训练")
    _add_common(pre)
    _add_schedule(pre)
    pre.add_argument("--corpus", required=True)
    pre.add_argument("--codebook", required=True)
    pre.add_argument("--out", required=True, help="检查点路径；指标与运行清单写在同一目录")
    pre.add_argument("--gamma", type=float, default=None)
    pre.add_argument("--top-r", type=int, default=None)
    pre.add_argument("--attention-dim", type=int, default=None)
    pre.add_argument("--nonlinearity", choices=("sigmoid", "softmax"), default=None)
    pre.add_argument("--checkpoint-every", type=int, default=None)
    pre.add_argument("--resume", default=None, help="从已有检查点续训")

    fin = sub.add_parser("finetune", help="下游微调")
    _add_common(fin)
    _add_vigat(fin)
    fin.add_argument("--train", required=True)
    fin.add_argument("--val", default=None)
    fin.add_argument("--ckpt", type=_checkpoint, default=None, help="ω_t 检查点路径，或 none")
    fin.add_argument("--out", required=True)

    ev = sub.add_parser("evaluate", help="计算 top-1 准确率")
    _add_common(ev)
    ev.add_argument("--model", required=True)
    ev.add_argument("--test", required=True)
    ev.add_argument("--frames", type=int, default=None)

    gc = sub.add_parser("gradcheck", help="在极小实例上校验 MFM 梯度")
    _add_common(gc)
    gc.add_argument("--nonlinearity", choices=("sigmoid", "softmax"), default="sigmoid")

    for name, help_text in (("ablate", "六种局部分支配置的消融"), ("transfer", "随机初始化与预训练初始化对比")):
        st = sub.add_parser(name, help=help_text)
        _add_common(st)
        _add_vigat(st)
        st.add_argument("--train", required=True)
        st.add_argument("--test", required=True)
        st.add_argument("--ckpt", type=_checkpoint, required=True)
        st.add_argument("--seeds", type=int, default=1 if name == "ablate" else 5)
        st.add_argument("--out", default=None)
    return parser


def _setup_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else (logging.WARNING if args.quiet else logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def _prepare_out(path: Optional[str]) -> Optional[str]:
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def _load(directory: str, frames: Optional[int] = None, feature_dim: Optional[int] = None) -> List[VideoFeatures]:
    corpus = load_corpus(directory)
    if feature_dim is not None:
        for video in corpus:
            if video.feature_dim != feature_dim:
                raise DataFormatError(f"视频 {video.id} 的 F={video.feature_dim} 与期望 F={feature_dim} 不一致")
    if frames is None:
        return corpus
    if frames < 1:
        raise ConfigError(f"--frames 必须 ≥ 1，当前 {frames}")
    return [select_frames(video, frames) for video in corpus]


def _checkpoint_target(path: str) -> str:
    # --out 指向已存在的目录时，检查点写为其中的 omega_t.mfmk
    if os.path.isdir(path):
        return os.path.join(path, "omega_t.mfmk")
    return path


def _vigat_overrides(args: argparse.Namespace, seed: Optional[int]) -> Dict[str, Any]:
    return {
        "num_classes": args.classes,
        "hidden": args.hidden,
        "attention_dim": args.attention_dim,
        "use_global": args.use_global,
        "omega1_mode": args.omega1,
        "omega2_mode": args.omega2,
        "omega3_mode": args.omega3,
        "weight_sharing_23": args.weight_sharing_23,
        "epochs": args.epochs,
        "lr": args.lr,
        "milestones": tuple(args.milestones) if args.milestones is not None else None,
        "lr_decay": args.lr_decay,
        "batch_size": args.batch_size,
        "seed": seed,
    }


def cmd_synth_gen(args: argparse.Namespace, service: SettingsService) -> int:
    out = _prepare_out(args.out)
    seed = args.seed if args.seed is not None else service.seed(0)
    if args.kind == "pretrain":
        videos, codebook = synth_pretrain_corpus(
            args.videos, args.frames, args.objects, args.feature_dim, args.patches, args.patch_dim,
            args.vocab, seed, world_seed=args.world_seed,
        )
        save_codebook(os.path.join(out, "codebook.mfmc"), codebook)
    else:
        videos = synth_labeled_corpus(
            args.videos, args.classes, args.frames, args.objects, args.feature_dim, seed,
            vocab_size=args.vocab, patches=args.patches, patch_dim=args.patch_dim,
            world_seed=args.world_seed, with_patches=args.with_patches,
        )
    save_corpus(out, videos)
    write_manifest(os.path.join(out, "manifest.txt"), {
        "command": f"synth-gen {args.kind}", "seed": seed, "videos": args.videos, "classes": args.classes,
        "frames": args.frames, "objects": args.objects, "feature_dim": args.feature_dim,
        "patches": args.patches, "patch_dim": args.patch_dim, "vocab": args.vocab, "world_seed": args.world_seed,
    })
    print(f"synth-gen {args.kind}: {len(videos)} 段视频写入 {out}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace, service: SettingsService) -> int:
    ckpt_path = _checkpoint_target(args.out)
    out = _prepare_out(os.path.dirname(os.path.abspath(ckpt_path)))
    cfg = build_pretrain_config(service, {
        "epochs": args.epochs, "lr": args.lr, "lr_decay": args.lr_decay, "batch_size": args.batch_size,
        "milestones": tuple(args.milestones) if args.milestones is not None else None,
        "seed": args.seed, "top_r": args.top_r, "attention_dim": args.attention_dim,
        "nonlinearity": args.nonlinearity, "checkpoint_every": args.checkpoint_every,
        "checkpoint_path": ckpt_path,
    })
    mask_cfg = build_masking_config(service, {"gamma": args.gamma, "seed": cfg.seed})
    codebook = load_codebook(args.codebook)
    corpus = load_corpus(args.corpus)
    resume = load_train_state(args.resume) if args.resume else None
    write_manifest(os.path.join(out, "manifest.txt"), {
        "command": "pretrain", "corpus": args.corpus, "codebook": args.codebook, "resume": args.resume,
        "precision": args.precision, **config_items("pretrain", cfg), **config_items("masking", mask_cfg),
    })
    state, metrics = pretrain(corpus, codebook, cfg, mask_cfg, resume=resume)
    metrics.write(os.path.join(out, "metrics.txt"))
    print(f"pretrain: {state.epoch} 轮完成，final_loss={metrics.summary['final_loss']:.6f}，检查点 {ckpt_path}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace, service: SettingsService) -> int:
    out = _prepare_out(args.out)
    cfg = build_vigat_config(service, _vigat_overrides(args, args.seed))
    train = _load(args.train, args.frames)
    if not train:
        raise DataFormatError(f"训练语料为空: {args.train}")
    val = _load(args.val, args.frames, train[0].feature_dim) if args.val else None
    model = init_from_pretrained(cfg, train[0].feature_dim, args.ckpt)
    write_manifest(os.path.join(out, "manifest.txt"), {
        "command": "finetune", "train": args.train, "val": args.val, "ckpt": args.ckpt, "frames": args.frames,
        "precision": args.precision, **config_items("vigat", cfg),
    })
    model, metrics = finetune(cfg, model, train, val)
    save_model(os.path.join(out, "model.mfmk"), model)
    metrics.write(os.path.join(out, "metrics.txt"))
    print(f"finetune: {cfg.epochs} 轮完成，final_loss={metrics.summary['final_loss']:.6f}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, service: SettingsService) -> int:
    model = load_model(args.model)
    corpus = _load(args.test, args.frames, model.feature_dim)
    top1 = evaluate(model, corpus, threads=args.threads)
    print(f"top1={top1:.2f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, service: SettingsService) -> int:
    if args.precision != "float64":
        raise ConfigError("gradcheck 需要 float64 精度")
    seed = args.seed if args.seed is not None else service.seed(0)
    reports = gradcheck_mfm(seed=seed, nonlinearity=args.nonlinearity)
    for report in reports:
        print(f"param={report.name} max_rel_error={report.max_rel_error:.3e} "
              f"passed={'true' if report.passed else 'false'}")
    if all(r.passed for r in reports):
        return EXIT_OK
    logger.error("梯度校验未通过: %s", ", ".join(r.name for r in reports if not r.passed))
    return EXIT_NUMERIC


def cmd_study(args: argparse.Namespace, service: SettingsService) -> int:
    rows = ABLATION_ROWS if args.command == "ablate" else TRANSFER_ROWS
    if args.seeds < 1:
        raise ConfigError(f"--seeds 必须 ≥ 1，当前 {args.seeds}")
    base = build_vigat_config(service, _vigat_overrides(args, args.seed))
    train = _load(args.train, args.frames)
    test = _load(args.test, args.frames, train[0].feature_dim if train else None)
    seeds = [base.seed + i for i in range(args.seeds)]
    results = run_study(rows, base, train, test, args.ckpt, seeds=seeds, threads=args.threads)
    table = format_study_table(results)
    print(table)
    if args.command == "transfer":
        # 第 0/2 行为随机初始化，第 1/3 行为预训练初始化
        gaps = [results[1].mean - results[0].mean, results[3].mean - results[2].mean]
        mean_gap = round(sum(gaps) / len(gaps), 2)
        print(f"gap_local={gaps[0]:.2f} gap_full={gaps[1]:.2f} mean_gap={mean_gap:.2f}")
        if mean_gap < 0:
            logger.warning("预训练初始化的平均准确率低于随机初始化: %.2f", mean_gap)
    out = _prepare_out(args.out)
    if out:
        with open(os.path.join(out, f"{args.command}.txt"), "w", encoding="utf-8") as f:
            f.write(table + "\n")
        write_manifest(os.path.join(out, "manifest.txt"), {
            "command": args.command, "train": args.train, "test": args.test, "ckpt": args.ckpt,
            "seeds": seeds, "frames": args.frames, "precision": args.precision, **config_items("vigat", base),
        })
    return EXIT_OK


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_study,
    "transfer": cmd_study,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, MfmError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_DATA
    return EXIT_USAGE


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    函数: run
    作用: 解析参数并执行子命令；任何错误都以一行诊断写到标准错误并返回非零退出码。
    参数:
        argv: 参数列表，缺省取 sys.argv[1:]。
    返回:
        退出码：0 成功，1 用法/配置，2 数据，3 数值。
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"错误: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args)
    try:
        nx.set_precision(args.precision)
        service = SettingsService(args.config)
        return COMMANDS[args.command](args, service)
    except (MfmError, OSError, ValueError) as exc:
        print(f"错误: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    finally:
        nx.set_precision("float64")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
