# -*- coding: utf-8 -*-
"""
文件: scripts/quick_sanity.py
描述: 桌面规模的端到端检查（不经过命令行解析）：合成语料 → 梯度校验 → 预训练 → 随机/预训练初始化微调对比。
"""

import sys
import time


def main():
    """
    函数: main
    作用: 依次运行各阶段并逐行打印摘要，便于肉眼确认整条流水线可用。
    参数:
        无。
    返回:
        无（打印检查输出）。
    """
    sys.path.append("src")
    from core.dataio import synth_labeled_corpus, synth_pretrain_corpus
    from core.mfm import MaskingConfig, PretrainConfig, gradcheck_mfm, pretrain
    from core.vigat import TRANSFER_ROWS, VigatConfig, format_study_table, run_study

    start = time.perf_counter()
    reports = gradcheck_mfm(seed=1)
    worst = max(r.max_rel_error for r in reports)
    print("GRAD:", "ok" if all(r.passed for r in reports) else "FAIL", f"max_rel_error={worst:.2e}")

    corpus, codebook = synth_pretrain_corpus(64, 5, 8, 32, 4, 16, 64, seed=0)
    cfg = PretrainConfig(epochs=100, milestones=(50,), lr=1e-3, top_r=8, seed=0)
    state, metrics = pretrain(corpus, codebook, cfg, MaskingConfig(0.4, seed=0))
    losses = metrics.column("loss")
    print("PRETRAIN:", f"first={losses[0]:.4f}", f"final={losses[-1]:.4f}",
          f"ratio={losses[-1] / losses[0]:.3f}", f"{time.perf_counter() - start:.0f}s")

    train = synth_labeled_corpus(80, 4, 5, 8, 32, seed=1)
    test = synth_labeled_corpus(40, 4, 5, 8, 32, seed=2)
    base = VigatConfig(num_classes=4, epochs=30, milestones=(20,), lr=1e-3, seed=0)
    local_rows = [row for row in TRANSFER_ROWS if not row.use_global]
    results = run_study(local_rows, base, train, test, state.to_tensors(), seeds=range(5))
    print("TRANSFER:")
    print(format_study_table(results))
    print("GAP:", f"{results[1].mean - results[0].mean:.2f}", f"{time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
