"""Figure rendering for the report paths: training curves, evaluation
summaries, and rollout trajectories, saved as PNG next to the delimited
outputs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def training_curves(rows: list[dict], path):
    """Reward / success / envelope curves from tracker log rows."""
    if not rows:
        return
    it = [r["iteration"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(it, [r["mean_total_reward"] for r in rows], lw=1.2)
    axes[0].set_title("mean total reward")
    axes[1].plot(it, [r["success_rate"] for r in rows], lw=1.2, color="tab:green")
    axes[1].set_ylim(-0.02, 1.02)
    axes[1].set_title("training success rate")
    axes[2].plot(it, [r["kappa_mean"] for r in rows], lw=1.2, color="tab:red")
    axes[2].set_title("mean envelope threshold")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def distill_curves(rows: list[dict], path):
    if not rows:
        return
    it = [r["iteration"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(it, [r["L_rec"] for r in rows], lw=1.2)
    axes[0].set_yscale("log")
    axes[0].set_title("action reconstruction loss")
    axes[1].plot(it, [r["L_KL"] for r in rows], lw=1.2, color="tab:orange", label="KL")
    ax1b = axes[1].twinx()
    ax1b.plot(it, [r["beta"] for r in rows], lw=1.0, color="tab:gray", ls="--", label="beta")
    axes[1].set_title("latent regularization")
    axes[2].plot(it, [r["student_success_rate"] for r in rows], lw=1.2, color="tab:green")
    axes[2].set_ylim(-0.02, 1.02)
    axes[2].set_title("student success rate")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def eval_report_figure(report, path):
    """Per-clip success bars and error summaries for an EvalReport."""
    rows = report.per_clip
    if not rows:
        return
    names = [r["clip"] for r in rows]
    x = np.arange(len(names))
    fig, axes = plt.subplots(2, 1, figsize=(max(6, 0.45 * len(names)), 6), sharex=True)
    axes[0].bar(x, [r["success_rate"] for r in rows], color="tab:green", alpha=0.8)
    axes[0].axhline(report.aggregate.get("success_rate", 0.0), color="k", lw=1, ls="--",
                    label=f"mean {report.aggregate.get('success_rate', 0.0):.2f}")
    axes[0].set_ylabel("success rate")
    axes[0].set_ylim(0, 1.05)
    axes[0].legend(loc="upper right", fontsize=8)
    axes[1].bar(x - 0.2, [r["t_err_all_frames"] * 100 for r in rows], width=0.4,
                label="T_err (cm, all frames)")
    axes[1].bar(x + 0.2, [r["e_finger_all_frames"] * 100 for r in rows], width=0.4,
                label="E_finger (cm, all frames)")
    axes[1].set_ylabel("error (cm)")
    axes[1].legend(fontsize=8)
    axes[1].set_xticks(x)
    axes[1].set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    for ax in axes:
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def rollout_figure(record, clip, path):
    """Object/wrist trajectories against the reference plus a contact strip."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4),
                             gridspec_kw={"width_ratios": [2.2, 1]})
    ax = axes[0]
    fr = record.frames
    ax.plot(clip.obj[:, 0], clip.obj[:, 1], "-", color="tab:gray", lw=1.5,
            label="reference object")
    ax.plot(record.obj[:, 0], record.obj[:, 1], "-", color="tab:blue", lw=1.5,
            label="rollout object")
    if record.wrist is not None:
        ax.plot(record.wrist[:, 0], record.wrist[:, 1], "--", color="tab:purple",
                lw=1.0, label="wrist")
    ax.plot(clip.obj[fr[0], 0], clip.obj[fr[0], 1], "o", color="k", ms=5)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    ax.set_title(f"{record.clip_name}: object path")
    ax2 = axes[1]
    t_err = np.linalg.norm(record.obj[:, :2] - clip.obj[fr, :2], axis=1)
    ax2.plot(fr, t_err * 100, lw=1.2, label="T_err (cm)")
    ax2.fill_between(fr, 0, record.contact_any * np.max(t_err * 100 + 1e-9),
                     alpha=0.15, color="tab:green", label="contact")
    ax2.set_xlabel("frame")
    ax2.legend(fontsize=8)
    ax2.grid(alpha=0.3)
    ax2.set_title("tracking error / contact")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_all(out_dir: str, **named):
    os.makedirs(out_dir, exist_ok=True)
    for name, (fn, args) in named.items():
        fn(*args, os.path.join(out_dir, name))
