"""Figure rendering for the train and eval report paths.

Every command that writes delimited records also drops PNG figures next to
them: loss/LR curves for training runs, success bars with binomial intervals
and example trajectories for evaluations.
"""

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def render_train_figures(metrics_path, out_dir):
    """Loss curves, gradient norms, and the LR schedule from a metrics log."""
    records = []
    with open(metrics_path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    if not records:
        return []
    steps = [r["step"] for r in records]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))

    ax = axes[0]
    ax.plot(steps, [r["l_total"] for r in records], label="total", lw=1.0)
    ax.plot(steps, [r["l_ar"] for r in records], label="ar", lw=0.8, alpha=0.8)
    fm = [(r["step"], r["l_fm"]) for r in records if r["l_fm"] is not None]
    if fm:
        ax.plot([s for s, _ in fm], [v for _, v in fm], label="fm",
                lw=0.8, alpha=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title("losses")
    ax.legend(fontsize=8)

    ax = axes[1]
    ax.plot(steps, [r["grad_norm_vlm"] for r in records], label="vlm", lw=0.8)
    ax.plot(steps, [r["grad_norm_expert"] for r in records], label="expert",
            lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title("gradient norms")
    ax.legend(fontsize=8)

    ax = axes[2]
    ax.plot(steps, [r["lr"] for r in records], lw=1.0)
    ax.set_xlabel("step")
    ax.set_title("learning rate")

    fig.tight_layout()
    path = os.path.join(out_dir, "training_curves.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def render_eval_figures(reports, out_dir):
    """Success bars with 95% intervals per mode plus sample trajectories."""
    paths = []
    labels = list(reports)
    rates = [reports[k]["success_rate"] for k in labels]
    los = [reports[k]["success_rate"] - reports[k]["interval_95"][0]
           for k in labels]
    his = [reports[k]["interval_95"][1] - reports[k]["success_rate"]
           for k in labels]
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    ax.bar(range(len(labels)), rates, yerr=[los, his], capsize=4,
           color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    ax.set_title("closed-loop evaluation")
    fig.tight_layout()
    path = os.path.join(out_dir, "success_rates.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    first = reports[labels[0]]
    episodes = first.get("episodes", [])[:9]
    if episodes and "trail" in episodes[0]:
        n = len(episodes)
        cols = 3
        rows = (n + cols - 1) // cols
        fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows),
                                 squeeze=False)
        for i, ep in enumerate(episodes):
            ax = axes[i // cols][i % cols]
            trail = ep["trail"]
            ax.plot([p[0] for p in trail], [p[1] for p in trail],
                    "-", lw=0.8, color="#4878a8")
            ax.plot(*trail[0], "o", color="#4878a8", ms=4)
            ax.plot(*ep["block"], "s", color="#c23b22", ms=6)
            circ = plt.Circle(ep["goal"], 0.08, fill=False, color="#2a6f2a")
            ax.add_patch(circ)
            ax.set_xlim(0, 1)
            ax.set_ylim(1, 0)
            ax.set_aspect("equal")
            ax.set_title(f"ep {ep['episode']}: "
                         f"{'ok' if ep['success'] else 'fail'}", fontsize=8)
            ax.tick_params(labelsize=6)
        for j in range(len(episodes), rows * cols):
            axes[j // cols][j % cols].axis("off")
        fig.tight_layout()
        path = os.path.join(out_dir, f"trajectories_{labels[0]}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
