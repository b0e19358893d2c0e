"""Figures written next to the CSV/JSON outputs of the CLI.

Uses the non-interactive Agg backend; every function saves to ``path`` and
returns it.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(records, path):
    """Per-epoch loss and validation accuracy for one or more runs.

    ``records`` maps a label to a :class:`RunRecord`.
    """
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(7, 2.8))
        for label, rec in records.items():
            epochs = [e["epoch"] + 1 for e in rec.epochs]
            ax_l.plot(epochs, [e["loss"] for e in rec.epochs], label=label)
            acc = [(e["epoch"] + 1, e["val_acc"]) for e in rec.epochs if "val_acc" in e]
            if acc:
                ax_a.plot(*zip(*acc), marker="o", ms=3, label=label)
        ax_l.set(xlabel="epoch", ylabel="training loss")
        ax_a.set(xlabel="epoch", ylabel="validation accuracy")
        ax_l.legend(frameon=False)
        return _save(fig, path)


def embedding_scatter(feats, labels, path, title=None, max_points=3000, seed=0):
    """Scatter of 2-D or 3-D features colored by class (first three dims)."""
    feats = np.asarray(feats)
    labels = np.asarray(labels)
    if len(feats) > max_points:
        keep = np.random.default_rng(seed).choice(len(feats), max_points, replace=False)
        feats, labels = feats[keep], labels[keep]
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(4.2, 3.8))
        if feats.shape[1] >= 3:
            ax = fig.add_subplot(projection="3d")
            sc = ax.scatter(feats[:, 0], feats[:, 1], feats[:, 2], c=labels, cmap="tab10",
                            s=3, vmin=0, vmax=9)
        else:
            ax = fig.add_subplot()
            y = feats[:, 1] if feats.shape[1] > 1 else np.zeros(len(feats))
            sc = ax.scatter(feats[:, 0], y, c=labels, cmap="tab10", s=3, vmin=0, vmax=9)
        fig.colorbar(sc, ax=ax, shrink=0.7, label="class")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def sweep_heatmap(rows, path, value="val_acc"):
    """Validation accuracy over the ``k`` by ``gamma`` grid."""
    ks = sorted({r["k"] for r in rows})
    gammas = sorted({r["gamma"] for r in rows})
    grid = np.full((len(ks), len(gammas)), np.nan)
    for r in rows:
        if r[value] is not None:
            grid[ks.index(r["k"]), gammas.index(r["gamma"])] = r[value]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(gammas) + 2, 0.6 * len(ks) + 1.6))
        im = ax.imshow(grid, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(gammas)), [f"{g:g}" for g in gammas])
        ax.set_yticks(range(len(ks)), [str(k) for k in ks])
        ax.set(xlabel="gamma", ylabel="k")
        for i in range(len(ks)):
            for j in range(len(gammas)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{100 * grid[i, j]:.2f}", ha="center", va="center",
                            color="w", fontsize=7)
        fig.colorbar(im, ax=ax, label=value)
        return _save(fig, path)


def bench_scaling(points, path):
    """Measured bridge time against the analytic op count.

    ``points`` is a list of dicts with ``strategy``, ``ops`` and ``median``.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        for strategy in sorted({p["strategy"] for p in points}):
            sel = sorted((p["ops"], p["median"]) for p in points if p["strategy"] == strategy)
            ax.loglog(*zip(*sel), marker="o", ms=4, label=strategy)
        ax.set(xlabel="analytic op count", ylabel="median seconds")
        ax.legend(frameon=False)
        return _save(fig, path)
