"""Model introspection: attention rollout onto the class token and cosine
similarity of the positional embeddings, with CSV + figure export.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .tensor import Tensor


@dataclass
class RolloutResult:
    weights: np.ndarray  # per input time-window attention mass, sums to 1
    intermediates: list | None = None


def attention_rollout(records, n_special_tokens=1, identity_mix=True, keep_intermediates=False) -> RolloutResult:
    """Propagate head-averaged attention from the input tokens to the class token.

    Per layer: average heads, optionally mix with identity (A' = (A + I)/2) to
    account for residual connections, row-normalize, then multiply
    cumulatively. The class-token row is restricted to patch positions and
    renormalized; special tokens (class and, when present, distillation) are
    dropped from the output.
    """
    records = list(records)
    if not records:
        raise InputError("attention rollout needs at least one layer of records")
    n = records[0].attention.shape[-1]
    rollout = np.eye(n)
    intermediates = [] if keep_intermediates else None
    for rec in records:
        a = rec.attention.mean(axis=0)
        if a.shape != (n, n):
            raise InputError(f"inconsistent token count in layer {rec.layer}: {a.shape}")
        if identity_mix:
            a = 0.5 * a + 0.5 * np.eye(n)
        a = a / a.sum(axis=-1, keepdims=True)
        rollout = a @ rollout
        if intermediates is not None:
            intermediates.append(rollout.copy())
    weights = rollout[0, n_special_tokens:]
    total = weights.sum()
    if total <= 0:
        raise InputError("degenerate rollout: class token carries no patch mass")
    return RolloutResult(weights=weights / total, intermediates=intermediates)


def position_similarity(pos) -> np.ndarray:
    """Pairwise cosine similarity of positional embedding rows."""
    x = pos.data if isinstance(pos, Tensor) else np.asarray(pos)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise InputError("positional embedding has a zero-norm row")
    unit = x / norms[:, None]
    s = unit @ unit.T
    np.fill_diagonal(s, 1.0)
    return s


# -- export -----------------------------------------------------------------

def write_rollout_csv(path, result: RolloutResult, stride_ms=10):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["time_window_index", "start_ms", "weight"])
        for i, wgt in enumerate(result.weights):
            writer.writerow([i, i * stride_ms, f"{wgt:.9f}"])


def read_rollout_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([float(r["weight"]) for r in rows])


def write_similarity_csv(path, matrix):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in matrix:
            writer.writerow([f"{v:.9f}" for v in row])


def read_similarity_csv(path):
    with open(path, newline="") as f:
        return np.array([[float(v) for v in row] for row in csv.reader(f)])


def plot_rollout(path, result: RolloutResult, waveform=None, stride_ms=10, window_ms=30):
    """Attention mass per time window, optionally overlaid on the waveform."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3))
    n = len(result.weights)
    centers_s = (np.arange(n) * stride_ms + window_ms / 2) / 1000.0
    if waveform is not None:
        t = np.arange(len(waveform.samples)) / waveform.sample_rate
        ax.plot(t, waveform.samples, color="0.7", lw=0.5, label="waveform")
        ax2 = ax.twinx()
        ax2.fill_between(centers_s, result.weights, color="tab:red", alpha=0.5)
        ax2.set_ylabel("attention weight")
        ax.set_ylabel("amplitude")
    else:
        ax.fill_between(centers_s, result.weights, color="tab:red", alpha=0.6)
        ax.set_ylabel("attention weight")
    ax.set_xlabel("time [s]")
    ax.set_title("class-token attention rollout")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_similarity(path, matrix):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(matrix, vmin=-1, vmax=1, cmap="RdBu_r", origin="lower")
    fig.colorbar(im, ax=ax, label="cosine similarity")
    ax.set_xlabel("position")
    ax.set_ylabel("position")
    ax.set_title("positional embedding similarity")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
