"""Text alignment, Fréchet feature distance and background fidelity of generated clips.

Features come from the trained abductive video encoder, so distances are
only comparable between runs that share one encoder checkpoint.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .abductive import AbductiveCLIP
from .errors import DomainError, ShapeError, UndefinedRegionError
from .scenario import CLIP_LEN, BBoxTrack, object_mask

METRIC_FIELDS = ("condition", "clip_score", "fvd", "bg_err", "obj_err", "config_hash")


def score_from_embeddings(frame_embs, text_emb) -> float:
    """``100 * mean_t max(0, cos(frame_t, text))``."""
    f = np.asarray(frame_embs, dtype=np.float64)
    t = np.asarray(text_emb, dtype=np.float64)
    cos = (f @ t) / (np.linalg.norm(f, axis=1) * np.linalg.norm(t))
    return float(100.0 * np.mean(np.maximum(cos, 0.0)))


@torch.no_grad()
def frame_embeddings(frames, model: AbductiveCLIP) -> np.ndarray:
    """Each frame embedded on its own, as a clip of that frame repeated."""
    frames = np.asarray(frames, dtype=np.float32)
    still = np.repeat(frames[:, None], CLIP_LEN, axis=1)
    return model.encode_video(still).numpy()


@torch.no_grad()
def clip_score(frames, tokens, model: AbductiveCLIP) -> float:
    if getattr(model, "trained_steps", 1) == 0:
        warnings.warn("clip_score computed with an untrained encoder", RuntimeWarning, stacklevel=2)
    text = model.encode_text([tokens])[0].numpy()
    return score_from_embeddings(frame_embeddings(frames, model), text)


@dataclass
class FeatureSet:
    features: np.ndarray  # N x D
    source: str = "real"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.ndim != 2:
            raise ShapeError(f"features must be N x D, got {self.features.shape}")

    def __len__(self) -> int:
        return len(self.features)


@torch.no_grad()
def video_features(clips, model: AbductiveCLIP, source: str = "real") -> FeatureSet:
    x = np.asarray(clips, dtype=np.float32)
    return FeatureSet(model.encode_video(x).numpy(), source)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    # eigenvalues at rounding level (or negative) are treated as exact zeros
    tol = max(w.max(initial=0.0), 0.0) * len(w) * np.finfo(float).eps
    return (v * np.sqrt(np.where(w > tol, w, 0.0))) @ v.T


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """Squared Fréchet distance between Gaussian fits of two feature sets."""
    for s in (a, b):
        if len(s) < 2:
            raise DomainError(f"need at least 2 samples per set, got {len(s)}")
    if a.features.shape[1] != b.features.shape[1]:
        raise ShapeError("feature dimensions differ")
    mu_a, mu_b = a.features.mean(0), b.features.mean(0)
    cov_a = np.atleast_2d(np.cov(a.features, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b.features, rowvar=False))
    # Tr sqrt(A B) is the nuclear norm of sqrt(A) sqrt(B); it is symmetric in A, B
    tr_sqrt = np.linalg.svd(_psd_sqrt(cov_a) @ _psd_sqrt(cov_b), compute_uv=False).sum()
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def background_fidelity(v, v_g, tracks: Sequence[BBoxTrack]) -> tuple[float, float]:
    """Mean absolute pixel error outside and inside the union of boxes.

    ``tracks`` are aligned with the clip frames.  Returns ``(bg_err, obj_err)``;
    ``obj_err`` is NaN when no box covers any pixel.
    """
    v = np.asarray(v, dtype=np.float64)
    v_g = np.asarray(v_g, dtype=np.float64)
    if v.shape != v_g.shape:
        raise ShapeError(f"clip shapes differ: {v.shape} vs {v_g.shape}")
    T, H, W = v.shape[:3]
    obj = object_mask(tracks, np.arange(T), H, W)
    err = np.abs(v - v_g).mean(axis=-1)
    if obj.all():
        raise UndefinedRegionError("boxes cover every pixel; background error is undefined")
    bg_err = float(err[~obj].mean())
    obj_err = float(err[obj].mean()) if obj.any() else float("nan")
    return bg_err, obj_err


def region_difference(a, b, tracks: Sequence[BBoxTrack]) -> tuple[float, float]:
    """``(background, object)`` mean absolute difference between two clips of one scene."""
    return background_fidelity(a, b, tracks)


# -- outputs ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in METRIC_FIELDS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in METRIC_FIELDS[1:-1]:
            r[k] = float(r[k])
    return rows


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curves(curves: dict[str, tuple[Sequence[float], Sequence[float]]], path, ylabel: str = "loss") -> None:
    """One line per named ``(steps, values)`` curve."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (x, y) in curves.items():
        ax.plot(x, y, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_metric_bars(rows: Sequence[dict], path) -> None:
    """Grouped bars of every numeric metric per condition."""
    plt = _pyplot()
    names = [r["condition"] for r in rows]
    fields = [k for k in METRIC_FIELDS[1:-1]]
    fig, axes = plt.subplots(1, len(fields), figsize=(3 * len(fields), 3.5))
    for ax, k in zip(axes, fields):
        ax.bar(range(len(rows)), [float(r[k]) for r in rows])
        ax.set_xticks(range(len(rows)), names, rotation=30, ha="right", fontsize=7)
        ax.set_title(k)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
