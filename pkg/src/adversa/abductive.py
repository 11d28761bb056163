"""Abductive CLIP: small video/text encoders trained with the contrastive interaction loss.

Each interaction group (o, r, p, a) contributes one InfoNCE-style term in
which, for video clip *i*, the denominator sums the coherence with every
positive text in the batch plus the coherence with the two negative texts of
every *other* item.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import text as grammar
from .checkpoint import load_checkpoint, numpy_to_state, save_checkpoint, state_to_numpy
from .errors import DomainError, ShapeError, TrainingError
from .scenario import (
    CLIP_LEN,
    GROUPS,
    DEFAULT_NEGATIVE_MAP,
    GeneratorConfig,
    TextAnnotation,
    build_interaction_groups,
    generate_scenario,
    partition_segments,
    sample_clip,
)

log = logging.getLogger(__name__)

POOLED = 16  # frames are average-pooled to POOLED x POOLED before the conv stack


def coherence(z_v, z_t, tau):
    """``exp(z_v . z_t / tau)`` for numpy or torch inputs."""
    t = float(tau.detach()) if isinstance(tau, torch.Tensor) else float(tau)
    if t <= 0:
        raise DomainError(f"temperature must be positive, got {t}")
    if isinstance(z_v, torch.Tensor):
        return torch.exp((z_v * z_t).sum(-1) / tau)
    return np.exp(np.sum(np.asarray(z_v) * np.asarray(z_t), axis=-1) / tau)


def ciloss_group(zv_p, zt_p, zt_n1, zt_n2, tau, negatives_include_self: bool = False):
    """Contrastive interaction loss of one group, summed over the batch.

    All inputs are ``(B, D)``.  With ``negatives_include_self`` the negative
    terms also run over ``j == i``.
    """
    shapes = {tuple(t.shape) for t in (zv_p, zt_p, zt_n1, zt_n2)}
    if len(shapes) != 1 or zv_p.ndim != 2:
        raise ShapeError(f"mismatched group shapes {sorted(shapes)}")
    if not isinstance(tau, torch.Tensor):
        tau = torch.tensor(float(tau), dtype=zv_p.dtype)
    if float(tau.detach()) <= 0:
        raise DomainError(f"temperature must be positive, got {float(tau.detach())}")
    B = zv_p.shape[0]
    s_p = zv_p @ zt_p.T / tau
    s_n1 = zv_p @ zt_n1.T / tau
    s_n2 = zv_p @ zt_n2.T / tau
    if not negatives_include_self:
        eye = torch.eye(B, dtype=torch.bool, device=zv_p.device)
        s_n1 = s_n1.masked_fill(eye, float("-inf"))
        s_n2 = s_n2.masked_fill(eye, float("-inf"))
    log_k = torch.logsumexp(torch.cat([s_p, s_n1, s_n2], dim=1), dim=1)
    return (log_k - torch.diagonal(s_p)).sum()


def total_ciloss(batch: Mapping[str, Sequence[torch.Tensor]], tau, **kw):
    """Sum of the group losses over o, r, p, a."""
    missing = [g for g in GROUPS if g not in batch]
    if missing:
        raise ShapeError(f"interaction batch lacks groups {missing}")
    sizes = {batch[g][0].shape[0] for g in GROUPS}
    if len(sizes) != 1:
        raise ShapeError(f"groups have different batch sizes {sorted(sizes)}")
    return sum(ciloss_group(*batch[g], tau, **kw) for g in GROUPS)


# -- encoders -------------------------------------------------------------------


def pad_tokens(seqs: Sequence[Sequence[int]], length: int | None = None) -> torch.Tensor:
    for s in seqs:
        if len(s) > grammar.MAX_TOKENS:
            raise DomainError(f"token sequence of length {len(s)} exceeds {grammar.MAX_TOKENS}")
    L = length or max(1, max((len(s) for s in seqs), default=1))
    out = torch.zeros(len(seqs), L, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def pool_frames(frames) -> torch.Tensor:
    """``(..., H, W, C)`` frames -> ``(..., POOLED, POOLED, C)`` by area averaging."""
    x = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames, dtype=torch.float32)
    lead = x.shape[:-3]
    H, W, C = x.shape[-3:]
    if (H, W) == (POOLED, POOLED):
        return x
    x = x.reshape(-1, H, W, C).permute(0, 3, 1, 2)
    x = F.adaptive_avg_pool2d(x, POOLED).permute(0, 2, 3, 1)
    return x.reshape(*lead, POOLED, POOLED, C)


class VideoEncoder(nn.Module):
    """Per-frame conv encoder with mean temporal pooling.

    Each frame is stacked with its forward temporal difference so that the
    pooled feature still distinguishes a clip from its time reversal.
    """

    def __init__(self, dim: int = 128, width: int = 32, hidden: int = 256):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(6, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.frame_proj = nn.Linear(2 * width * (POOLED // 4) ** 2, hidden)
        self.head = nn.Linear(hidden, dim)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        """``(B, T, H, W, 3)`` in [0, 1] -> unit ``(B, dim)``."""
        if clips.ndim == 4:
            clips = clips[None]
        x = pool_frames(clips)
        B, T = x.shape[:2]
        diff = torch.zeros_like(x)
        diff[:, :-1] = x[:, 1:] - x[:, :-1]
        x = torch.cat([x, diff], dim=-1).reshape(B * T, POOLED, POOLED, 6).permute(0, 3, 1, 2)
        h = self.convs(x * 2 - 1).flatten(1)
        h = F.relu(self.frame_proj(h)).reshape(B, T, -1).mean(1)
        return F.normalize(self.head(h), dim=-1)


class TextEncoder(nn.Module):
    """Embedding-bag text encoder; token features are also exposed for cross-attention."""

    def __init__(self, vocab_size: int = len(grammar.VOCAB), dim: int = 128, embed: int = 64, hidden: int = 256):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed, padding_idx=0)
        self.mlp = nn.Sequential(nn.Linear(embed, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def token_features(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(B, L)`` ids -> ``(B, L, embed)`` features and a ``(B, L)`` validity mask."""
        if tokens.shape[-1] > grammar.MAX_TOKENS:
            raise DomainError(f"text length {tokens.shape[-1]} exceeds {grammar.MAX_TOKENS}")
        return self.embed(tokens), tokens != 0

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        feats, valid = self.token_features(tokens)
        w = valid.float().unsqueeze(-1)
        bag = (feats * w).sum(1) / w.sum(1).clamp_min(1.0)
        return F.normalize(self.mlp(bag), dim=-1)


@dataclass
class ClipConfig:
    dim: int = 128
    width: int = 32
    embed: int = 64
    hidden: int = 256
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 1.0


class AbductiveCLIP(nn.Module):
    def __init__(self, cfg: ClipConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ClipConfig()
        self.video = VideoEncoder(cfg.dim, cfg.width, cfg.hidden)
        self.text = TextEncoder(len(grammar.VOCAB), cfg.dim, cfg.embed, cfg.hidden)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        self.trained_steps = 0

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.clamp(math.log(self.cfg.tau_min), math.log(self.cfg.tau_max)).exp()

    def encode_video(self, clips) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(clips) if not isinstance(clips, torch.Tensor) else clips, dtype=torch.float32)
        if x.shape[-4] != CLIP_LEN:
            raise ShapeError(f"clip has {x.shape[-4]} frames, expected {CLIP_LEN}")
        return self.video(x)

    def encode_text(self, token_seqs: Sequence[Sequence[int]]) -> torch.Tensor:
        return self.text(pad_tokens(token_seqs))


def retrieve_embeddings(z_v, z_ts) -> list[int]:
    """Candidate indices by descending ``z_v . z_t``; ties keep the lower index."""
    z_v = np.asarray(z_v, dtype=np.float64)
    z_ts = np.asarray(z_ts, dtype=np.float64)
    if z_ts.ndim != 2 or len(z_ts) == 0:
        raise DomainError("no candidates to rank")
    z_ts = z_ts / np.linalg.norm(z_ts, axis=1, keepdims=True)
    scores = z_ts @ z_v
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


@torch.no_grad()
def retrieve(clip, candidate_texts: Sequence[Sequence[int]], model: AbductiveCLIP) -> list[int]:
    """Rank candidate token sequences for one clip (best first)."""
    if len(candidate_texts) == 0:
        raise DomainError("no candidates to rank")
    if len(candidate_texts) == 1:
        return [0]
    frames = clip.frames if hasattr(clip, "frames") else clip
    z_v = model.encode_video(frames)[0].numpy()
    z_t = model.encode_text(candidate_texts).numpy()
    return retrieve_embeddings(z_v, z_t)


# -- corpus & training ----------------------------------------------------------


@dataclass
class ClipCorpus:
    """Pooled videos plus annotations; enough to draw interaction groups cheaply."""

    pooled: list[np.ndarray]          # each T x 16 x 16 x 3 float32
    annotations: list                 # TemporalAnnotation per scenario
    texts: list[TextAnnotation]
    seeds: list[int]

    def __len__(self) -> int:
        return len(self.seeds)

    @classmethod
    def from_scenarios(cls, scenarios) -> "ClipCorpus":
        pooled, anns, texts, seeds = [], [], [], []
        for s in scenarios:
            pooled.append(pool_frames(s.frames).numpy())
            anns.append(s.annotation)
            texts.append(s.texts)
            seeds.append(s.seed)
        return cls(pooled, anns, texts, seeds)

    @classmethod
    def generate(cls, seeds: Sequence[int], gen_cfg: GeneratorConfig | None = None) -> "ClipCorpus":
        return cls.from_scenarios(generate_scenario(s, gen_cfg) for s in seeds)

    def subset(self, idx: Sequence[int]) -> "ClipCorpus":
        return ClipCorpus([self.pooled[i] for i in idx], [self.annotations[i] for i in idx],
                          [self.texts[i] for i in idx], [self.seeds[i] for i in idx])


class _Lite:
    """Just enough of a Scenario for ``build_interaction_groups`` without frames."""

    def __init__(self, annotation, texts):
        self.annotation = annotation
        self.texts = texts


def sample_interaction_batch(corpus: ClipCorpus, items: Sequence[int], rng, negative_map=None):
    """Clips ``(4, B, 16, 16, 16, 3)`` and per-group text lists for the chosen items."""
    clips = {g: [] for g in GROUPS}
    texts = {g: ([], [], []) for g in GROUPS}
    for i in items:
        lite = _Lite(corpus.annotations[i], corpus.texts[i])
        groups = build_interaction_groups(lite, corpus.texts, rng, negative_map, with_frames=False)
        for g in GROUPS:
            cocps = groups[g]
            clips[g].append(corpus.pooled[i][cocps[0].clip.indices])
            for slot in range(3):
                texts[g][slot].append(cocps[slot].text)
    return {g: np.stack(clips[g]) for g in GROUPS}, texts


def interaction_embeddings(model: AbductiveCLIP, clips, texts):
    out = {}
    for g in GROUPS:
        zv = model.encode_video(torch.from_numpy(clips[g]))
        zt = [model.encode_text(texts[g][k]) for k in range(3)]
        out[g] = (zv, *zt)
    return out


@dataclass
class ClipTrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    negatives_include_self: bool = False
    negative_map: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_NEGATIVE_MAP.items()})
    log_every: int = 10


@torch.no_grad()
def evaluate_loss(model: AbductiveCLIP, corpus: ClipCorpus, batch_size: int = 8, seed: int = 1234, **kw) -> float:
    """Mean total loss over fixed held-out batches (deterministic given ``seed``)."""
    rng = np.random.default_rng(seed)
    order = np.arange(len(corpus))
    total, n = 0.0, 0
    for start in range(0, len(order) - batch_size + 1, batch_size):
        clips, texts = sample_interaction_batch(corpus, order[start : start + batch_size], rng)
        total += float(total_ciloss(interaction_embeddings(model, clips, texts), model.tau, **kw))
        n += 1
    return total / max(n, 1)


def train_abductive_clip(
    corpus: ClipCorpus,
    cfg: ClipTrainConfig | None = None,
    model: AbductiveCLIP | None = None,
    log_path=None,
) -> tuple[AbductiveCLIP, list[dict]]:
    """Adam on the summed four-group loss; returns the model and the loss log."""
    cfg = cfg or ClipTrainConfig()
    torch.manual_seed(cfg.seed)
    model = model or AbductiveCLIP()
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    history = []
    for step in range(1, cfg.steps + 1):
        items = rng.choice(len(corpus), size=cfg.batch_size, replace=len(corpus) < cfg.batch_size)
        clips, texts = sample_interaction_batch(corpus, items, rng, cfg.negative_map)
        emb = interaction_embeddings(model, clips, texts)
        tau = model.tau
        parts = {g: ciloss_group(*emb[g], tau, cfg.negatives_include_self) for g in GROUPS}
        loss = sum(parts.values())
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite CILoss at step {step}: "
                + ", ".join(f"{g}={float(v.detach()):.4g}" for g, v in parts.items())
                + f", tau={float(tau.detach()):.4g}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            row = {"step": step, **{f"loss_{g}": float(v.detach()) for g, v in parts.items()},
                   "total": float(loss.detach()), "tau": float(model.tau.detach())}
            history.append(row)
            log.debug("clip step %d total %.4f tau %.4f", step, row["total"], row["tau"])
    model.trained_steps += cfg.steps
    if log_path is not None:
        write_log(log_path, history)
    return model, history


def write_log(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


@torch.no_grad()
def retrieval_accuracy(model: AbductiveCLIP, corpus: ClipCorpus, n_distractors: int = 3, seed: int = 0) -> float:
    """4-way reason retrieval: rank the scenario's ``t_r`` against reasons of other scenarios."""
    rng = np.random.default_rng(seed)
    reasons = [t.t_r for t in corpus.texts]
    hits = 0
    for i in range(len(corpus)):
        others = [j for j in range(len(corpus)) if reasons[j] != reasons[i]]
        picks = rng.choice(len(others), size=n_distractors, replace=False)
        unique, seen = [], set()
        for p in picks:
            r = reasons[others[p]]
            if r not in seen:
                seen.add(r)
                unique.append(r)
        while len(unique) < n_distractors:
            r = reasons[others[int(rng.integers(0, len(others)))]]
            if r not in seen:
                seen.add(r)
                unique.append(r)
        _, v_r, _ = partition_segments(corpus.annotations[i])
        clip = sample_clip(corpus.pooled[i], v_r, rng)
        cands = [reasons[i], *unique]
        order = rng.permutation(len(cands))
        ranked = retrieve(clip.frames, [cands[k] for k in order], model)
        hits += int(order[ranked[0]] == 0)
    return hits / max(1, len(corpus))


def save_clip(path, model: AbductiveCLIP, extra: dict | None = None) -> None:
    meta = {"D": model.cfg.dim, "vocab_size": len(grammar.VOCAB), "tau": float(model.tau.detach()),
            "trained_steps": model.trained_steps, "config": asdict(model.cfg), **(extra or {})}
    save_checkpoint(path, "abductive-clip", meta, state_to_numpy(model))


def load_clip(path) -> tuple[AbductiveCLIP, dict]:
    header, tensors = load_checkpoint(path, "abductive-clip")
    model = AbductiveCLIP(ClipConfig(**header["meta"]["config"]))
    numpy_to_state(model, tensors)
    model.trained_steps = int(header["meta"].get("trained_steps", 0))
    model.eval()
    return model, header["meta"]
