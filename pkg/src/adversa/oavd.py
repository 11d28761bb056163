"""Masked latent diffusion training and DDIM generation for accident clips."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .abductive import TextEncoder, pad_tokens
from .checkpoint import load_checkpoint, numpy_to_state, save_checkpoint, state_to_numpy
from .codec import LatentClip, PixelShuffleCodec, literal_latent_mask, rasterize_latent_mask
from .errors import CompatibilityError, ConfigurationError, DomainError, ShapeError, TrainingError
from .scenario import (
    CLIP_LEN,
    GROUPS,
    BBoxTrack,
    Scenario,
    clip_tracks,
    partition_segments,
    positive_text_field,
    reverse_clip,
    sample_clip,
)
from .schedulers import NoiseSchedule, add_noise, ddim_sample, ddim_timesteps, make_schedule
from .text import MAX_TOKENS
from .unet import GroundingInput, UNet3D, UNetConfig

log = logging.getLogger(__name__)

MASK_MODES = ("geometric", "literal")
MASK_WEIGHTS = ("binary", "noised")


@dataclass
class TrainConfig:
    lam: float = 0.5
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    mask_mode: str = "geometric"
    mask_weight: str = "binary"
    schedule_kind: str = "linear"
    K: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    attention_only: bool = False
    grounding_dropout: float = 0.0
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigurationError(f"mask_mode must be one of {MASK_MODES}")
        if self.mask_weight not in MASK_WEIGHTS:
            raise ConfigurationError(f"mask_weight must be one of {MASK_WEIGHTS}")
        if not (0.0 <= self.grounding_dropout <= 1.0):
            raise ConfigurationError(f"grounding_dropout must lie in [0, 1], got {self.grounding_dropout}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and steps >= 0")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.K, self.schedule_kind, self.beta_start, self.beta_end)


# -- objective ------------------------------------------------------------------


def oavd_loss(e, e_hat, mask, lam: float = 0.5):
    """``mean((e - e_hat)^2) + lam * mean(|(e - e_hat) * (1 - mask)|)``.

    ``mask`` is 1 on background and 0 on objects, so the L1 term emphasises
    the object regions.  Works on numpy arrays and torch tensors.
    """
    if not (np.shape(e) == np.shape(e_hat) == np.shape(mask)):
        raise ShapeError(f"shape mismatch: e {tuple(np.shape(e))}, e_hat {tuple(np.shape(e_hat))}, mask {tuple(np.shape(mask))}")
    d = e - e_hat
    if isinstance(d, torch.Tensor):
        return (d * d).mean() + lam * (d * (1 - mask)).abs().mean()
    return float(np.mean(d * d) + lam * np.mean(np.abs(d * (1 - mask))))


# -- model bundle -----------------------------------------------------------------


@dataclass
class OAVDModel:
    """A trained (or fresh) denoiser with the frozen text encoder, codec and schedule it was trained with."""

    unet: UNet3D
    text: TextEncoder
    codec: PixelShuffleCodec
    schedule: NoiseSchedule
    frame_size: tuple[int, int] = (64, 64)
    meta: dict = field(default_factory=dict)

    def context(self, token_seqs: Sequence[Sequence[int]]):
        for seq in token_seqs:
            if len(seq) > MAX_TOKENS:
                raise DomainError(f"prompt of {len(seq)} tokens exceeds {MAX_TOKENS}")
        with torch.no_grad():
            return self.text.token_features(pad_tokens(token_seqs))

    def header(self) -> dict:
        return {"schedule": self.schedule.header(), "codec": self.codec.header()}


def new_model(text: TextEncoder, unet_cfg: UNetConfig | None = None, train_cfg: TrainConfig | None = None,
              frame_size=(64, 64), codec: PixelShuffleCodec | None = None) -> OAVDModel:
    train_cfg = train_cfg or TrainConfig()
    codec = codec or PixelShuffleCodec()
    unet_cfg = unet_cfg or UNetConfig(latent_channels=codec.latent_channels, context_dim=text.embed.embedding_dim)
    text = copy.deepcopy(text)
    text.requires_grad_(False)
    return OAVDModel(UNet3D(unet_cfg), text, codec, train_cfg.schedule(), tuple(frame_size))


def save_oavd(path, model: OAVDModel, extra: dict | None = None) -> None:
    tensors = {f"unet.{k}": v for k, v in state_to_numpy(model.unet).items()}
    tensors.update({f"text.{k}": v for k, v in state_to_numpy(model.text).items()})
    meta = {
        "unet": model.unet.cfg.to_dict(),
        "vocab_size": model.text.embed.num_embeddings,
        "text_dims": [model.text.embed.embedding_dim, model.text.mlp[0].out_features, model.text.mlp[2].out_features],
        "frame_size": list(model.frame_size),
        **model.header(),
        **model.meta,
        **(extra or {}),
    }
    save_checkpoint(path, "oavd", meta, tensors)


def load_oavd(path) -> OAVDModel:
    header, tensors = load_checkpoint(path, kind="oavd")
    meta = header["meta"]
    ucfg = UNetConfig(**meta["unet"])
    unet = UNet3D(ucfg)
    numpy_to_state(unet, tensors, "unet.")
    embed, hidden, dim = meta["text_dims"]
    text = TextEncoder(meta["vocab_size"], dim, embed, hidden)
    numpy_to_state(text, tensors, "text.")
    text.requires_grad_(False)
    s = meta["schedule"]
    sched = make_schedule(s["K"], s["kind"], s["beta_start"], s["beta_end"])
    c = meta["codec"]
    if c["name"] != PixelShuffleCodec.name:
        raise CompatibilityError(f"unknown codec {c['name']!r}")
    codec = PixelShuffleCodec(c["channels"], c["factor"], c.get("seed", 0))
    extra = {k: v for k, v in meta.items() if k not in ("unet", "vocab_size", "text_dims", "frame_size", "schedule", "codec")}
    return OAVDModel(unet.eval(), text, codec, sched, tuple(meta["frame_size"]), extra)


def check_compatible(model: OAVDModel, schedule: NoiseSchedule | None = None, codec: PixelShuffleCodec | None = None) -> None:
    if schedule is not None and schedule.header() != model.schedule.header():
        raise CompatibilityError(f"schedule {schedule.header()} differs from checkpoint {model.schedule.header()}")
    if codec is not None and codec.header() != model.codec.header():
        raise CompatibilityError(f"codec {codec.header()} differs from checkpoint {model.codec.header()}")


# -- training data ----------------------------------------------------------------


@dataclass
class TrainItem:
    latent: np.ndarray        # T x h x w x c, signed range
    tokens: tuple[int, ...]
    grounding: GroundingInput
    mask: np.ndarray          # T x h x w x c, 1 = background


def make_item(frames: np.ndarray, tracks: Sequence[BBoxTrack], tokens, codec: PixelShuffleCodec,
              mask_mode: str = "geometric", n_tokens: int = 8) -> TrainItem:
    """Latent, grounding and mask of one clip; ``tracks`` are aligned with ``frames``."""
    z = codec.encode(frames)
    if mask_mode == "geometric":
        mask = rasterize_latent_mask(tracks, z.shape, codec.factor)
    else:
        mask = literal_latent_mask(frames, tracks, codec)
    return TrainItem(z.to_signed().values.astype(np.float32), tuple(tokens),
                     GroundingInput.from_tracks(tracks, n_tokens, frames=len(frames)), mask)


def sample_cocp_item(s: Scenario, rng: np.random.Generator, codec: PixelShuffleCodec, mask_mode: str,
                     n_tokens: int, group: str | None = None) -> TrainItem:
    """One positive Co-CP of a random interaction group, with its boxes."""
    g = group or GROUPS[int(rng.integers(0, len(GROUPS)))]
    v_o, v_r, v_a = partition_segments(s)
    clip = sample_clip(s, {"o": v_o, "r": v_r, "p": v_r, "a": v_a}[g], rng)
    if g == "p":
        clip = reverse_clip(clip)
    return make_item(clip.frames, clip_tracks(s.tracks, clip), s.texts.get(positive_text_field(g)),
                     codec, mask_mode, n_tokens)


def without_boxes(item: TrainItem) -> TrainItem:
    g = item.grounding
    empty = GroundingInput(np.zeros_like(g.boxes), np.zeros_like(g.valid), np.zeros_like(g.classes))
    return TrainItem(item.latent, item.tokens, empty, item.mask)


def collate(items: Sequence[TrainItem], model: OAVDModel):
    z0 = torch.from_numpy(np.stack([it.latent for it in items])).permute(0, 4, 1, 2, 3).contiguous()
    mask = torch.from_numpy(np.stack([it.mask for it in items])).permute(0, 4, 1, 2, 3).contiguous()
    ctx, ctx_mask = model.context([it.tokens for it in items])
    boxes, valid, classes = GroundingInput.collate([it.grounding for it in items])
    return z0, mask, {"context": ctx, "context_mask": ctx_mask, "boxes": boxes, "box_valid": valid, "box_classes": classes}


def training_loss(model: OAVDModel, items: Sequence[TrainItem], rng: np.random.Generator, cfg: TrainConfig):
    """Loss of one batch; returns ``(loss, mse)`` tensors."""
    z0, m, cond = collate(items, model)
    sched = model.schedule
    k = rng.integers(1, sched.K + 1, size=len(items))
    e = torch.from_numpy(rng.standard_normal(z0.shape).astype(np.float32))
    z_k = add_noise(z0, k, e, sched)
    weight = m if cfg.mask_weight == "binary" else add_noise(m, k, e, sched)
    e_hat = model.unet(z_k, torch.from_numpy(k), **cond)
    mse = ((e - e_hat) ** 2).mean()
    return oavd_loss(e, e_hat, weight, cfg.lam), mse


def train_oavd(scenarios: Sequence[Scenario], model: OAVDModel, cfg: TrainConfig, checkpoint_path=None,
               log_path=None) -> list[dict]:
    """Adam on the masked diffusion objective; returns the logged loss curve.

    A non-finite loss saves the last good weights to ``checkpoint_path`` and
    raises :class:`TrainingError`.
    """
    cfg.validate()
    if not scenarios:
        raise DomainError("no training scenarios")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    params = list(model.unet.attention_parameters()) if cfg.attention_only else list(model.unet.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    n_tok = model.unet.cfg.max_tokens
    model.unet.train()
    history = []
    last_good = copy.deepcopy(model.unet.state_dict())
    for step in range(1, cfg.steps + 1):
        picks = rng.integers(0, len(scenarios), size=cfg.batch_size)
        items = [sample_cocp_item(scenarios[i], rng, model.codec, cfg.mask_mode, n_tok) for i in picks]
        if cfg.grounding_dropout > 0:
            # without boxes the clip's appearance can only be read from the text
            drop = rng.random(len(items)) < cfg.grounding_dropout
            items = [without_boxes(it) if d else it for it, d in zip(items, drop)]
        loss, mse = training_loss(model, items, rng, cfg)
        if not torch.isfinite(loss):
            model.unet.load_state_dict(last_good)
            if checkpoint_path is not None:
                save_oavd(checkpoint_path, model, {"aborted_at": step})
            raise TrainingError(f"non-finite OAVD loss at step {step}; last good weights restored")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.checkpoint_every == 0:
            last_good = copy.deepcopy(model.unet.state_dict())
        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            row = {"step": step, "loss": float(loss.detach()), "mse": float(mse.detach())}
            history.append(row)
            log.debug("oavd step %d loss %.4f", step, row["loss"])
    model.unet.eval()
    if log_path is not None:
        write_curve(log_path, history)
    if checkpoint_path is not None:
        save_oavd(checkpoint_path, model)
    return history


def write_curve(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["step", "loss", "mse"])
        w.writeheader()
        w.writerows(rows)


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


# -- generation -------------------------------------------------------------------


@dataclass
class GenerationRequest:
    frames: np.ndarray | None           # T x H x W x 3 source clip in [0, 1]; None for video-free
    tokens: tuple[int, ...]
    tracks: list[BBoxTrack]             # aligned with the generated frames
    steps: int = 25
    strength: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if len(self.tokens) > MAX_TOKENS:
            raise DomainError(f"prompt of {len(self.tokens)} tokens exceeds {MAX_TOKENS}")
        if not (0.0 < self.strength <= 1.0):
            raise DomainError(f"strength must lie in (0, 1], got {self.strength}")
        if self.steps < 0:
            raise DomainError("steps must be >= 0")
        if self.frames is not None and len(self.frames) != CLIP_LEN:
            raise ShapeError(f"source clip has {len(self.frames)} frames, expected {CLIP_LEN}")

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("frames", "tracks")}
        d["tokens"] = list(self.tokens)
        d["video_free"] = self.frames is None
        return d


def _denoiser(model: OAVDModel, cond: dict):
    def fn(z, k):
        kk = torch.full((z.shape[0],), int(k), dtype=torch.long)
        with torch.no_grad():
            return model.unet(z, kk, **cond)

    return fn


def generate_batch(requests: Sequence[GenerationRequest], model: OAVDModel, schedule: NoiseSchedule | None = None,
                   codec: PixelShuffleCodec | None = None) -> list[np.ndarray]:
    """Generate one clip per request; requests in a batch must share steps and strength."""
    check_compatible(model, schedule, codec)
    if not requests:
        return []
    for r in requests:
        r.validate()
    steps, strength = requests[0].steps, requests[0].strength
    if any(r.steps != steps or r.strength != strength for r in requests):
        raise ConfigurationError("batched requests must share steps and strength")
    codec, sched = model.codec, model.schedule
    H, W = model.frame_size
    f = codec.factor
    shape = (CLIP_LEN, H // f, W // f, codec.latent_channels)

    if steps == 0:
        out = []
        for r in requests:
            if r.frames is None:
                raise DomainError("zero-step generation needs a source clip")
            out.append(codec.decode(codec.encode(r.frames)))
        return out

    k_start = max(1, int(round(strength * sched.K)))
    z_start = []
    for r in requests:
        e = np.random.default_rng(r.seed).standard_normal(shape).astype(np.float32)
        if r.frames is None:
            z_start.append(e)
        else:
            if np.shape(r.frames)[1:3] != (H, W):
                raise ShapeError(f"frame size {np.shape(r.frames)[1:3]} differs from model {H}x{W}")
            z0 = codec.encode(r.frames).to_signed().values.astype(np.float32)
            z_start.append(add_noise(z0, k_start, e, sched).astype(np.float32))
    items = [TrainItem(z, r.tokens, GroundingInput.from_tracks(r.tracks, model.unet.cfg.max_tokens, CLIP_LEN), z)
             for z, r in zip(z_start, requests)]
    z, _, cond = collate(items, model)
    model.unet.eval()
    ks = ddim_timesteps(k_start, steps)
    z = ddim_sample(z, _denoiser(model, cond), ks, sched)
    z = z.permute(0, 2, 3, 4, 1).numpy()
    return [np.clip(codec.decode(LatentClip(zi, "signed")), 0.0, 1.0).astype(np.float32) for zi in z]


def generate(req: GenerationRequest, model: OAVDModel, **kw) -> np.ndarray:
    return generate_batch([req], model, **kw)[0]


def random_tracks(rng: np.random.Generator, n: int = 4, frames: int = CLIP_LEN) -> list[BBoxTrack]:
    """``n`` boxes at random positions and sizes, drifting linearly over the clip."""
    tracks = []
    for _ in range(n):
        w, h = rng.uniform(0.1, 0.3, size=2)
        start = rng.uniform(0, 1, size=2) * (1 - np.array([w, h]))
        end = rng.uniform(0, 1, size=2) * (1 - np.array([w, h]))
        a = np.linspace(0, 1, frames)[:, None]
        xy = start * (1 - a) + end * a
        boxes = np.concatenate([xy, xy + [w, h]], axis=1)
        tracks.append(BBoxTrack(int(rng.integers(0, 4)), boxes.astype(np.float64), np.ones(frames, dtype=bool)))
    return tracks


def video_free_generate(tracks: Sequence[BBoxTrack], tokens, model: OAVDModel, seed: int = 0,
                        steps: int = 25) -> np.ndarray:
    """Generate from pure noise conditioned only on boxes and text."""
    if not any(tr.present.any() for tr in tracks) and not tokens:
        raise DomainError("video-free generation needs at least one box or a text prompt")
    req = GenerationRequest(None, tuple(tokens), list(tracks), steps=max(1, steps), strength=1.0, seed=seed)
    return generate(req, model)


def write_manifest(path, request: GenerationRequest, checkpoint_id: str, extra: dict | None = None) -> None:
    doc = {"request": request.to_json(), "checkpoint": checkpoint_id, **(extra or {})}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
