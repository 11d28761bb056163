"""The OAVD denoiser: a small 3D U-Net built from 3D cross-attention blocks.

Tensors inside the network are laid out ``(B, C, T, h, w)``.  Each 3D-CAB runs
a temporal (3, 1, 1) convolution stack followed by spatial attention, gated
self-attention over bounding-box tokens, text cross-attention and temporal
attention (order configurable).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DomainError, ShapeError
from .scenario import BBoxTrack
from .text import MAX_TOKENS

DEFAULT_ORDER = ("conv", "sa", "ga", "ca", "ta")


@dataclass
class UNetConfig:
    latent_channels: int = 192
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 4)
    heads: int = 4
    frames: int = 16
    fourier_freqs: int = 8
    max_tokens: int = 8
    grounding_dim: int = 64
    context_dim: int = 64
    use_class_embedding: bool = False
    num_classes: int = 4
    block_order: tuple[str, ...] = DEFAULT_ORDER
    input_skip: bool = True

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.block_order = tuple(self.block_order)
        for m in self.channel_mult:
            if (self.base_channels * m) % self.heads:
                raise ConfigurationError(f"channels {self.base_channels * m} not divisible by {self.heads} heads")
            if (self.base_channels * m) % 8:
                raise ConfigurationError("channels must be divisible by 8 (group norm)")
        if sorted(self.block_order) != sorted(DEFAULT_ORDER):
            raise ConfigurationError(f"block order must be a permutation of {DEFAULT_ORDER}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["block_order"] = list(self.block_order)
        return d


# -- grounding ------------------------------------------------------------------


def fourier_embed(boxes, n_freqs: int):
    """Sin/cos features of box coordinates.

    For every coordinate x the features are ``sin(2^f pi x), cos(2^f pi x)`` for
    f = 0..n_freqs-1, interleaved; the four coordinates are concatenated, giving
    ``8 * n_freqs`` values per box.
    """
    is_torch = isinstance(boxes, torch.Tensor)
    x = boxes if is_torch else np.asarray(boxes, dtype=np.float64)
    if x.shape[-1] != 4:
        raise ShapeError(f"boxes must have 4 coordinates, got {x.shape[-1]}")
    n = x.numel() if is_torch else x.size
    lo, hi = (float(x.min()), float(x.max())) if n else (0.0, 0.0)
    if lo < 0.0 or hi > 1.0:
        raise DomainError(f"box coordinates must lie in [0, 1], got range [{lo}, {hi}]")
    if is_torch:
        freqs = (2.0 ** torch.arange(n_freqs, dtype=x.dtype, device=x.device)) * math.pi
        ang = x.unsqueeze(-1) * freqs
        out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    else:
        freqs = (2.0 ** np.arange(n_freqs)) * np.pi
        ang = x[..., None] * freqs
        out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(*x.shape[:-1], 8 * n_freqs)


def select_boxes(tracks: Sequence[BBoxTrack], frame: int, n: int) -> list[int]:
    """Track indices kept by token selection: largest area first, lower index on ties."""
    cands = []
    for i, tr in enumerate(tracks):
        if tr.present[frame]:
            x0, y0, x1, y1 = tr.boxes[frame]
            cands.append((-(x1 - x0) * (y1 - y0), i))
    cands.sort()
    return [i for _, i in cands[:n]]


@dataclass
class GroundingInput:
    """Per-frame selected boxes of one clip: ``(T, N, 4)``, validity and class ids."""

    boxes: np.ndarray
    valid: np.ndarray
    classes: np.ndarray

    @classmethod
    def from_tracks(cls, tracks: Sequence[BBoxTrack], n_tokens: int, frames: int | None = None) -> "GroundingInput":
        T = frames if frames is not None else (len(tracks[0]) if tracks else 0)
        boxes = np.zeros((T, n_tokens, 4), dtype=np.float32)
        valid = np.zeros((T, n_tokens), dtype=bool)
        classes = np.zeros((T, n_tokens), dtype=np.int64)
        for t in range(T):
            for slot, i in enumerate(select_boxes(tracks, t, n_tokens)):
                boxes[t, slot] = tracks[i].boxes[t]
                valid[t, slot] = True
                classes[t, slot] = tracks[i].class_id
        return cls(boxes, valid, classes)

    @staticmethod
    def collate(items: Sequence["GroundingInput"]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (
            torch.from_numpy(np.stack([g.boxes for g in items])),
            torch.from_numpy(np.stack([g.valid for g in items])),
            torch.from_numpy(np.stack([g.classes for g in items])),
        )


class GroundingNet(nn.Module):
    """``MLP(Fourier(box))`` tokens, with an optional learned class addend."""

    def __init__(self, n_freqs: int, dim: int, use_class: bool = False, num_classes: int = 4):
        super().__init__()
        self.n_freqs = n_freqs
        self.mlp = nn.Sequential(nn.Linear(8 * n_freqs, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))
        self.class_embed = nn.Embedding(num_classes, dim) if use_class else None

    def forward(self, boxes: torch.Tensor, valid: torch.Tensor, classes: torch.Tensor | None = None) -> torch.Tensor:
        boxes = torch.where(valid.unsqueeze(-1), boxes, torch.zeros_like(boxes))
        tok = self.mlp(fourier_embed(boxes, self.n_freqs))
        if self.class_embed is not None and classes is not None:
            tok = tok + self.class_embed(classes)
        return tok * valid.unsqueeze(-1)


def build_grounding_tokens(tracks: Sequence[BBoxTrack], frame: int, net: GroundingNet, n_tokens: int):
    """Tokens ``(N, dim)`` and validity ``(N,)`` for one frame."""
    g = GroundingInput.from_tracks([tr.select([frame]) for tr in tracks], n_tokens, frames=1)
    boxes, valid, classes = (torch.from_numpy(a[0]) for a in (g.boxes, g.valid, g.classes))
    return net(boxes, valid, classes), valid


# -- attention --------------------------------------------------------------------


def attention(q, k, v, heads: int, key_mask=None, return_weights: bool = False):
    """Dense multi-head attention on ``(B, L, C)`` tensors; ``key_mask`` is True for usable keys."""
    B, Lq, C = q.shape
    Lk = k.shape[1]
    d = C // heads
    q = q.reshape(B, Lq, heads, d).transpose(1, 2)
    k = k.reshape(B, Lk, heads, d).transpose(1, 2)
    v = v.reshape(B, Lk, heads, d).transpose(1, 2)
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        # a query with no usable key attends to nothing (zero output) instead of NaN
        empty = ~key_mask.any(-1)[:, None, None, None]
        logits = logits.masked_fill(empty, 0.0)
    w = logits.softmax(-1)
    if key_mask is not None:
        w = w.masked_fill(empty, 0.0)
    out = (w @ v).transpose(1, 2).reshape(B, Lq, C)
    return (out, w) if return_weights else out


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int | None = None, zero_out: bool = True):
        super().__init__()
        self.heads = heads
        ctx = context_dim or dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx, dim, bias=False)
        self.to_v = nn.Linear(ctx, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x, context=None, key_mask=None, return_weights: bool = False):
        context = x if context is None else context
        res = attention(self.to_q(x), self.to_k(context), self.to_v(context), self.heads, key_mask, return_weights)
        if return_weights:
            out, w = res
            return self.to_out(out), w
        return self.to_out(res)


def _to_frame_tokens(x):
    B, C, T, h, w = x.shape
    return x.permute(0, 2, 3, 4, 1).reshape(B * T, h * w, C)


def _from_frame_tokens(tok, B, T, h, w):
    C = tok.shape[-1]
    return tok.reshape(B, T, h, w, C).permute(0, 4, 1, 2, 3)


class SpatialAttention(nn.Module):
    """Self-attention across the spatial positions of each frame."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, x, **_):
        B, C, T, h, w = x.shape
        tok = _to_frame_tokens(x)
        tok = tok + self.attn(self.norm(tok))
        return _from_frame_tokens(tok, B, T, h, w)


class GatedSelfAttention(nn.Module):
    """Visual tokens attend over ``[visual; grounding]``; the update is scaled by ``tanh(gate)``."""

    def __init__(self, dim: int, heads: int, grounding_dim: int):
        super().__init__()
        self.proj = nn.Linear(grounding_dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, zero_out=False)
        self.gate = nn.Parameter(torch.zeros(()))

    def forward(self, x, grounding=None, grounding_valid=None, **_):
        B, C, T, h, w = x.shape
        tok = _to_frame_tokens(x)
        if grounding is None:
            seq, mask = tok, None
        else:
            g = self.proj(grounding.reshape(B * T, grounding.shape[-2], grounding.shape[-1]))
            seq = torch.cat([tok, g], dim=1)
            vis = torch.ones(B * T, h * w, dtype=torch.bool, device=x.device)
            mask = torch.cat([vis, grounding_valid.reshape(B * T, -1)], dim=1)
        out = self.attn(self.norm(seq), key_mask=mask)[:, : h * w]
        tok = tok + torch.tanh(self.gate) * out
        return _from_frame_tokens(tok, B, T, h, w)


class CrossAttention(nn.Module):
    """Visual queries against text keys/values."""

    def __init__(self, dim: int, heads: int, context_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, context_dim)

    def forward(self, x, context=None, context_mask=None, **_):
        if context is None:
            return x
        if context.shape[1] > MAX_TOKENS:
            raise DomainError(f"text context of {context.shape[1]} tokens exceeds {MAX_TOKENS}")
        B, C, T, h, w = x.shape
        tok = _to_frame_tokens(x)
        ctx = context.repeat_interleave(T, dim=0)
        mask = None if context_mask is None else context_mask.repeat_interleave(T, dim=0)
        tok = tok + self.attn(self.norm(tok), ctx, key_mask=mask)
        return _from_frame_tokens(tok, B, T, h, w)


def sinusoid(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    ang = positions.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TemporalAttention(nn.Module):
    """Self-attention across frames at each spatial position."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.dim = dim

    def forward(self, x, **_):
        B, C, T, h, w = x.shape
        tok = x.permute(0, 3, 4, 2, 1).reshape(B * h * w, T, C)
        pos = sinusoid(torch.arange(T, device=x.device), C).to(x.dtype)
        tok = tok + self.attn(self.norm(tok) + pos)
        return tok.reshape(B, h, w, T, C).permute(0, 4, 3, 1, 2)


class Conv3dBlock(nn.Module):
    """Four temporal convolutions with kernel (3, 1, 1), replicate padding, residual."""

    def __init__(self, dim: int, layers: int = 4):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv3d(dim, dim, (3, 1, 1), padding=(1, 0, 0), padding_mode="replicate") for _ in range(layers)
        )

    def forward(self, x, **_):
        if x.ndim != 5 or x.shape[2] < 1:
            raise ShapeError(f"expected (B, C, T>=1, h, w), got {tuple(x.shape)}")
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.silu(h)
        return x + h


class CAB3D(nn.Module):
    """3D cross-attention block."""

    def __init__(self, dim: int, cfg: UNetConfig):
        super().__init__()
        self.order = cfg.block_order
        self.parts = nn.ModuleDict({
            "conv": Conv3dBlock(dim),
            "sa": SpatialAttention(dim, cfg.heads),
            "ga": GatedSelfAttention(dim, cfg.heads, cfg.grounding_dim),
            "ca": CrossAttention(dim, cfg.heads, cfg.context_dim),
            "ta": TemporalAttention(dim, cfg.heads),
        })

    def forward(self, x, **cond):
        for name in self.order:
            x = self.parts[name](x, **cond)
        return x


class ResBlock(nn.Module):
    """Per-frame 3x3 residual block with timestep scale/shift modulation."""

    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv3d(cin, cout, (1, 3, 3), padding=(0, 1, 1))
        self.time = nn.Linear(temb, 2 * cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv3d(cout, cout, (1, 3, 3), padding=(0, 1, 1))
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time(temb)[:, :, None, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class UNet3D(nn.Module):
    """Noise predictor ``e_hat = phi(z_k, k, text, boxes)``."""

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or UNetConfig()
        C0 = cfg.base_channels
        chans = [C0 * m for m in cfg.channel_mult]
        temb = 4 * C0
        self.time_mlp = nn.Sequential(nn.Linear(C0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.grounding = GroundingNet(cfg.fourier_freqs, cfg.grounding_dim, cfg.use_class_embedding, cfg.num_classes)
        self.stem = nn.Conv3d(cfg.latent_channels, C0, (1, 3, 3), padding=(0, 1, 1))

        self.down_res = nn.ModuleList()
        self.down_cab = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cin = C0
        for i, c in enumerate(chans):
            self.down_res.append(ResBlock(cin, c, temb))
            self.down_cab.append(CAB3D(c, cfg))
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv3d(c, c, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)))
            cin = c

        self.up_conv = nn.ModuleList()
        self.up_res = nn.ModuleList()
        self.up_cab = nn.ModuleList()
        for i in reversed(range(len(chans) - 1)):
            self.up_conv.append(nn.Conv3d(cin, chans[i], (1, 3, 3), padding=(0, 1, 1)))
            self.up_res.append(ResBlock(2 * chans[i], chans[i], temb))
            self.up_cab.append(CAB3D(chans[i], cfg))
            cin = chans[i]

        self.out_norm = nn.GroupNorm(8, C0)
        self.out_conv = nn.Conv3d(C0, cfg.latent_channels, (1, 3, 3), padding=(0, 1, 1))
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        if cfg.input_skip:
            # time-dependent per-channel pass-through of z_k; zero at init
            self.skip_gain = nn.Linear(temb, cfg.latent_channels)
            nn.init.zeros_(self.skip_gain.weight)
            nn.init.zeros_(self.skip_gain.bias)
        else:
            self.skip_gain = None

    def forward(self, z, k, context=None, context_mask=None, boxes=None, box_valid=None, box_classes=None):
        """``z``: ``(B, c, T, h, w)`` noisy latent; ``k``: ``(B,)`` steps; returns ``e_hat`` like ``z``."""
        cfg = self.cfg
        if z.ndim != 5 or z.shape[1] != cfg.latent_channels:
            raise ShapeError(f"expected (B, {cfg.latent_channels}, T, h, w), got {tuple(z.shape)}")
        n_down = len(cfg.channel_mult) - 1
        if z.shape[3] % (2**n_down) or z.shape[4] % (2**n_down):
            raise ShapeError(f"latent grid {tuple(z.shape[3:])} not divisible by {2**n_down}")
        B, _, T = z.shape[:3]
        k = torch.as_tensor(k, device=z.device).reshape(-1).expand(B)
        temb = self.time_mlp(sinusoid(k, cfg.base_channels))
        cond = {"context": context, "context_mask": context_mask}
        if boxes is not None:
            if boxes.shape[:2] != (B, T):
                raise ShapeError(f"boxes {tuple(boxes.shape)} do not match batch {B} x frames {T}")
            cond["grounding"] = self.grounding(boxes, box_valid, box_classes)
            cond["grounding_valid"] = box_valid

        h = self.stem(z)
        skips = []
        for i in range(len(self.down_res)):
            h = self.down_cab[i](self.down_res[i](h, temb), **cond)
            if i < n_down:
                skips.append(h)
                h = self.downsample[i](h)
        for conv, res, cab in zip(self.up_conv, self.up_res, self.up_cab):
            h = F.interpolate(h, scale_factor=(1, 2, 2), mode="nearest")
            h = conv(h)
            h = cab(res(torch.cat([h, skips.pop()], dim=1), temb), **cond)
        out = self.out_conv(F.silu(self.out_norm(h)))
        if self.skip_gain is not None:
            out = out + self.skip_gain(temb)[:, :, None, None, None] * z
        return out

    def attention_parameters(self):
        """Parameters trained in attention-only mode (the low-rank fine-tuning analogue)."""
        for name, p in self.named_parameters():
            if any(tag in name for tag in (".sa.", ".ga.", ".ca.", ".ta.", "grounding.", "skip_gain")):
                yield p

    def gates(self) -> list[nn.Parameter]:
        return [m.gate for m in self.modules() if isinstance(m, GatedSelfAttention)]
