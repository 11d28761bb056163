"""Pixel clip <-> latent clip, masked clips, and latent background masks.

The default codec is exact: each 8x8 pixel block is flattened (space to
depth) and its 8*8*C values are reordered by a fixed permutation.  A
permutation is the only orthonormal mixing that is also bit-exact to invert
in floating point, which the background-fidelity checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConventionError, ShapeError
from .scenario import BBoxTrack, VideoClip, box_pixel_bounds

FACTOR = 8
RANGES = ("unit", "signed")


@dataclass
class LatentClip:
    values: np.ndarray  # T x h x w x c
    range: str = "unit"

    def __post_init__(self):
        if self.range not in RANGES:
            raise ConventionError(f"unknown range convention {self.range!r}")

    @property
    def shape(self):
        return self.values.shape

    def to_signed(self) -> "LatentClip":
        if self.range == "signed":
            return self
        return LatentClip(self.values * 2.0 - 1.0, "signed")

    def to_unit(self) -> "LatentClip":
        if self.range == "unit":
            return self
        return LatentClip((self.values + 1.0) * 0.5, "unit")


def _frames_of(clip) -> np.ndarray:
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ShapeError(f"expected a T x H x W x C clip, got shape {frames.shape}")
    return frames


class PixelShuffleCodec:
    """Deterministic, exactly invertible space-to-depth codec."""

    name = "pixel-shuffle-v1"

    def __init__(self, channels: int = 3, factor: int = FACTOR, seed: int = 0):
        self.channels = channels
        self.factor = factor
        self.seed = seed
        self.latent_channels = factor * factor * channels
        self.perm = np.random.default_rng(seed).permutation(self.latent_channels)
        self.inv_perm = np.argsort(self.perm)

    def encode(self, clip) -> LatentClip:
        x = _frames_of(clip)
        T, H, W, C = x.shape
        f = self.factor
        if H % f or W % f:
            raise ShapeError(f"frame size {H}x{W} not divisible by {f}")
        if C != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {C}")
        z = x.reshape(T, H // f, f, W // f, f, C).transpose(0, 1, 3, 2, 4, 5).reshape(T, H // f, W // f, f * f * C)
        return LatentClip(np.ascontiguousarray(z[..., self.perm]), "unit")

    def decode(self, latent: LatentClip) -> np.ndarray:
        z = latent.to_unit().values if isinstance(latent, LatentClip) else np.asarray(latent)
        T, h, w, c = z.shape
        if c != self.latent_channels:
            raise ShapeError(f"expected {self.latent_channels} latent channels, got {c}")
        f, C = self.factor, self.channels
        z = z[..., self.inv_perm].reshape(T, h, w, f, f, C).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(z.reshape(T, h * f, w * f, C))

    def header(self) -> dict:
        return {"name": self.name, "channels": self.channels, "factor": self.factor, "seed": self.seed}


def encode(clip, codec: PixelShuffleCodec | None = None) -> LatentClip:
    return (codec or PixelShuffleCodec()).encode(clip)


def decode(latent: LatentClip, codec: PixelShuffleCodec | None = None) -> np.ndarray:
    return (codec or PixelShuffleCodec()).decode(latent)


def _aligned(tracks: Sequence[BBoxTrack], clip, n_frames: int) -> list[BBoxTrack]:
    if isinstance(clip, VideoClip) and tracks and len(tracks[0]) != n_frames:
        return [tr.select(clip.indices) for tr in tracks]
    for tr in tracks:
        if len(tr) != n_frames:
            raise ShapeError(f"track has {len(tr)} frames, clip has {n_frames}")
    return list(tracks)


def mask_clip(clip, tracks: Sequence[BBoxTrack]) -> np.ndarray:
    """Copy of the clip with every pixel inside a box set to 0.

    Tracks are aligned frame-by-frame with the clip; a :class:`VideoClip` may
    instead be given full-length tracks, which are indexed by its frame indices.
    """
    x = _frames_of(clip)
    T, H, W, _ = x.shape
    out = x.copy()
    for tr in _aligned(tracks, clip, T):
        for t in range(T):
            if tr.present[t]:
                r0, r1, c0, c1 = box_pixel_bounds(tr.boxes[t], H, W)
                out[t, r0:r1, c0:c1] = 0
    return out


def binarize_latent(z_l) -> np.ndarray:
    """Threshold a unit-range latent at 0.5 (1 where ``z_l >= 0.5``)."""
    if isinstance(z_l, LatentClip):
        if z_l.range != "unit":
            raise ConventionError("binarize_latent needs a unit-range latent; call to_unit() first")
        z_l = z_l.values
    z_l = np.asarray(z_l)
    return (z_l >= 0.5).astype(np.float32)


def rasterize_latent_mask(
    tracks: Sequence[BBoxTrack], latent_shape: tuple[int, int, int, int], factor: int = FACTOR
) -> np.ndarray:
    """Background indicator on the latent grid: 0 on cells touched by any box."""
    T, h, w, c = latent_shape
    H, W = h * factor, w * factor
    cells = np.ones((T, h, w), dtype=np.float32)
    for tr in tracks:
        if len(tr) != T:
            raise ShapeError(f"track has {len(tr)} frames, latent has {T}")
        for t in range(T):
            if not tr.present[t]:
                continue
            r0, r1, c0, c1 = box_pixel_bounds(tr.boxes[t], H, W)
            if r1 <= r0 or c1 <= c0:
                continue
            cells[t, r0 // factor : (r1 - 1) // factor + 1, c0 // factor : (c1 - 1) // factor + 1] = 0
    return np.repeat(cells[..., None], c, axis=-1)


def literal_latent_mask(clip, tracks: Sequence[BBoxTrack], codec: PixelShuffleCodec | None = None) -> np.ndarray:
    """Mask mode that binarizes the latent of the object-masked clip."""
    codec = codec or PixelShuffleCodec()
    return binarize_latent(codec.encode(mask_clip(clip, tracks)))


# -- persistence ---------------------------------------------------------------

_LATENT_MAGIC = "ADVLATENT/1"


def save_latent(path, latent: LatentClip) -> None:
    v = np.ascontiguousarray(latent.values, dtype="<f4")
    shape = ",".join(str(s) for s in v.shape)
    header = f"{_LATENT_MAGIC} dtype=float32 shape={shape} range={latent.range}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.tobytes())


def load_latent(path) -> LatentClip:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    fields = data[:nl].decode("ascii").split()
    if fields[0] != _LATENT_MAGIC:
        raise ConventionError(f"{path}: not a latent file")
    kv = dict(f.split("=", 1) for f in fields[1:])
    if kv["dtype"] != "float32":
        raise ConventionError(f"unsupported dtype {kv['dtype']}")
    shape = tuple(int(s) for s in kv["shape"].split(","))
    values = np.frombuffer(data[nl + 1 :], dtype="<f4").reshape(shape).astype(np.float32)
    return LatentClip(values, kv["range"])
