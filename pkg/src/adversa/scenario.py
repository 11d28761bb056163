"""Procedural accident scenarios with exact ground truth.

A scenario is a short ego-view video of two interacting road users (an
*actor* that causes the accident and a *target* it hits) plus up to a few
background vehicles.  Objects are solid rectangles drawn on a smooth
textured background, so rasterizing the box tracks reproduces the object
pixels exactly.  Everything is a pure function of ``(seed, config)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import text as grammar
from .errors import ConfigurationError, DegenerateSegmentError, DomainError, InvariantViolation

CLIP_LEN = 16
NEAR_WINDOW = 40
GROUPS = ("o", "r", "p", "a")
POLARITIES = ("positive", "negative_1", "negative_2")

CLASS_IDS = {"car": 0, "pedestrian": 1, "cyclist": 2, "truck": 3}
CLASS_NAMES = {v: k for k, v in CLASS_IDS.items()}

# (width, height) in pixels on a 64x64 canvas
_CLASS_SIZE = {"car": (12, 9), "pedestrian": (5, 9), "cyclist": (6, 10), "truck": (16, 12)}
_CLASS_COLOR = {
    "car": (0.20, 0.40, 0.90),
    "pedestrian": (0.95, 0.85, 0.20),
    "cyclist": (0.15, 0.80, 0.35),
    "truck": (0.70, 0.30, 0.80),
}
_LOCATION_COLOR = {
    "city": (0.50, 0.50, 0.52),
    "highway": (0.30, 0.33, 0.42),
    "rural": (0.55, 0.48, 0.30),
}
_HAZARD = np.array([1.0, 0.1, 0.1])

DEFAULT_NEGATIVE_MAP: dict[str, tuple[str, str]] = {
    "o": ("t_a", "t_r"),
    "r": ("t_p", "t_a_neg"),
    "p": ("t_r", "t_a"),
    "a": ("t_a_neg", "t_p"),
}
_POSITIVE_TEXT = {"o": "t_a_neg", "r": "t_r", "p": "t_p", "a": "t_a"}
_TEXT_FIELDS = ("t_r", "t_p", "t_a", "t_a_neg")


@dataclass(frozen=True)
class GeneratorConfig:
    T: int = 120
    H: int = 64
    W: int = 64
    C: int = 3
    max_background: int = 2
    max_retries: int = 64

    def validate(self) -> None:
        if self.T < 72:
            raise ConfigurationError(f"T={self.T}: need T >= 72 for three 16-frame segments")
        if self.H < 32 or self.W < 32:
            raise ConfigurationError(f"frame size {self.H}x{self.W} below 32x32")
        if self.C != 3:
            raise ConfigurationError("only RGB frames (C=3) are supported")
        if self.max_background < 0 or self.max_retries < 1:
            raise ConfigurationError("max_background must be >= 0 and max_retries >= 1")


@dataclass(frozen=True)
class TemporalAnnotation:
    t_ai: int
    t_co: int
    t_ae: int

    @property
    def near_start(self) -> int:
        return max(0, self.t_ai - NEAR_WINDOW)


@dataclass
class BBoxTrack:
    """Per-frame normalized boxes ``(x_min, y_min, x_max, y_max)``.

    ``present[t]`` is False where the object is out of view; the matching row
    of ``boxes`` is NaN.
    """

    class_id: int
    boxes: np.ndarray
    present: np.ndarray

    def box(self, t: int):
        return tuple(float(v) for v in self.boxes[t]) if self.present[t] else None

    def select(self, indices) -> "BBoxTrack":
        idx = np.asarray(indices)
        return BBoxTrack(self.class_id, self.boxes[idx].copy(), self.present[idx].copy())

    def reversed(self) -> "BBoxTrack":
        return BBoxTrack(self.class_id, self.boxes[::-1].copy(), self.present[::-1].copy())

    def __len__(self) -> int:
        return len(self.present)


@dataclass(frozen=True)
class TextAnnotation:
    t_r: tuple[int, ...]
    t_p: tuple[int, ...]
    t_a: tuple[int, ...]
    t_a_neg: tuple[int, ...]

    @classmethod
    def from_strings(cls, t_r: str, t_p: str, t_a: str, t_a_neg: str) -> "TextAnnotation":
        return cls(*(tuple(grammar.tokenize(s)) for s in (t_r, t_p, t_a, t_a_neg)))

    def get(self, name: str) -> tuple[int, ...]:
        if name not in _TEXT_FIELDS:
            raise ConfigurationError(f"unknown text field {name!r}")
        return getattr(self, name)

    def strings(self) -> dict[str, str]:
        return {k: grammar.detokenize(getattr(self, k)) for k in _TEXT_FIELDS}


@dataclass
class Scenario:
    pixels: np.ndarray  # uint8, T x H x W x C
    annotation: TemporalAnnotation
    tracks: list[BBoxTrack]
    texts: TextAnnotation
    seed: int
    info: dict = field(default_factory=dict)

    @property
    def frames(self) -> np.ndarray:
        """Float32 frames in [0, 1]; computed on access from the 8-bit pixels."""
        return to_unit(self.pixels)

    @property
    def T(self) -> int:
        return self.pixels.shape[0]


@dataclass
class VideoClip:
    frames: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class CoCP:
    clip: VideoClip
    text: tuple[int, ...]
    polarity: str
    group: str
    reversed: bool = False


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


# -- geometry -----------------------------------------------------------------


def box_pixel_bounds(box, H: int, W: int) -> tuple[int, int, int, int]:
    """Pixel index bounds ``(r0, r1, c0, c1)`` of the pixels whose centre lies in ``box``.

    A pixel ``(i, j)`` is inside when ``x_min <= (j + .5) / W < x_max`` and
    likewise for rows.  Rendering and masking both go through this function.
    """
    x0, y0, x1, y1 = box
    c0 = max(0, math.ceil(x0 * W - 0.5))
    c1 = min(W, math.ceil(x1 * W - 0.5))
    r0 = max(0, math.ceil(y0 * H - 0.5))
    r1 = min(H, math.ceil(y1 * H - 0.5))
    return r0, max(r0, r1), c0, max(c0, c1)


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / area


def object_mask(tracks: Sequence[BBoxTrack], indices, H: int, W: int) -> np.ndarray:
    """Boolean ``(len(indices), H, W)`` union of the boxes at each frame."""
    indices = np.asarray(indices)
    out = np.zeros((len(indices), H, W), dtype=bool)
    for n, t in enumerate(indices):
        for tr in tracks:
            if tr.present[t]:
                r0, r1, c0, c1 = box_pixel_bounds(tr.boxes[t], H, W)
                out[n, r0:r1, c0:c1] = True
    return out


# -- generation ---------------------------------------------------------------


def _scaled_size(name: str, sx: float, sy: float, rng) -> tuple[int, int]:
    w, h = _CLASS_SIZE[name]
    w = max(2, round((w + rng.integers(-1, 2)) * sx))
    h = max(2, round((h + rng.integers(-1, 2)) * sy))
    return w, h


def _gap_profile(T: int, ann: TemporalAnnotation, g0: int, g1: int, depth: int) -> np.ndarray:
    """Signed gap between actor and target: steady, closing, overlapping, stuck."""
    t = np.arange(T, dtype=float)
    ns, ai, co = ann.near_start, ann.t_ai, ann.t_co
    gap = np.full(T, float(g0))
    closing = (t >= ns) & (t < ai)
    gap[closing] = g0 + (g1 - g0) * (t[closing] - ns) / max(1, ai - ns)
    crash = (t >= ai) & (t < co)
    gap[crash] = g1 + (-depth - g1) * (t[crash] - ai) / max(1, co - ai)
    gap[t >= co] = -depth
    return np.round(gap).astype(int)


def _tint_profile(T: int, ann: TemporalAnnotation) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(T, dtype=float)
    ns, ai, co = ann.near_start, ann.t_ai, ann.t_co
    actor = np.interp(t, [ns, ai, co], [0.0, 0.5, 0.8])
    target = np.where(t >= co, 0.6, 0.0)
    return actor, target


def _layout(action: int, T: int, H: int, W: int, ann, actor_wh, target_wh, rng):
    """Pixel rectangles ``(T, 4)`` as (c0, r0, c1, r1) for actor and target, or None."""
    sx, sy = W / 64.0, H / 64.0
    wa, ha = actor_wh
    wt, ht = target_wh
    zone_top = round(16 * sy)
    depth = int(rng.integers(2, 5))
    if depth >= min(wa, wt, ha, ht):
        depth = max(1, min(wa, wt, ha, ht) - 1)
    g1 = int(rng.integers(1, 4))
    drift_phase = rng.uniform(0, 2 * math.pi)
    tt = np.arange(T)
    drift = np.where(tt < ann.near_start, np.round(np.sin(2 * math.pi * tt / 24 + drift_phase)), 0).astype(int)

    actor = np.zeros((T, 4), dtype=int)
    target = np.zeros((T, 4), dtype=int)
    if action in (0, 1):
        g0 = int(rng.integers(round(14 * sx), round(22 * sx) + 1))
        lo, hi = zone_top + 2, H - ht - 2
        if hi < lo:
            return None
        yt = int(rng.integers(lo, hi + 1))
        ya = yt + (ht - ha) // 2 + int(rng.integers(-2, 3))
        ya = int(np.clip(ya, zone_top + 1, H - ha - 2))
        gap = _gap_profile(T, ann, g0, g1, depth)
        margin = int(rng.integers(1, 5))
        if action == 0:
            xt = g0 + wa + margin
            if xt + wt > W - 1:
                return None
            target[:] = (xt, yt, xt + wt, yt + ht)
            x1 = xt - gap
            actor[:, 0], actor[:, 2] = x1 - wa, x1
        else:
            xt1 = W - (g0 + wa + margin)
            if xt1 - wt < 1:
                return None
            target[:] = (xt1 - wt, yt, xt1, yt + ht)
            x0 = xt1 + gap
            actor[:, 0], actor[:, 2] = x0, x0 + wa
        actor[:, 1] = ya + drift
        actor[:, 3] = actor[:, 1] + ha
    else:
        xa = int(rng.integers(4, W - max(wa, wt) - 4))
        xt = xa + (wa - wt) // 2 + int(rng.integers(-2, 3))
        xt = int(np.clip(xt, 1, W - wt - 1))
        if action == 2:
            ya = zone_top + int(rng.integers(0, 4))
            g_max = H - 1 - ht - (ya + ha)
            if g_max < round(10 * sy):
                return None
            g0 = int(rng.integers(round(10 * sy), min(g_max, round(18 * sy)) + 1))
            gap = _gap_profile(T, ann, g0, g1, depth)
            actor[:] = (xa, ya, xa + wa, ya + ha)
            actor[:, 0] += drift
            actor[:, 2] += drift
            y0 = ya + ha + gap
            target[:, 0], target[:, 2] = xt, xt + wt
            target[:, 1], target[:, 3] = y0, y0 + ht
        else:
            yt = H - ht - int(rng.integers(1, 5))
            g_max = yt - ha - zone_top
            if g_max < round(10 * sy):
                return None
            g0 = int(rng.integers(round(10 * sy), min(g_max, round(18 * sy)) + 1))
            gap = _gap_profile(T, ann, g0, g1, depth)
            target[:] = (xt, yt, xt + wt, yt + ht)
            y1 = yt - gap
            actor[:, 1], actor[:, 3] = y1 - ha, y1
            actor[:, 0] = xa + drift
            actor[:, 2] = actor[:, 0] + wa
    return actor, target


def _background_tracks(T: int, H: int, W: int, n: int, rng) -> list[tuple[str, np.ndarray, np.ndarray]]:
    sx, sy = W / 64.0, H / 64.0
    band = round(14 * sy)
    v = float(rng.choice([-1.0, -0.5, 0.5, 1.0])) * sx
    x = float(rng.integers(-10, W))
    out = []
    for _ in range(n):
        name = str(rng.choice(["car", "truck"]))
        w, h = _CLASS_SIZE[name]
        w, h = max(2, round(w * sx)), max(2, min(band - 1, round(h * sy)))
        y0 = int(rng.integers(1, max(2, band - h + 1)))
        x0 = np.round(x + v * np.arange(T)).astype(int)
        rect = np.stack([x0, np.full(T, y0), x0 + w, np.full(T, y0 + h)], axis=1)
        clipped = rect.copy()
        clipped[:, [0, 2]] = np.clip(rect[:, [0, 2]], 0, W)
        present = clipped[:, 2] > clipped[:, 0]
        out.append((name, clipped, present))
        x += w + float(rng.integers(6, 21)) * sx
    return out


def _render_background(H: int, W: int, location: str, rng) -> np.ndarray:
    base = np.array(_LOCATION_COLOR[location]) + rng.uniform(-0.04, 0.04, size=3)
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    tex = np.zeros((H, W))
    for _ in range(3):
        fx, fy = rng.integers(0, 3, size=2)
        tex += 0.035 * np.sin(2 * math.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * math.pi))
    shade = 0.06 * (yy - 0.5)  # brighter near the ego vehicle
    return np.clip(base[None, None, :] + (tex + shade)[..., None], 0.0, 1.0)


def _sample_timeline(T: int, rng) -> TemporalAnnotation:
    hi = min(72, T - 16)
    t_ai = int(rng.integers(56, hi + 1))
    t_co = min(T - 1, t_ai + int(rng.integers(4, 11)))
    t_ae = min(T - 1, t_co + int(rng.integers(20, 36)))
    return TemporalAnnotation(t_ai, t_co, t_ae)


def _attempt(seed: int, attempt: int, cfg: GeneratorConfig) -> Scenario | None:
    rng = np.random.default_rng([seed, attempt])
    T, H, W = cfg.T, cfg.H, cfg.W
    sx, sy = W / 64.0, H / 64.0

    actor_name = str(rng.choice(grammar.ACTORS))
    target_name = str(rng.choice(grammar.TARGETS))
    location = str(rng.choice(grammar.LOCATIONS))
    action = int(rng.integers(0, len(grammar.ACTION_PHRASES)))
    ann = _sample_timeline(T, rng)
    if ann.t_ae - ann.t_ai + 1 < CLIP_LEN:
        return None

    actor_wh = _scaled_size(actor_name, sx, sy, rng)
    target_wh = _scaled_size(target_name, sx, sy, rng)
    layout = _layout(action, T, H, W, ann, actor_wh, target_wh, rng)
    if layout is None:
        return None
    actor_px, target_px = layout
    n_bg = int(rng.integers(0, cfg.max_background + 1))
    bg = _background_tracks(T, H, W, n_bg, rng)

    rects = [(actor_name, actor_px, np.ones(T, bool)), (target_name, target_px, np.ones(T, bool)), *bg]
    for _, r, p in rects:
        if np.any(r[p][:, 0] < 0) or np.any(r[p][:, 2] > W) or np.any(r[p][:, 1] < 0) or np.any(r[p][:, 3] > H):
            return None

    background = _render_background(H, W, location, rng)
    actor_tint, target_tint = _tint_profile(T, ann)
    video = np.broadcast_to(background, (T, H, W, 3)).copy()
    # draw order: background traffic, target, actor on top
    draw = [(i, rects[i]) for i in range(2, len(rects))] + [(1, rects[1]), (0, rects[0])]
    for idx, (name, r, p) in draw:
        color = np.array(_CLASS_COLOR[name])
        for t in range(T):
            if not p[t]:
                continue
            tint = actor_tint[t] if idx == 0 else target_tint[t] if idx == 1 else 0.0
            c0, r0, c1, r1 = r[t]
            video[t, r0:r1, c0:c1] = (1 - tint) * color + tint * _HAZARD
    pixels = np.round(np.clip(video, 0, 1) * 255).astype(np.uint8)

    tracks = []
    for name, r, p in rects:
        boxes = np.full((T, 4), np.nan)
        boxes[p] = r[p] / np.array([W, H, W, H], dtype=float)
        tracks.append(BBoxTrack(CLASS_IDS[name], boxes, p.copy()))

    t_a = grammar.category_text(actor_name, target_name)
    texts = TextAnnotation.from_strings(
        grammar.reason_text(actor_name, action, location),
        grammar.prevention_text(actor_name, action, target_name, location),
        t_a,
        grammar.negate(t_a),
    )
    info = {"actor": actor_name, "target": target_name, "location": location, "action": action, "attempt": attempt}
    s = Scenario(pixels, ann, tracks, texts, seed, info)
    try:
        check_invariants(s)
    except InvariantViolation:
        return None
    return s


def generate_scenario(seed: int, cfg: GeneratorConfig | None = None) -> Scenario:
    """Generate one scenario.  Rejected draws are retried with a derived seed."""
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    for attempt in range(cfg.max_retries):
        s = _attempt(int(seed), attempt, cfg)
        if s is not None:
            return s
    raise ConfigurationError(f"no valid scenario for seed {seed} after {cfg.max_retries} attempts")


def corpus_seeds(master_seed: int, count: int) -> list[int]:
    state = np.random.SeedSequence(int(master_seed)).generate_state(count, dtype=np.uint32)
    return [int(s) for s in state]


def check_invariants(s: Scenario) -> None:
    """Raise :class:`InvariantViolation` if any scenario invariant fails."""
    T = s.T
    a = s.annotation
    if not (0 <= a.t_ai <= a.t_co <= a.t_ae <= T):
        raise InvariantViolation(f"bad ordering {a}")
    if len(s.tracks) < 2:
        raise InvariantViolation("fewer than two tracks")
    for k, tr in enumerate(s.tracks):
        if len(tr) != T:
            raise InvariantViolation(f"track {k} has {len(tr)} frames, expected {T}")
        b = tr.boxes[tr.present]
        if b.size and not (
            np.all(b[:, 0] >= 0) and np.all(b[:, 2] <= 1) and np.all(b[:, 1] >= 0) and np.all(b[:, 3] <= 1)
            and np.all(b[:, 0] < b[:, 2]) and np.all(b[:, 1] < b[:, 3])
        ):
            raise InvariantViolation(f"track {k} has an invalid box")
    for t in range(a.t_ai):
        present = [tr.box(t) for tr in s.tracks if tr.present[t]]
        for i in range(len(present)):
            for j in range(i + 1, len(present)):
                if box_iou(present[i], present[j]) > 0:
                    raise InvariantViolation(f"boxes overlap at frame {t} before t_ai={a.t_ai}")
    at_co = [tr.box(a.t_co) for tr in s.tracks if a.t_co < T and tr.present[a.t_co]]
    if not any(box_iou(p, q) > 0 for i, p in enumerate(at_co) for q in at_co[i + 1 :]):
        raise InvariantViolation(f"no overlapping boxes at t_co={a.t_co}")
    for name in _TEXT_FIELDS:
        if len(s.texts.get(name)) > grammar.MAX_TOKENS:
            raise InvariantViolation(f"{name} longer than {grammar.MAX_TOKENS} tokens")
    neg, pos = s.texts.t_a_neg, s.texts.t_a
    if len(neg) != len(pos) + 1 or not any(neg[:k] + neg[k + 1 :] == pos for k in range(len(neg))):
        raise InvariantViolation("t_a_neg is not t_a plus one inserted token")


# -- segments, clips and interaction groups -----------------------------------


def partition_segments(ann: TemporalAnnotation | Scenario, clip_len: int = CLIP_LEN) -> tuple[range, range, range]:
    """Normal, near-accident and accident frame ranges ``(V_o, V_r, V_a)``."""
    ann = getattr(ann, "annotation", ann)
    near = max(0, ann.t_ai - NEAR_WINDOW)
    v_o, v_r, v_a = range(0, near), range(near, ann.t_ai), range(ann.t_ai, ann.t_ae + 1)
    for name, seg in (("V_o", v_o), ("V_r", v_r), ("V_a", v_a)):
        if len(seg) < clip_len:
            raise DegenerateSegmentError(f"{name}={seg} shorter than {clip_len} frames")
    return v_o, v_r, v_a


def sample_clip(source, segment: range, rng: np.random.Generator, length: int = CLIP_LEN) -> VideoClip:
    """Uniformly placed window of ``length`` successive frames inside ``segment``.

    ``source`` is a :class:`Scenario`, a frame array, or None (indices only).
    """
    n_starts = len(segment) - length + 1
    if n_starts < 1:
        raise DegenerateSegmentError(f"segment {segment} shorter than {length} frames")
    start = segment.start + int(rng.integers(0, n_starts))
    idx = np.arange(start, start + length)
    if source is None:
        frames = None
    elif isinstance(source, Scenario):
        frames = to_unit(source.pixels[idx])
    else:
        frames = np.asarray(source)[idx]
    return VideoClip(frames, idx)


def reverse_clip(clip):
    if isinstance(clip, VideoClip):
        frames = None if clip.frames is None else clip.frames[::-1].copy()
        return VideoClip(frames, clip.indices[::-1].copy())
    return np.asarray(clip)[::-1].copy()


def _resolve_negative(
    rule: str, s: Scenario, positive: tuple[int, ...], pool: Sequence[TextAnnotation], rng
) -> tuple[int, ...]:
    if rule.startswith("pool:"):
        field_name = rule[5:]
        candidates = [d.get(field_name) for d in pool if d.get(field_name) != positive]
    else:
        cand = s.texts.get(rule)
        if cand != positive:
            return cand
        field_name = rule
        candidates = [d.get(field_name) for d in pool if d.get(field_name) != positive]
    if not candidates:
        raise DomainError(f"no negative for {rule!r} differs from the positive text")
    return candidates[int(rng.integers(0, len(candidates)))]


def build_interaction_groups(
    s: Scenario,
    distractor_pool: Sequence[TextAnnotation],
    rng: np.random.Generator,
    negative_map: Mapping[str, tuple[str, str]] | None = None,
    with_frames: bool = True,
) -> dict[str, list[CoCP]]:
    """Four interaction groups ``o, r, p, a`` of one positive and two negative Co-CPs.

    Positives: ``(V_o, t_a_neg)``, ``(V_r, t_r)``, ``(reverse(V_r), t_p)``,
    ``(V_a, t_a)``.  Negative pairs reuse the positive clip with the texts
    named in ``negative_map``; a ``"pool:<field>"`` entry draws that field from
    ``distractor_pool`` instead of the scenario itself.
    """
    if not distractor_pool:
        raise DomainError("distractor pool is empty")
    negative_map = dict(negative_map or DEFAULT_NEGATIVE_MAP)
    v_o, v_r, v_a = partition_segments(s)
    source = s if with_frames else None
    clips = {
        "o": sample_clip(source, v_o, rng),
        "r": sample_clip(source, v_r, rng),
        "p": reverse_clip(sample_clip(source, v_r, rng)),
        "a": sample_clip(source, v_a, rng),
    }
    groups = {}
    for g in GROUPS:
        positive = s.texts.get(_POSITIVE_TEXT[g])
        n1, n2 = (_resolve_negative(rule, s, positive, distractor_pool, rng) for rule in negative_map[g])
        rev = g == "p"
        groups[g] = [
            CoCP(clips[g], positive, "positive", g, rev),
            CoCP(clips[g], n1, "negative_1", g, rev),
            CoCP(clips[g], n2, "negative_2", g, rev),
        ]
    return groups


def positive_text_field(group: str) -> str:
    return _POSITIVE_TEXT[group]


def clip_tracks(tracks: Sequence[BBoxTrack], clip: VideoClip) -> list[BBoxTrack]:
    """Tracks restricted (and ordered) to the frames of ``clip``."""
    return [tr.select(clip.indices) for tr in tracks]
