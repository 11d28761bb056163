"""On-disk scenario store: one directory of PNG frames plus ``meta.json`` per scenario."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import CompatibilityError, PathError
from .scenario import BBoxTrack, Scenario, TemporalAnnotation, TextAnnotation

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def scenario_dirname(index: int) -> str:
    return f"scenario_{index:05d}"


def save_scenario(directory, s: Scenario, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(s.pixels):
        Image.fromarray(frame, "RGB").save(d / f"{t:05d}.png", optimize=False)
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": s.seed,
        "shape": list(s.pixels.shape),
        "annotation": {"t_ai": s.annotation.t_ai, "t_co": s.annotation.t_co, "t_ae": s.annotation.t_ae},
        "tracks": [
            {
                "class_id": tr.class_id,
                "present": tr.present.astype(int).tolist(),
                "boxes": [list(map(float, b)) if p else None for b, p in zip(tr.boxes, tr.present)],
            }
            for tr in s.tracks
        ],
        "texts": {k: list(getattr(s.texts, k)) for k in ("t_r", "t_p", "t_a", "t_a_neg")},
        "text_strings": s.texts.strings(),
        "info": s.info,
        **(extra or {}),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def load_scenario(directory) -> Scenario:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise PathError(f"no meta.json in {d}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CompatibilityError(f"{d}: store format {meta.get('format_version')}, expected {FORMAT_VERSION}")
    T = meta["shape"][0]
    pixels = np.stack([np.asarray(Image.open(d / f"{t:05d}.png").convert("RGB")) for t in range(T)])
    tracks = []
    for tr in meta["tracks"]:
        present = np.asarray(tr["present"], dtype=bool)
        boxes = np.array([b if b is not None else [np.nan] * 4 for b in tr["boxes"]], dtype=np.float64)
        tracks.append(BBoxTrack(tr["class_id"], boxes, present))
    texts = TextAnnotation(**{k: tuple(v) for k, v in meta["texts"].items()})
    return Scenario(pixels, TemporalAnnotation(**meta["annotation"]), tracks, texts, meta["seed"], meta["info"])


def write_store(root, scenarios: Iterable[Scenario], manifest_extra: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(scenarios):
        name = scenario_dirname(i)
        save_scenario(root / name, s)
        entries.append({"dir": name, "seed": s.seed})
    manifest = {"format_version": FORMAT_VERSION, "count": len(entries), "scenarios": entries, **(manifest_extra or {})}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise PathError(f"no scenario manifest at {path}")
    m = json.loads(path.read_text())
    if m.get("format_version") != FORMAT_VERSION:
        raise CompatibilityError(f"{path}: store format {m.get('format_version')}, expected {FORMAT_VERSION}")
    return m


def load_store(root, indices: Iterable[int] | None = None) -> list[Scenario]:
    m = read_manifest(root)
    entries = m["scenarios"]
    picks = range(len(entries)) if indices is None else indices
    return [load_scenario(Path(root) / entries[i]["dir"]) for i in picks]
