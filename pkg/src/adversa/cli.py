"""``adversa`` command line: gen-data, train-clip, train-oavd, infer, eval, plot.

Every stage writes into the run directory (``--out``, else
``$ADVERSA_DATA_DIR``, else ``./adversa-data``) and stamps its artifacts with
the hash of the config sections it depends on.  Exit codes: 0 ok, 2 config
or path error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as C
from .abductive import AbductiveCLIP, ClipCorpus, load_clip, retrieval_accuracy, save_clip, train_abductive_clip
from .errors import CompatibilityError, ConfigurationError, InvariantViolation, PathError, TrainingError
from .metrics import (
    background_fidelity,
    clip_score,
    frechet_distance,
    plot_loss_curves,
    plot_metric_bars,
    read_metrics_csv,
    video_features,
    write_metrics_csv,
)
from .oavd import (
    GenerationRequest,
    generate_batch,
    load_oavd,
    new_model,
    random_tracks,
    smoothed,
    train_oavd,
    video_free_generate,
)
from .scenario import check_invariants, clip_tracks, corpus_seeds, generate_scenario, partition_segments, sample_clip
from .store import load_store, read_manifest, write_store

log = logging.getLogger("adversa")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
CONDITIONS = ("reason", "prevention", "fidelity")
BATCH = 8


class Run:
    """Resolved config plus the run directory layout."""

    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out
        self.store = out / "store"
        self.clip_dir = out / "clip"
        self.oavd_dir = out / "oavd"
        self.infer_dir = out / "infer"
        self.eval_dir = out / "eval"
        self.plot_dir = out / "plots"

    def hash(self, stage: str) -> str:
        return C.config_hash(self.cfg, stage)

    def stage_dir(self, d: Path) -> Path:
        d.mkdir(parents=True, exist_ok=True)
        C.dump_config(self.cfg, d / "config.yaml")
        return d

    def expect(self, found: str, stage: str, what: str) -> None:
        if found != self.hash(stage):
            raise CompatibilityError(
                f"{what} was produced under config hash {found}, current config gives {self.hash(stage)}"
            )


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise PathError(f"missing {path}")
    return json.loads(path.read_text())


def _save_frames(d: Path, frames: np.ndarray) -> None:
    d.mkdir(parents=True, exist_ok=True)
    pix = np.round(np.clip(frames, 0, 1) * 255).astype(np.uint8)
    for t, f in enumerate(pix):
        Image.fromarray(f, "RGB").save(d / f"{t:05d}.png")


def _load_frames(d: Path) -> np.ndarray:
    files = sorted(d.glob("*.png"))
    if not files:
        raise PathError(f"no frames in {d}")
    return np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files]).astype(np.float32) / 255.0


def _store_scenarios(run: Run, indices):
    m = read_manifest(run.store)
    run.expect(m.get("config_hash", ""), "data", f"scenario store {run.store}")
    return load_store(run.store, indices)


def _held_out(run: Run) -> range:
    d = run.cfg["data"]
    return range(d["n_train"], d["n_train"] + d["eval_count"])


# -- stages -----------------------------------------------------------------------


def cmd_gen_data(run: Run) -> dict:
    cfg = run.cfg
    gen = C.generator_config(cfg)
    seeds = corpus_seeds(cfg["seed"], cfg["data"]["count"])
    scenarios = []
    for s in seeds:
        sc = generate_scenario(s, gen)
        check_invariants(sc)
        scenarios.append(sc)
    run.stage_dir(run.store)
    write_store(run.store, scenarios, {"config_hash": run.hash("data"), "master_seed": cfg["seed"]})
    return {"count": len(scenarios)}


def _corpus(run: Run, indices) -> ClipCorpus:
    # pooled in chunks so full-resolution frames never pile up in memory
    parts = []
    idx = list(indices)
    for i in range(0, len(idx), 64):
        parts.append(ClipCorpus.from_scenarios(_store_scenarios(run, idx[i : i + 64])))
    return ClipCorpus(
        np.concatenate([p.pooled for p in parts]),
        sum((p.annotations for p in parts), []),
        sum((p.texts for p in parts), []),
        sum((p.seeds for p in parts), []),
    )


def cmd_train_clip(run: Run) -> dict:
    cfg = run.cfg
    n_train, count = cfg["data"]["n_train"], cfg["data"]["count"]
    train = _corpus(run, range(n_train))
    held = _corpus(run, range(n_train, count))
    d = run.stage_dir(run.clip_dir)
    t0 = time.perf_counter()
    torch.manual_seed(cfg["seed"])
    model, _ = train_abductive_clip(train, C.clip_train_config(cfg), AbductiveCLIP(C.clip_model_config(cfg)),
                                    log_path=d / "train_log.csv")
    runtime = time.perf_counter() - t0
    save_clip(d / "clip.ckpt", model, {"config_hash": run.hash("clip")})
    acc = retrieval_accuracy(model, held, seed=cfg["seed"])
    result = {"config_hash": run.hash("clip"), "heldout_retrieval_accuracy": acc, "n_heldout": len(held)}
    _write_json(d / "result.json", result)
    log.info("train-clip: %.1fs, held-out retrieval %.3f", runtime, acc)
    return result


def _load_clip_checked(run: Run):
    path = run.clip_dir / "clip.ckpt"
    model, meta = load_clip(path)
    run.expect(meta.get("config_hash", ""), "clip", str(path))
    return model, meta


def cmd_train_oavd(run: Run, untrained_text: bool = False) -> dict:
    cfg = run.cfg
    if untrained_text:
        torch.manual_seed(cfg["seed"])
        clip = AbductiveCLIP(C.clip_model_config(cfg))
        clip_id = "untrained"
    else:
        clip, meta = _load_clip_checked(run)
        clip_id = meta["config_hash"]
    scenarios = _store_scenarios(run, range(cfg["data"]["oavd_train"]))
    tcfg = C.oavd_train_config(cfg)
    torch.manual_seed(cfg["seed"])
    g = cfg["generator"]
    model = new_model(clip.text, C.unet_config(cfg), tcfg, (g["H"], g["W"]), C.codec_of(cfg))
    model.meta = {"config_hash": run.hash("oavd"), "clip_checkpoint": clip_id}
    d = run.stage_dir(run.oavd_dir)
    t0 = time.perf_counter()
    history = train_oavd(scenarios, model, tcfg, checkpoint_path=d / "oavd.ckpt", log_path=d / "loss.csv")
    runtime = time.perf_counter() - t0
    losses = [r["loss"] for r in history]
    sm = smoothed(losses)
    result = {
        "config_hash": run.hash("oavd"),
        "initial_loss": losses[0] if losses else None,
        "initial_mse": history[0]["mse"] if history else None,
        "final_smoothed_loss": float(sm[-1]) if len(sm) else None,
    }
    _write_json(d / "result.json", result)
    log.info("train-oavd: %.1fs, loss %s -> %s", runtime, result["initial_loss"], result["final_smoothed_loss"])
    return result


def _load_oavd_checked(run: Run):
    path = run.oavd_dir / "oavd.ckpt"
    model = load_oavd(path)
    run.expect(model.meta.get("config_hash", ""), "oavd", str(path))
    return model


def cmd_infer(run: Run) -> dict:
    cfg = run.cfg
    model = _load_oavd_checked(run)
    schedule, codec = C.oavd_train_config(cfg).schedule(), C.codec_of(cfg)
    inf = cfg["infer"]
    held = list(_held_out(run))
    scenarios = _store_scenarios(run, held)
    d = run.stage_dir(run.infer_dir)
    plans = []
    for i, s in zip(held, scenarios):
        rng = np.random.default_rng([cfg["seed"], i])
        _, v_r, _ = partition_segments(s)
        clip = sample_clip(s, v_r, rng)
        tracks = clip_tracks(s.tracks, clip)
        gen_seed = int(rng.integers(0, 2**31))
        plans.append((i, s, clip, tracks, gen_seed))
    jobs = {
        "reason": lambda s: (s.texts.t_r, inf["strength"]),
        "prevention": lambda s: (s.texts.t_p, inf["strength"]),
        "fidelity": lambda s: (s.texts.t_r, inf["fidelity_strength"]),
    }
    for name, how in jobs.items():
        for b in range(0, len(plans), BATCH):
            chunk = plans[b : b + BATCH]
            reqs = []
            for i, s, clip, tracks, gen_seed in chunk:
                tokens, strength = how(s)
                reqs.append(GenerationRequest(clip.frames, tuple(tokens), tracks, int(inf["steps"]), float(strength), gen_seed))
            outs = generate_batch(reqs, model, schedule, codec)
            for (i, s, clip, tracks, gen_seed), req, out in zip(chunk, reqs, outs):
                sd = d / f"scenario_{i:05d}"
                _save_frames(sd / name, out)
                entry = {"condition": name, "request": req.to_json(), "frame_indices": clip.indices.tolist()}
                gen_path = sd / "gen.json"
                doc = _read_json(gen_path) if gen_path.is_file() and name != CONDITIONS[0] else {
                    "checkpoint": model.meta["config_hash"], "config_hash": run.hash("eval"), "scenario_seed": s.seed,
                    "requests": []}
                doc["requests"].append(entry)
                _write_json(gen_path, doc)
    for i, s, clip, tracks, gen_seed in plans:
        _save_frames(d / f"scenario_{i:05d}" / "source", clip.frames)
    rng = np.random.default_rng(cfg["seed"])
    vf_tracks = random_tracks(rng, 4)
    vf = video_free_generate(vf_tracks, scenarios[0].texts.t_a, model, seed=cfg["seed"], steps=int(inf["steps"]))
    _save_frames(d / "video_free", vf)
    _write_json(d / "video_free" / "gen.json", {
        "checkpoint": model.meta["config_hash"], "seed": cfg["seed"], "tokens": list(scenarios[0].texts.t_a),
        "boxes": [tr.boxes.tolist() for tr in vf_tracks]})
    result = {"config_hash": run.hash("eval"), "scenarios": [f"scenario_{i:05d}" for i, *_ in plans]}
    _write_json(d / "result.json", result)
    return result


def cmd_eval(run: Run) -> dict:
    cfg = run.cfg
    clip, _ = _load_clip_checked(run)
    infer_result = _read_json(run.infer_dir / "result.json")
    run.expect(infer_result.get("config_hash", ""), "eval", str(run.infer_dir))
    held = list(_held_out(run))
    scenarios = _store_scenarios(run, held)
    clips = {c: [] for c in ("source", *CONDITIONS)}
    per_region = {c: [] for c in CONDITIONS}
    pair_region = []
    scores = {c: [] for c in ("source", *CONDITIONS)}
    texts = {"source": "t_r", "reason": "t_r", "prevention": "t_p", "fidelity": "t_r"}
    for i, s in zip(held, scenarios):
        sd = run.infer_dir / f"scenario_{i:05d}"
        gen = _read_json(sd / "gen.json")
        idx = np.asarray(gen["requests"][0]["frame_indices"])
        tracks = [tr.select(idx) for tr in s.tracks]
        frames = {c: _load_frames(sd / c) for c in clips}
        for c, f in frames.items():
            clips[c].append(f)
            scores[c].append(clip_score(f, s.texts.get(texts[c]), clip))
        for c in CONDITIONS:
            per_region[c].append(background_fidelity(frames["source"], frames[c], tracks))
        pair_region.append(background_fidelity(frames["reason"], frames["prevention"], tracks))
    real = video_features(np.stack(clips["source"]), clip, "real")
    feats = {c: video_features(np.stack(clips[c]), clip, "generated") for c in CONDITIONS}
    h = run.hash("eval")
    rows = [{"condition": "source", "clip_score": float(np.mean(scores["source"])), "fvd": 0.0,
             "bg_err": 0.0, "obj_err": 0.0, "config_hash": h}]
    for c in CONDITIONS:
        bg, obj = np.mean(per_region[c], axis=0)
        rows.append({"condition": c, "clip_score": float(np.mean(scores[c])), "fvd": frechet_distance(real, feats[c]),
                     "bg_err": float(bg), "obj_err": float(obj), "config_hash": h})
    bg, obj = np.mean(pair_region, axis=0)
    rows.append({"condition": "prevention_vs_reason", "clip_score": float(np.mean(scores["prevention"])),
                 "fvd": frechet_distance(feats["reason"], feats["prevention"]),
                 "bg_err": float(bg), "obj_err": float(obj), "config_hash": h})
    d = run.stage_dir(run.eval_dir)
    write_metrics_csv(d / "metrics.csv", rows)
    by = {r["condition"]: r for r in rows}
    result = {
        "config_hash": h,
        "n_scenarios": len(held),
        "fidelity_bg_below_obj": bool(by["fidelity"]["bg_err"] < by["fidelity"]["obj_err"]),
        "direction_ratio": by["prevention_vs_reason"]["obj_err"] / max(by["prevention_vs_reason"]["bg_err"], 1e-12),
    }
    _write_json(d / "result.json", result)
    return result


def _read_curve(path: Path, column: str):
    import csv

    if not path.is_file():
        return None
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [int(r["step"]) for r in rows], [float(r[column]) for r in rows]


def cmd_plot(run: Run) -> dict:
    d = run.stage_dir(run.plot_dir)
    made = []
    clip_curve = _read_curve(run.clip_dir / "train_log.csv", "total")
    if clip_curve:
        plot_loss_curves({"CILoss total": clip_curve}, d / "clip_loss.png")
        made.append("clip_loss.png")
    oavd_curve = _read_curve(run.oavd_dir / "loss.csv", "loss")
    if oavd_curve:
        mse = _read_curve(run.oavd_dir / "loss.csv", "mse")
        plot_loss_curves({"loss": oavd_curve, "mse": mse}, d / "oavd_loss.png")
        made.append("oavd_loss.png")
    metrics = run.eval_dir / "metrics.csv"
    if metrics.is_file():
        plot_metric_bars(read_metrics_csv(metrics), d / "metrics.png")
        made.append("metrics.png")
    if not made:
        raise PathError(f"nothing to plot under {run.out}")
    return {"plots": made}


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file overriding the preset")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--preset", default="desk", choices=C.PRESETS)
    common.add_argument("--out", type=Path, help="run directory (default: $ADVERSA_DATA_DIR or ./adversa-data)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adversa", description="Synthetic accident video generation pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic scenario store")
    g.add_argument("--count", type=int, help="number of scenarios (overrides data.count)")
    sub.add_parser("train-clip", parents=[common], help="train the abductive text/video encoders")
    t = sub.add_parser("train-oavd", parents=[common], help="train the diffusion denoiser")
    t.add_argument("--untrained-text", action="store_true", help="use a freshly initialized text encoder")
    sub.add_parser("infer", parents=[common], help="generate clips for the held-out scenarios")
    sub.add_parser("eval", parents=[common], help="score generated clips into metrics.csv")
    sub.add_parser("plot", parents=[common], help="draw loss curves and metric charts")
    return p


def _apply_count(cfg: dict, count: int) -> None:
    d = cfg["data"]
    d["count"] = int(count)
    if d["n_train"] >= count:
        d["n_train"] = max(1, count * 4 // 5)
    d["oavd_train"] = min(d["oavd_train"], d["n_train"])
    d["eval_count"] = min(d["eval_count"], count - d["n_train"])
    C.validate(cfg)


def resolve_run(args) -> Run:
    cfg = C.load_config(args.preset, args.config, args.seed)
    if getattr(args, "count", None) is not None:
        _apply_count(cfg, args.count)
    out = args.out or Path(os.environ.get("ADVERSA_DATA_DIR", "adversa-data"))
    return Run(cfg, Path(out))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        run = resolve_run(args)
        if args.command == "train-oavd":
            result = cmd_train_oavd(run, args.untrained_text)
        else:
            result = COMMANDS[args.command](run)
    except (ConfigurationError, PathError, CompatibilityError) as exc:
        print(f"adversa: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, TrainingError) as exc:
        print(f"adversa: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-clip": cmd_train_clip,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
