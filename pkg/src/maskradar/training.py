"""Training loop, checkpoints and train-set evaluation.

Data order is a pure function of ``(train.seed, step)``: step ``s`` draws
from the permutation of epoch ``s * batch // n_scenes``. Resuming from a
checkpoint therefore replays exactly the batches an uninterrupted run
would have seen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .config import Config, TrainConfig
from .container import load_volumes, save_volumes
from .data import Scene
from .detect import EvalResult, OLSParams, RadarGeometry, match_and_score, postprocess
from .network import LossTerms, MaskRadarNet, NumericError, train_step
from .numerics import Adam


def ols_params(cfg: Config, height: int | None = None, width: int | None = None) -> OLSParams:
    d = cfg.detect
    geo = RadarGeometry(height or cfg.data.height, width or cfg.data.width,
                        d.meters_per_bin, d.range_min_m, d.azimuth_fov_deg)
    return OLSParams(geo, tuple(d.k_cls))


def build(cfg: Config) -> tuple[MaskRadarNet, Adam]:
    model = MaskRadarNet(cfg.model, cfg.shift)
    t = cfg.train
    return model, Adam(model.parameters(), t.lr, (t.beta1, t.beta2), t.adam_eps)


def learning_rate(t: TrainConfig, step: int) -> float:
    """Rate for 1-based ``step``: linear warmup, then constant or cosine decay to zero at ``t.steps``."""
    if step <= t.warmup_steps:
        return t.lr * step / t.warmup_steps
    if t.schedule == "constant":
        return t.lr
    span = max(t.steps - t.warmup_steps, 1)
    frac = min((step - t.warmup_steps) / span, 1.0)
    return t.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> list[int]:
    """Scene indices used at 0-based ``step``."""
    out = []
    for j in range(step * batch_size, (step + 1) * batch_size):
        epoch, pos = divmod(j, n)
        out.append(int(np.random.default_rng([seed, epoch]).permutation(n)[pos]))
    return out


def format_log(step: int, terms: LossTerms) -> str:
    return f"step={step} total={terms.total:.6f} main={terms.main:.6f} aux={terms.aux:.6f}"


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: MaskRadarNet, opt: Adam, step: int, cfg: Config) -> Path:
    path = Path(path)
    records = {}
    for (name, p), m, v in zip(model.named_parameters(), opt.m, opt.v):
        records[f"param/{name}"] = p.value
        records[f"adam_m/{name}"] = m
        records[f"adam_v/{name}"] = v
    save_volumes(path, records)
    meta = {"step": int(step), "adam_steps": int(opt.step_count), "config_hash": cfg.hash(),
            "config": cfg.to_dict(), "volumes": path.name}
    path.with_suffix(".yaml").write_text(yaml.safe_dump(meta, sort_keys=True))
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, model: MaskRadarNet, opt: Adam | None = None) -> dict:
    """Restore parameters (and optimizer moments) in place; returns the metadata."""
    path = Path(path)
    meta_path = path.with_suffix(".yaml")
    if not meta_path.exists():
        raise CheckpointError(f"{path}: missing checkpoint metadata {meta_path.name}")
    meta = yaml.safe_load(meta_path.read_text())
    records = load_volumes(path)
    for name, p in model.named_parameters():
        for prefix, target in (("param", p.value),) + (
                (("adam_m", opt.m[opt.params.index(p)]), ("adam_v", opt.v[opt.params.index(p)])) if opt else ()):
            key = f"{prefix}/{name}"
            if key not in records:
                raise CheckpointError(f"{path}: no record {key!r}")
            if records[key].shape != target.shape:
                raise CheckpointError(f"{path}: {key} has shape {records[key].shape}, model expects {target.shape}")
            target[...] = records[key]
    if opt is not None:
        opt.step_count = int(meta["adam_steps"])
    return meta


def latest_checkpoint(directory: str | Path) -> Path | None:
    found = sorted(Path(directory).glob("ckpt_*.mrnv"))
    return found[-1] if found else None


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    step: int
    history: list[LossTerms]


def train(model: MaskRadarNet, opt: Adam, scenes: Sequence[Scene], cfg: Config, steps: int,
          start: int = 0, log: Callable[[str], None] | None = None,
          checkpoint_dir: str | Path | None = None,
          callback: Callable[[int, LossTerms], bool] | None = None) -> TrainResult:
    """Run steps ``start+1 .. steps``; ``callback`` may return True to stop early."""
    t = cfg.train
    history = []
    step = start
    for step in range(start + 1, steps + 1):
        idx = batch_indices(step - 1, len(scenes), t.batch_size, t.seed)
        batch = [(scenes[i].rf, scenes[i].gt) for i in idx]
        opt.lr = learning_rate(t, step)
        terms = train_step(model, opt, batch, t.alpha, t.reduction)
        if not math.isfinite(terms.total):
            raise NumericError(f"non-finite total loss at step {step}")
        history.append(terms)
        if log is not None:
            log(format_log(step, terms))
        if checkpoint_dir is not None and (step % t.checkpoint_every == 0 or step == steps):
            save_checkpoint(Path(checkpoint_dir) / f"ckpt_{step:06d}.mrnv", model, opt, step, cfg)
        if callback is not None and callback(step, terms):
            break
    return TrainResult(step, history)


def evaluate(model: MaskRadarNet, scenes: Sequence[Scene], cfg: Config) -> EvalResult:
    """Detections over ``scenes`` (frames pooled across scenes) scored against their annotations."""
    d = cfg.detect
    dets, gts = [], []
    offset = 0
    for sc in scenes:
        params = ols_params(cfg, sc.rf.shape[2], sc.rf.shape[3])
        conf = model.predict(sc.rf)
        for det in postprocess(conf, params, d.min_score, d.nms_threshold, d.same_class_nms):
            dets.append(type(det)(det.frame + offset, det.row, det.col, det.class_id, det.score))
        gts.extend(type(g)(g.frame + offset, g.row, g.col, g.class_id) for g in sc.annotations)
        offset += sc.rf.shape[1]
    params = ols_params(cfg, scenes[0].rf.shape[2], scenes[0].rf.shape[3])
    return match_and_score(dets, gts, params, d.thresholds, d.class_names)
