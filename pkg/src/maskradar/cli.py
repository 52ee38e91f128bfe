"""``maskradar`` command line: synth | train | infer | eval | gradcheck | bench.

Exit codes: 0 success, 2 usage, 3 validation, 4 numeric, 5 I/O.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .cmam import CapacityError
from .config import Config, ConfigError, from_dict, load_config
from .container import ContainerError, load_volume, save_volume
from .data import load_manifest, load_split, make_dataset, manifest_hash
from .detect import (
    FormatError, format_detections, format_report, match_and_score, parse_annotations,
    parse_detections, postprocess,
)
from .gradsuite import BLOCKS
from .network import MaskRadarNet, NumericError, resolve_pattern
from .numerics import conv3d
from .opcount import count_ops, counting_array
from .shift import ChannelShiftSpec, channel_shift, patch_shift
from .training import (
    CheckpointError, build, evaluate, latest_checkpoint, load_checkpoint, ols_params, train,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _say(msg: str) -> None:
    print(msg, flush=True)


def _out_dir(args, required=True) -> Path | None:
    if args.out is None:
        if required:
            raise UsageError(f"{args.command} needs --out")
        return None
    return Path(args.out)


def _prepare_out(path: Path, force: bool, allow_existing: bool = False) -> Path:
    """Create ``path`` (its parent must exist)."""
    if path.exists():
        if any(path.iterdir()) and not (force or allow_existing):
            raise FileExistsError(f"{path} exists and is not empty; pass --force")
    else:
        path.mkdir()
    return path


def _echo_config(cfg: Config, out: Path | None) -> None:
    if out is not None:
        cfg.write(out)
    _say(f"config_hash={cfg.hash()}")


def _resolve(args, overrides: dict) -> Config:
    if args.seed is not None:
        for key in args.seed_keys:
            overrides.setdefault(key, args.seed)
    return load_config(args.config, {k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _resolve(args, {"data.n_scenes": args.scenes, "data.difficulty": args.difficulty,
                          "data.split": args.split, "data.n_frames": args.frames,
                          "data.height": args.height, "data.width": args.width})
    out = _out_dir(args)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory of {out} does not exist")
    d = cfg.data
    params = ols_params(cfg)
    manifest = make_dataset(out, d.n_scenes, d.seed, d.split, params.geometry, params,
                            cfg.detect.class_names, d.n_frames, d.difficulty, args.force)
    _echo_config(cfg, out)
    counts = [sc["objects"] for sc in manifest["scenes"]]
    _say(f"scenes={len(counts)} train={len(manifest['split']['train'])} test={len(manifest['split']['test'])} "
         f"objects_min={min(counts)} objects_max={max(counts)}")
    _say(f"manifest_hash={manifest_hash(out)}")
    return EXIT_OK


def _data_overrides(cfg_over: dict, manifest: dict) -> dict:
    """The dataset fixes extents and geometry; explicit command-line values still win."""
    for key in ("n_frames", "height", "width"):
        cfg_over.setdefault(f"data.{key}", manifest[key])
    for key in ("meters_per_bin", "range_min_m", "azimuth_fov_deg", "k_cls", "class_names"):
        cfg_over.setdefault(f"detect.{key}", manifest[key])
    return cfg_over


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    over = {"train.steps": args.steps, "train.alpha": args.alpha, "train.lr": args.lr,
            "train.checkpoint_every": args.checkpoint_every, "train.batch_size": args.batch_size}
    cfg = _resolve(args, _data_overrides(over, manifest))
    out = _prepare_out(_out_dir(args), args.force, allow_existing=args.resume is not None)
    scenes = load_split(args.data, args.split)
    if not scenes:
        raise ValueError(f"dataset {args.data} has no {args.split} scenes")
    model, opt = build(cfg)
    start = 0
    if args.resume is not None:
        ckpt = latest_checkpoint(out) if args.resume == "latest" else Path(args.resume)
        if ckpt is None:
            raise FileNotFoundError(f"no checkpoint found in {out}")
        meta = load_checkpoint(ckpt, model, opt)
        for section in ("model", "shift"):
            if meta["config"][section] != cfg.to_dict()[section]:
                raise CheckpointError(f"checkpoint {ckpt.name} was trained with a different [{section}] config")
        start = int(meta["step"])
        _say(f"resumed from {ckpt} at step {start}")
    _echo_config(cfg, out)
    log_path = out / "train.log"
    with open(log_path, "a" if start else "w") as log_file:
        def log(line):
            log_file.write(line + "\n")
            log_file.flush()
            _say(line)

        train(model, opt, scenes, cfg, cfg.train.steps, start=start, log=log, checkpoint_dir=out)
    if args.eval:
        r = evaluate(model, scenes, cfg)
        _say(f"train_AP={r.ap:.4f} train_AR={r.ar:.4f}")
    return EXIT_OK


def _model_from_checkpoint(path: Path) -> tuple[MaskRadarNet, Config, dict]:
    meta_path = path.with_suffix(".yaml")
    if not meta_path.exists():
        raise CheckpointError(f"{path}: missing checkpoint metadata {meta_path.name}")
    meta = yaml.safe_load(meta_path.read_text())
    cfg = from_dict(meta["config"])
    model = MaskRadarNet(cfg.model, cfg.shift)
    load_checkpoint(path, model)
    return model, cfg, meta


def _pgm(values: np.ndarray) -> str:
    h, w = values.shape
    pix = np.clip(np.rint(values * 255), 0, 255).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in pix)
    return f"P2\n{w} {h}\n255\n{rows}\n"


def cmd_infer(args) -> int:
    model, cfg, _ = _model_from_checkpoint(Path(args.checkpoint))
    if args.min_score is not None:
        cfg.detect.min_score = args.min_score
    rf = load_volume(args.input, args.record)
    out = _prepare_out(_out_dir(args), args.force)
    _echo_config(cfg, out)
    conf = model.predict(rf)
    d = cfg.detect
    params = ols_params(cfg, rf.shape[2], rf.shape[3])
    dets = postprocess(conf, params, d.min_score, d.nms_threshold, d.same_class_nms)
    save_volume(out / "confmaps.mrnv", "conf", conf)
    (out / "detections.txt").write_text(format_detections(dets, d.class_names))
    if args.dump_maps:
        maps = out / "maps"
        maps.mkdir(exist_ok=True)
        for t in range(conf.shape[0]):
            for k, name in enumerate(d.class_names):
                (maps / f"frame{t:03d}_{name}.pgm").write_text(_pgm(conf[t, :, :, k]))
    _say(f"frames={conf.shape[0]} detections={len(dets)} conf_min={conf.min():.6f} conf_max={conf.max():.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args, {})
    names = cfg.detect.class_names
    dets = parse_detections(Path(args.detections).read_text(), names)
    gts = parse_annotations(Path(args.annotations).read_text(), names)
    params = ols_params(cfg, args.height, args.width)
    result = match_and_score(dets, gts, params, cfg.detect.thresholds, names)
    report = format_report(result)
    sys.stdout.write(report)
    out = _out_dir(args, required=False)
    if out is not None:
        _prepare_out(out, args.force)
        (out / "report.yaml").write_text(report)
        _echo_config(cfg, out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, {})
    out = _out_dir(args, required=False)
    names = args.blocks or list(BLOCKS)
    unknown = [n for n in names if n not in BLOCKS]
    if unknown:
        raise UsageError(f"unknown block(s) {unknown}; choose from {list(BLOCKS)}")
    lines, failed = [], []
    for name in names:
        t0 = time.perf_counter()
        report = BLOCKS[name](corrupt=name in (args.corrupt or ()), tol=args.tol)
        status = "PASS" if report.passed else "FAIL"
        if not report.passed:
            failed.append(name)
        line = (f"block={name} max_rel_err={report.max_error:.3e} worst={report.worst} "
                f"status={status} seconds={time.perf_counter() - t0:.1f}")
        lines.append(line)
        _say(line)
    if out is not None:
        _prepare_out(out, args.force)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
        _echo_config(cfg, out)
    if failed:
        _say(f"gradient check failed: {', '.join(failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


def _time(fn, runs):
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.mean(times)), float(np.std(times))


def cmd_bench(args) -> int:
    cfg = _resolve(args, {})
    out = _out_dir(args, required=False)
    rng = np.random.default_rng(cfg.train.seed)
    t, h, w, c = args.frames, args.size, args.size, args.channels
    x = rng.normal(size=(t, h, w, c)).astype(np.float32)
    x_cf = np.ascontiguousarray(x.transpose(3, 0, 1, 2))
    kernel = rng.normal(size=(c, c, 3, 3, 3)).astype(np.float32)
    pattern = resolve_pattern(cfg.shift)
    spec = ChannelShiftSpec(cfg.shift.ratio)
    ops = {
        "patch_shift": (lambda: patch_shift(x, pattern), lambda v: patch_shift(v, pattern)),
        "channel_shift": (lambda: channel_shift(x, spec), lambda v: channel_shift(v, spec)),
        "conv3d_3x3x3": (lambda: conv3d(x_cf, kernel, None, (1, 1, 1), (1, 1, 1)), None),
    }
    small = counting_array(rng.normal(size=(4, 4, 4, 4)))
    small_kernel = counting_array(rng.normal(size=(4, 4, 3, 3, 3)))
    header = f"{'op':<16}{'extents':<18}{'mean_ms':>10}{'std_ms':>10}{'runs':>6}{'bytes_moved':>14}{'arith_ops':>12}"
    lines = [header]
    for name, (fn, counted) in ops.items():
        mean, std = _time(fn, args.runs)
        result = fn()
        moved = x.nbytes + result.nbytes + (kernel.nbytes if counted is None else 0)
        with count_ops() as counter:
            if counted is not None:
                counted(small)
            else:
                _counting_conv(small, small_kernel)
        lines.append(f"{name:<16}{'x'.join(map(str, x.shape)):<18}{mean * 1e3:>10.3f}{std * 1e3:>10.3f}"
                     f"{args.runs:>6}{moved:>14}{counter.total:>12}")
    lines.append("arith_ops counted on a 4x4x4x4 instrumented volume (conv: 4->4 channels, 3x3x3 kernel)")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out is not None:
        _prepare_out(out, args.force)
        (out / "bench.txt").write_text(text)
        _echo_config(cfg, out)
    return EXIT_OK


def _counting_conv(x, kernel):
    """Direct-loop 3D convolution over instrumented scalars ([T,H,W,C] input, same padding)."""
    t, h, w, c = x.shape
    c_out, _, kt, kh, kw = kernel.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    out = np.empty((t, h, w, c_out), dtype=object)
    for i in range(t):
        for j in range(h):
            for k in range(w):
                for o in range(c_out):
                    acc = None
                    for a in range(kt):
                        for b in range(kh):
                            for e in range(kw):
                                ii, jj, kk = i + a - pt, j + b - ph, k + e - pw
                                if 0 <= ii < t and 0 <= jj < h and 0 <= kk < w:
                                    for ci in range(c):
                                        term = x[ii, jj, kk, ci] * kernel[o, ci, a, b, e]
                                        acc = term if acc is None else acc + term
                    out[i, j, k, o] = acc
    return out


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the run seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                        help="overwrite a non-empty output directory")
    parser = argparse.ArgumentParser(prog="maskradar", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int)
    p.add_argument("--difficulty", type=int)
    p.add_argument("--split", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_synth, seed_keys=("data.seed",))

    p = sub.add_parser("train", parents=[common], help="train on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", nargs="?", const="latest", help="checkpoint path, or latest in --out")
    p.add_argument("--eval", action="store_true", help="report train-set AP/AR at the end")
    p.set_defaults(func=cmd_train, seed_keys=("train.seed", "model.init_seed"))

    p = sub.add_parser("infer", parents=[common], help="run a checkpoint on an RF volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="container file with the RF record")
    p.add_argument("--record", default="rf")
    p.add_argument("--min-score", type=float)
    p.add_argument("--dump-maps", action="store_true", help="write per-class PGM maps")
    p.set_defaults(func=cmd_infer, seed_keys=())

    p = sub.add_parser("eval", parents=[common], help="score detections against annotations")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_eval, seed_keys=())

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--blocks", nargs="*")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", nargs="*", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck, seed_keys=())

    p = sub.add_parser("bench", parents=[common], help="shift operators versus a 3D convolution")
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--runs", type=int, default=10)
    p.set_defaults(func=cmd_bench, seed_keys=("train.seed",))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name, default in (("config", None), ("seed", None), ("out", None), ("force", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        if getattr(args, "runs", 10) < 10 and args.command == "bench":
            raise UsageError("bench needs at least 10 runs")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, CheckpointError, CapacityError, ValueError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
