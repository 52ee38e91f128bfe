"""Peak extraction, OLS non-maximum suppression and AP/AR evaluation.

Grid cells are placed in the sensor plane before any distance is taken:
row ``r`` sits at range ``range_min + r * meters_per_bin`` and column ``c``
at an azimuth spread evenly across the field of view. Distances between
detections are Euclidean in that Cartesian projection, in meters, so they
share units with the range ``S`` that scales the similarity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ParameterError(ValueError):
    pass


class FormatError(ValueError):
    """A detections or annotations file could not be parsed."""


@dataclass(frozen=True)
class RadarGeometry:
    height: int
    width: int
    meters_per_bin: float = 0.23
    range_min_m: float = 1.0
    azimuth_fov_deg: float = 120.0

    def __post_init__(self):
        if self.range_min_m <= 0 or self.meters_per_bin <= 0:
            raise ParameterError("range mapping needs positive minimum range and bin size")

    def range_m(self, row):
        return self.range_min_m + np.asarray(row, dtype=np.float64) * self.meters_per_bin

    def azimuth_rad(self, col):
        col = np.asarray(col, dtype=np.float64)
        if self.width == 1:
            return np.zeros_like(col)
        fov = math.radians(self.azimuth_fov_deg)
        return (col / (self.width - 1) - 0.5) * fov

    def xy(self, row, col):
        r, a = self.range_m(row), self.azimuth_rad(col)
        return r * np.sin(a), r * np.cos(a)

    def distance(self, row_a, col_a, row_b, col_b):
        xa, ya = self.xy(row_a, col_a)
        xb, yb = self.xy(row_b, col_b)
        return np.hypot(xa - xb, ya - yb)


@dataclass(frozen=True)
class OLSParams:
    geometry: RadarGeometry
    k_cls: tuple[float, ...]

    def __post_init__(self):
        if any(k <= 0 for k in self.k_cls):
            raise ParameterError(f"K_cls must be positive, got {self.k_cls}")

    def similarity(self, ref_row, ref_col, row, col, class_id):
        """OLS of point(s) ``(row, col)`` against the reference, scaled by the reference range."""
        d = self.geometry.distance(ref_row, ref_col, row, col)
        return ols(d, self.geometry.range_m(ref_row), self.k_cls[class_id])


def ols(d, s, k_cls):
    """``exp(-d^2 / (2 (s k)^2))``; vectorized over ``d`` and ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0) or k_cls <= 0:
        raise ParameterError(f"OLS needs positive S and K_cls (got S={s}, K={k_cls})")
    d = np.asarray(d, dtype=np.float64)
    out = np.exp(-d * d / (2.0 * (s * k_cls) ** 2))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, order=True)
class Detection:
    frame: int
    row: int
    col: int
    class_id: int
    score: float = field(compare=False)

    def key(self):
        """Sort key: descending score, ties by (frame, row, col, class)."""
        return (-self.score, self.frame, self.row, self.col, self.class_id)


@dataclass(frozen=True)
class GroundTruth:
    frame: int
    row: int
    col: int
    class_id: int


def find_peaks(conf: np.ndarray, min_score: float = 0.1, frame: int = 0) -> list[Detection]:
    """Strict 8-neighbor maxima of a ``[H, W, class]`` map with score >= ``min_score``."""
    if conf.ndim != 3:
        raise ValueError(f"find_peaks expects [H,W,class], got {conf.shape}")
    h, w, _ = conf.shape
    padded = np.pad(conf.astype(np.float64), ((1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    peak = conf >= min_score
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr or dc:
                peak &= conf > padded[1 + dr: 1 + dr + h, 1 + dc: 1 + dc + w]
    rows, cols, cls = np.nonzero(peak)
    return [Detection(frame, int(r), int(c), int(k), float(conf[r, c, k])) for r, c, k in zip(rows, cols, cls)]


def find_peaks_volume(conf: np.ndarray, min_score: float = 0.1) -> list[Detection]:
    """Peaks of every frame of a ``[T, H, W, class]`` volume."""
    return [d for t in range(conf.shape[0]) for d in find_peaks(conf[t], min_score, t)]


def ols_nms(peaks: Sequence[Detection], params: OLSParams, threshold: float = 0.3,
            same_class: bool = False) -> list[Detection]:
    """Greedy suppression per frame; similarity uses the kept peak's range and K_cls."""
    kept: list[Detection] = []
    by_frame: dict[int, list[Detection]] = {}
    for p in peaks:
        by_frame.setdefault(p.frame, []).append(p)
    for frame in sorted(by_frame):
        pending = sorted(by_frame[frame], key=Detection.key)
        while pending:
            best, rest = pending[0], pending[1:]
            kept.append(best)
            if not rest:
                break
            rows = np.array([p.row for p in rest])
            cols = np.array([p.col for p in rest])
            sim = np.atleast_1d(params.similarity(best.row, best.col, rows, cols, best.class_id))
            pending = [p for p, s in zip(rest, sim)
                       if s <= threshold or (same_class and p.class_id != best.class_id)]
    return kept


def postprocess(conf: np.ndarray, params: OLSParams, min_score=0.1, threshold=0.3,
                same_class=False) -> list[Detection]:
    """Peaks plus NMS over a ``[T, H, W, class]`` volume, ordered by (frame, score desc)."""
    dets = ols_nms(find_peaks_volume(conf, min_score), params, threshold, same_class)
    return sorted(dets, key=lambda d: (d.frame,) + d.key())


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    thresholds: tuple[float, ...]
    precision: list[float]
    recall: list[float]
    ap: float
    ar: float
    per_class: dict[str, tuple[float, float]]
    n_dets: int
    n_gts: int


def _match_counts(dets, gts, params: OLSParams, threshold: float) -> int:
    """Greedy one-to-one matching; returns the number of true positives."""
    pool: dict[tuple[int, int], list[GroundTruth]] = {}
    for g in gts:
        pool.setdefault((g.frame, g.class_id), []).append(g)
    used = {key: np.zeros(len(v), dtype=bool) for key, v in pool.items()}
    sims = {}
    tp = 0
    for d in sorted(dets, key=Detection.key):
        key = (d.frame, d.class_id)
        cands = pool.get(key)
        if not cands:
            continue
        sim = sims.get(d)
        if sim is None:
            rows = np.array([g.row for g in cands])
            cols = np.array([g.col for g in cands])
            sim = np.atleast_1d(params.similarity(rows, cols, d.row, d.col, d.class_id))
            sims[d] = sim
        avail = np.where(used[key], -np.inf, sim)
        j = int(np.argmax(avail))
        if avail[j] >= threshold:
            used[key][j] = True
            tp += 1
    return tp


def _sweep(dets, gts, params, thresholds):
    prec, rec = [], []
    for thr in thresholds:
        tp = _match_counts(dets, gts, params, thr)
        prec.append(tp / len(dets) if dets else 0.0)
        rec.append(tp / len(gts) if gts else 0.0)
    return prec, rec


def match_and_score(dets: Sequence[Detection], gts: Sequence[GroundTruth], params: OLSParams,
                    thresholds: Sequence[float] = tuple(round(0.5 + 0.05 * i, 10) for i in range(9)),
                    class_names: Sequence[str] | None = None) -> EvalResult:
    """Pool all frames, match greedily at each OLS threshold, average over thresholds.

    With no detections precision is taken as 0; with no ground truth recall is 0.
    """
    thresholds = tuple(thresholds)
    prec, rec = _sweep(list(dets), list(gts), params, thresholds)
    names = list(class_names) if class_names is not None else [str(i) for i in range(len(params.k_cls))]
    per_class = {}
    for cid, name in enumerate(names):
        cd = [d for d in dets if d.class_id == cid]
        cg = [g for g in gts if g.class_id == cid]
        p, r = _sweep(cd, cg, params, thresholds)
        per_class[name] = (float(np.mean(p)), float(np.mean(r)))
    return EvalResult(thresholds, prec, rec, float(np.mean(prec)), float(np.mean(rec)), per_class,
                      len(dets), len(gts))


# ---------------------------------------------------------------------------
# text formats


def _fields(line: str, where: str) -> dict[str, str]:
    out = {}
    for tok in line.split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise FormatError(f"{where}: expected key=value, got {tok!r}")
        out[key] = value
    return out


def _class_id(name: str, class_names: Sequence[str], where: str) -> int:
    try:
        return list(class_names).index(name)
    except ValueError:
        raise FormatError(f"{where}: unknown class {name!r} (expected one of {list(class_names)})") from None


def format_detections(dets: Iterable[Detection], class_names: Sequence[str]) -> str:
    return "".join(f"frame={d.frame} row={d.row} col={d.col} class={class_names[d.class_id]} "
                   f"score={d.score:.6f}\n" for d in dets)


def parse_detections(text: str, class_names: Sequence[str]) -> list[Detection]:
    dets = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        f = _fields(line, f"line {n}")
        try:
            dets.append(Detection(int(f["frame"]), int(f["row"]), int(f["col"]),
                                  _class_id(f["class"], class_names, f"line {n}"), float(f["score"])))
        except KeyError as exc:
            raise FormatError(f"line {n}: missing field {exc}") from None
    return dets


def format_annotations(gts: Iterable[GroundTruth], class_names: Sequence[str]) -> str:
    return "".join(f"frame={g.frame} class={class_names[g.class_id]} row={g.row} col={g.col}\n" for g in gts)


def parse_annotations(text: str, class_names: Sequence[str]) -> list[GroundTruth]:
    gts = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        f = _fields(line, f"line {n}")
        try:
            gts.append(GroundTruth(int(f["frame"]), int(f["row"]), int(f["col"]),
                                   _class_id(f["class"], class_names, f"line {n}")))
        except KeyError as exc:
            raise FormatError(f"line {n}: missing field {exc}") from None
    return gts


def format_report(result: EvalResult) -> str:
    lines = [f"AP: {result.ap:.3f}", f"AR: {result.ar:.3f}",
             f"detections: {result.n_dets}", f"ground_truth: {result.n_gts}", "thresholds:"]
    for t, p, r in zip(result.thresholds, result.precision, result.recall):
        lines.append(f"  - {{ols: {t:.2f}, precision: {p:.3f}, recall: {r:.3f}}}")
    lines.append("per_class:")
    for name, (ap, ar) in result.per_class.items():
        lines.append(f"  {name}: {{AP: {ap:.3f}, AR: {ar:.3f}}}")
    return "\n".join(lines) + "\n"


def write_detections(path: str | Path, dets, class_names) -> None:
    Path(path).write_text(format_detections(dets, class_names))
