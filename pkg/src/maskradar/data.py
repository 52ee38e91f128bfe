"""Synthetic radar scenes, ground-truth confidence maps and dataset files.

Objects move on straight lines across the range-azimuth grid. Each one is
rendered as a complex Gaussian blob whose magnitude depends on class and
reflectivity and whose width grows with range; the phase is random per
object per frame. Ground-truth maps put an OLS-shaped Gaussian with peak
1.0 at every annotated cell.
"""
from __future__ import annotations

import hashlib
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .container import load_volume, save_volumes
from .detect import GroundTruth, OLSParams, RadarGeometry, format_annotations, parse_annotations

# per class: amplitude scale, blob width in bins at minimum range
CLASS_AMPLITUDE = (0.6, 0.9, 1.4)
CLASS_WIDTH = (0.7, 1.0, 1.5)
MIN_SEPARATION = 6.0
EDGE_MARGIN = 2


@dataclass(frozen=True)
class Difficulty:
    max_objects: int
    max_speed: float  # bins per frame
    noise_std: float


DIFFICULTIES = (
    Difficulty(1, 0.0, 0.0),
    Difficulty(2, 0.25, 0.03),
    Difficulty(3, 0.5, 0.08),
    Difficulty(4, 1.0, 0.15),
)


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    range_m: tuple[float, ...]
    azimuth_rad: tuple[float, ...]
    reflectivity: float


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    n_frames: int
    noise_std: float
    seed: int

    def cells(self, geometry: RadarGeometry) -> list[list[tuple[int, int, int]]]:
        """Per frame, ``(class_id, row, col)`` of every object."""
        out = []
        for t in range(self.n_frames):
            frame = []
            for o in self.objects:
                r, c = to_cell(geometry, o.range_m[t], o.azimuth_rad[t])
                frame.append((o.class_id, r, c))
            out.append(frame)
        return out

    def annotations(self, geometry: RadarGeometry) -> list[GroundTruth]:
        return [GroundTruth(t, r, c, k) for t, frame in enumerate(self.cells(geometry)) for k, r, c in frame]


def to_cell(geometry: RadarGeometry, range_m: float, azimuth: float) -> tuple[int, int]:
    row = (range_m - geometry.range_min_m) / geometry.meters_per_bin
    if geometry.width == 1:
        col = 0.0
    else:
        col = (azimuth / np.radians(geometry.azimuth_fov_deg) + 0.5) * (geometry.width - 1)
    return int(round(row)), int(round(col))


def synth_scene(seed: int, difficulty: int = 1, n_frames: int = 16,
                geometry: RadarGeometry | None = None, num_classes: int = 3,
                max_tries: int = 1000) -> SceneSpec:
    """Random straight-line trajectories that stay in bounds and apart for all frames."""
    if not 0 <= difficulty < len(DIFFICULTIES):
        raise ValueError(f"difficulty must lie in 0..{len(DIFFICULTIES) - 1}")
    geometry = geometry or RadarGeometry(128, 128)
    level = DIFFICULTIES[difficulty]
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(1, level.max_objects + 1))
    lo = EDGE_MARGIN
    hi_r, hi_c = geometry.height - 1 - EDGE_MARGIN, geometry.width - 1 - EDGE_MARGIN
    if hi_r < lo or hi_c < lo:
        raise ValueError(f"grid {geometry.height}x{geometry.width} too small for synthetic objects")
    t = np.arange(n_frames)
    tracks: list[np.ndarray] = []
    for _ in range(max_tries):
        if len(tracks) == n_obj:
            break
        start = rng.uniform((lo, lo), (hi_r, hi_c))
        speed = rng.uniform(0, level.max_speed)
        heading = rng.uniform(0, 2 * np.pi)
        path = start + np.outer(t, (speed * np.cos(heading), speed * np.sin(heading)))
        cells = np.rint(path)
        if cells[:, 0].min() < lo or cells[:, 0].max() > hi_r or cells[:, 1].min() < lo or cells[:, 1].max() > hi_c:
            continue
        if any(np.min(np.hypot(*(cells - other).T)) < MIN_SEPARATION for other in tracks):
            continue
        tracks.append(cells)
    if len(tracks) < n_obj:
        raise RuntimeError(f"could not place {n_obj} objects after {max_tries} attempts")
    objects = []
    for cells in tracks:
        cls = int(rng.integers(num_classes))
        refl = float(rng.uniform(0.8, 1.2))
        rng_m = tuple(float(v) for v in geometry.range_m(cells[:, 0]))
        az = tuple(float(v) for v in geometry.azimuth_rad(cells[:, 1]))
        objects.append(SceneObject(cls, rng_m, az, refl))
    return SceneSpec(tuple(objects), n_frames, level.noise_std, int(seed))


def render_rf(spec: SceneSpec, geometry: RadarGeometry, phase_seed: int | None = None) -> np.ndarray:
    """``[2, T, H, W]`` float32 real/imaginary channels."""
    h, w = geometry.height, geometry.width
    field = np.zeros((spec.n_frames, h, w), dtype=np.complex128)
    phases = np.random.default_rng([spec.seed, 1] if phase_seed is None else [phase_seed, 2])
    rows, cols = np.mgrid[0:h, 0:w]
    range_max = geometry.range_m(max(h - 1, 1))
    cells = spec.cells(geometry)
    for t in range(spec.n_frames):
        for o, (k, r, c) in zip(spec.objects, cells[t]):
            amp = CLASS_AMPLITUDE[k % len(CLASS_AMPLITUDE)] * o.reflectivity
            sigma = CLASS_WIDTH[k % len(CLASS_WIDTH)] * (1.0 + 0.5 * o.range_m[t] / range_max)
            blob = amp * np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma ** 2))
            field[t] += blob * np.exp(1j * phases.uniform(0, 2 * np.pi))
    if spec.noise_std > 0:
        noise = np.random.default_rng([spec.seed, 3])
        field += spec.noise_std * (noise.standard_normal(field.shape) + 1j * noise.standard_normal(field.shape))
    return np.stack([field.real, field.imag]).astype(np.float32)


def render_gt_confmaps(annotations: Sequence[GroundTruth], params: OLSParams, n_frames: int,
                       num_classes: int | None = None) -> np.ndarray:
    """``[T, H, W, class]`` maps: OLS to each object's cell, combined by max."""
    g = params.geometry
    k = num_classes if num_classes is not None else len(params.k_cls)
    out = np.zeros((n_frames, g.height, g.width, k), dtype=np.float32)
    rows, cols = np.mgrid[0:g.height, 0:g.width]
    for a in annotations:
        if not (0 <= a.frame < n_frames and 0 <= a.row < g.height and 0 <= a.col < g.width and 0 <= a.class_id < k):
            raise ValueError(f"annotation {a} outside a {n_frames}x{g.height}x{g.width}x{k} map")
        sim = params.similarity(a.row, a.col, rows, cols, a.class_id)
        sim = np.where(sim < np.finfo(np.float32).tiny, 0.0, sim).astype(np.float32)  # no subnormals
        sim[a.row, a.col] = 1.0
        np.maximum(out[a.frame, :, :, a.class_id], sim, out=out[a.frame, :, :, a.class_id])
    return out


# ---------------------------------------------------------------------------
# dataset files


class DatasetExistsError(FileExistsError):
    pass


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def split_scenes(names: Sequence[str], split: float, seed: int) -> tuple[list[str], list[str]]:
    n_train = int(round(len(names) * split))
    order = np.random.default_rng([seed, 0xD5]).permutation(len(names))
    train = sorted(names[i] for i in order[:n_train])
    test = sorted(names[i] for i in order[n_train:])
    return train, test


def make_dataset(out_dir: str | Path, n_scenes: int, seed: int, split: float, geometry: RadarGeometry,
                 params: OLSParams, class_names: Sequence[str], n_frames: int = 16, difficulty: int = 1,
                 force: bool = False) -> dict:
    """Write ``scene_XXX.mrnv`` (records ``rf`` and ``gt``), annotations and ``manifest.yaml``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DatasetExistsError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(exist_ok=True)
    scenes = []
    for i in range(n_scenes):
        name = f"scene_{i:03d}"
        s = scene_seed(seed, i)
        spec = synth_scene(s, difficulty, n_frames, geometry, len(class_names))
        ann = spec.annotations(geometry)
        rf = render_rf(spec, geometry)
        gt = render_gt_confmaps(ann, params, n_frames, len(class_names))
        save_volumes(out / f"{name}.mrnv", {"rf": rf, "gt": gt})
        (out / f"{name}.ann.txt").write_text(format_annotations(ann, class_names))
        scenes.append({"name": name, "seed": s, "objects": len(spec.objects),
                       "volumes": f"{name}.mrnv", "annotations": f"{name}.ann.txt"})
    train, test = split_scenes([sc["name"] for sc in scenes], split, seed)
    manifest = {
        "seed": int(seed), "difficulty": int(difficulty), "n_frames": int(n_frames),
        "height": geometry.height, "width": geometry.width, "class_names": list(class_names),
        "k_cls": [float(k) for k in params.k_cls], "meters_per_bin": geometry.meters_per_bin,
        "range_min_m": geometry.range_min_m, "azimuth_fov_deg": geometry.azimuth_fov_deg,
        "scenes": scenes, "split": {"train": train, "test": test},
    }
    (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
    validate_dataset(out)
    return manifest


def manifest_hash(out_dir: str | Path) -> str:
    return hashlib.sha256((Path(out_dir) / "manifest.yaml").read_bytes()).hexdigest()


def load_manifest(out_dir: str | Path) -> dict:
    path = Path(out_dir) / "manifest.yaml"
    return yaml.safe_load(path.read_text())


def validate_dataset(out_dir: str | Path) -> None:
    """Every manifest entry must exist and load with consistent extents."""
    out = Path(out_dir)
    m = load_manifest(out)
    k = len(m["class_names"])
    for sc in m["scenes"]:
        rf = load_volume(out / sc["volumes"], "rf")
        gt = load_volume(out / sc["volumes"], "gt")
        if rf.shape != (2, m["n_frames"], m["height"], m["width"]):
            raise ValueError(f"{sc['name']}: rf extents {rf.shape} disagree with the manifest")
        if gt.shape != (m["n_frames"], m["height"], m["width"], k):
            raise ValueError(f"{sc['name']}: gt extents {gt.shape} disagree with the manifest")
        parse_annotations((out / sc["annotations"]).read_text(), m["class_names"])


@dataclass
class Scene:
    name: str
    rf: np.ndarray
    gt: np.ndarray
    annotations: list[GroundTruth]


def load_scene(out_dir: str | Path, entry: dict, class_names: Sequence[str]) -> Scene:
    out = Path(out_dir)
    rf = load_volume(out / entry["volumes"], "rf")
    gt = load_volume(out / entry["volumes"], "gt")
    ann = parse_annotations((out / entry["annotations"]).read_text(), class_names)
    return Scene(entry["name"], rf, gt, ann)


def load_split(out_dir: str | Path, which: str = "train") -> list[Scene]:
    m = load_manifest(out_dir)
    wanted = set(m["split"][which])
    return [load_scene(out_dir, sc, m["class_names"]) for sc in m["scenes"] if sc["name"] in wanted]
