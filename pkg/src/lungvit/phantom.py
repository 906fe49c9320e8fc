"""Procedural co-registered inspiration/expiration lung phantoms with known biomarkers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter

from .qct import FSAD_RV, FSAD_TLC
from .volio import Volume, write_volume

HU_MIN, HU_MAX = -1024.0, 1024.0


@dataclass
class PhantomParams:
    grid: int = 32
    lung_centers: tuple = ((9.5, 15.5, 15.5), (22.5, 15.5, 15.5))
    lung_axes: tuple = ((5.5, 11.0, 12.5), (5.5, 11.0, 12.5))
    jitter: float = 0.75
    vessel_count: int = 4
    vessel_radius: float = 0.9
    vessel_hu: float = -100.0
    tlc_mean: float = -880.0
    tlc_sigma: float = 20.0
    texture_scale: float = 1.5
    texture_clip: float = 2.5
    delta_hu: float = 120.0
    pocket_count: tuple = (1, 4)
    pocket_radius: tuple = (2.5, 4.0)
    pocket_tlc_shift: float = -40.0
    background_hu: float = 0.0
    noise_sigma: float = 5.0
    seed: int = 0

    def __post_init__(self):
        self.lung_centers = tuple(tuple(float(c) for c in v) for v in self.lung_centers)
        self.lung_axes = tuple(tuple(float(c) for c in v) for v in self.lung_axes)
        self.pocket_count = tuple(int(c) for c in self.pocket_count)
        self.pocket_radius = tuple(float(c) for c in self.pocket_radius)

    def validate(self) -> None:
        g = self.grid
        for c, a in zip(self.lung_centers, self.lung_axes):
            for ci, ai in zip(c, a):
                if ci - ai - self.jitter < -0.5 or ci + ai + self.jitter > g - 0.5:
                    raise ValueError(f"lung ellipsoid at {c} with semi-axes {a} does not fit a {g}^3 grid")
        lo, hi = self.pocket_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad pocket count range {self.pocket_count}")
        if self.pocket_radius[0] <= 0 or self.pocket_radius[1] < self.pocket_radius[0]:
            raise ValueError(f"bad pocket radius range {self.pocket_radius}")
        if self.noise_sigma < 0 or self.tlc_sigma < 0:
            raise ValueError("noise and texture sigmas must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lung_centers", "lung_axes"):
            d[k] = [list(v) for v in d[k]]
        d["pocket_count"] = list(self.pocket_count)
        d["pocket_radius"] = list(self.pocket_radius)
        return d


@dataclass
class PhantomTruth:
    lung_mask: np.ndarray
    trapped_mask: np.ndarray
    mask_voxels: int
    trapped_voxels: int
    fsad_voxels: int

    @property
    def air_trapping_percent(self) -> float:
        return 100.0 * self.trapped_voxels / self.mask_voxels

    @property
    def fsad_percent(self) -> float:
        return 100.0 * self.fsad_voxels / self.mask_voxels

    def record(self) -> dict:
        return {
            "mask_voxels": self.mask_voxels,
            "trapped_voxels": self.trapped_voxels,
            "fsad_voxels": self.fsad_voxels,
            "air_trapping_percent": self.air_trapping_percent,
            "fsad_percent": self.fsad_percent,
        }


def hu_normalize(v):
    """Clip to [-1024, 1024] HU and map affinely onto [-1, 1]."""
    if isinstance(v, Volume):
        return Volume(hu_normalize(v.data), v.spacing, v.domain)
    v = np.asarray(v, dtype=np.float32)
    return (np.clip(v, HU_MIN, HU_MAX) / np.float32(HU_MAX)).astype(np.float32)


def hu_denormalize(v):
    if isinstance(v, Volume):
        return Volume(hu_denormalize(v.data), v.spacing, v.domain)
    v = np.asarray(v, dtype=np.float32)
    return (v * np.float32(HU_MAX)).astype(np.float32)


def _coords(g: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.meshgrid(*(np.arange(g, dtype=np.float64),) * 3, indexing="ij")


def ellipsoid(g: int, center, axes) -> np.ndarray:
    x, y, z = _coords(g)
    r = sum(((c - m) / a) ** 2 for c, m, a in zip((x, y, z), center, axes))
    return r <= 1.0


def sphere(g: int, center, radius: float) -> np.ndarray:
    return ellipsoid(g, center, (radius,) * 3)


def capsule_z(g: int, xy, radius: float, z_range) -> np.ndarray:
    x, y, z = _coords(g)
    inside = (x - xy[0]) ** 2 + (y - xy[1]) ** 2 <= radius**2
    return inside & (z >= z_range[0]) & (z <= z_range[1])


def _smooth_field(rng: np.random.Generator, g: int, scale: float, clip: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((g, g, g)), scale, mode="wrap")
    f /= f.std()
    return np.clip(f, -clip, clip)


def _random_inside(rng: np.random.Generator, lung: np.ndarray, margin_mask: np.ndarray) -> tuple[float, ...]:
    candidates = np.argwhere(margin_mask & lung)
    if len(candidates) == 0:
        candidates = np.argwhere(lung)
    return tuple(float(c) for c in candidates[rng.integers(len(candidates))])


def _shrink(mask: np.ndarray, r: float) -> np.ndarray:
    it = max(int(np.floor(r)), 0)
    return binary_erosion(mask, iterations=it) if it else mask


def generate_pair(params: PhantomParams, pockets=None) -> tuple[Volume, Volume, PhantomTruth]:
    """Return (TLC, RV, truth), both volumes in HU.

    ``pockets`` optionally fixes the trapped spheres as ((center, radius), ...).
    """
    params.validate()
    g = params.grid
    rng = np.random.default_rng(params.seed)

    lungs = []
    for c, a in zip(params.lung_centers, params.lung_axes):
        dc = rng.uniform(-params.jitter, params.jitter, 3)
        da = rng.uniform(-params.jitter, params.jitter, 3) * 0.5
        lungs.append(ellipsoid(g, np.add(c, dc), np.add(a, da)))
    mask = lungs[0] | lungs[1]

    vessels = np.zeros_like(mask)
    for i in range(params.vessel_count):
        lung = lungs[i % 2]
        zs = np.nonzero(lung.any(axis=(0, 1)))[0]
        cx, cy, _ = _random_inside(rng, lung, _shrink(lung, params.vessel_radius + 1))
        vessels |= capsule_z(g, (cx, cy), params.vessel_radius, (zs[0], zs[-1])) & lung

    if pockets is None:
        n = int(rng.integers(params.pocket_count[0], params.pocket_count[1] + 1))
        pockets = []
        for _ in range(n):
            radius = float(rng.uniform(*params.pocket_radius))
            lung = lungs[int(rng.integers(2))]
            pockets.append((_random_inside(rng, lung, _shrink(lung, radius)), radius))
    trapped = np.zeros_like(mask)
    for center, radius in pockets:
        trapped |= sphere(g, center, radius)
    trapped &= mask & ~vessels

    texture = _smooth_field(rng, g, params.texture_scale, params.texture_clip)
    tlc = np.full((g, g, g), params.background_hu)
    parenchyma = mask & ~vessels
    tlc[parenchyma] = params.tlc_mean + params.tlc_sigma * texture[parenchyma]
    tlc[trapped] += params.pocket_tlc_shift
    tlc[vessels] = params.vessel_hu
    rv = tlc.copy()
    healthy = parenchyma & ~trapped
    rv[healthy] += params.delta_hu

    clean_tlc = np.clip(tlc, HU_MIN, HU_MAX)
    clean_rv = np.clip(rv, HU_MIN, HU_MAX)
    fsad = mask & (clean_tlc >= FSAD_TLC[0]) & (clean_tlc <= FSAD_TLC[1])
    fsad &= (clean_rv >= FSAD_RV[0]) & (clean_rv <= FSAD_RV[1])

    if params.noise_sigma > 0:
        tlc = tlc + rng.normal(0.0, params.noise_sigma, tlc.shape)
        rv = rv + rng.normal(0.0, params.noise_sigma, rv.shape)
    tlc = np.clip(tlc, HU_MIN, HU_MAX).astype(np.float32)
    rv = np.clip(rv, HU_MIN, HU_MAX).astype(np.float32)

    truth = PhantomTruth(
        lung_mask=mask.astype(np.uint8),
        trapped_mask=trapped.astype(np.uint8),
        mask_voxels=int(mask.sum()),
        trapped_voxels=int(trapped.sum()),
        fsad_voxels=int(fsad.sum()),
    )
    return Volume(tlc, 1.0, "TLC"), Volume(rv, 1.0, "RV"), truth


def pair_seed(master_seed: int, index: int) -> int:
    return int(master_seed) * 100_003 + int(index)


def split_counts(n: int, train_fraction: float = 0.8) -> tuple[int, int]:
    n_train = int(np.floor(n * train_fraction))
    return n_train, n - n_train


def build_dataset(n: int, params: PhantomParams, out_dir, master_seed: int = 0,
                  train_fraction: float = 0.8) -> Path:
    """Write n pairs, masks and truth records plus a JSON-lines manifest; returns the manifest path."""
    if n < 1:
        raise ValueError("dataset needs at least one pair")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create dataset directory {out}: {err}") from err
    n_train, n_held = split_counts(n, train_fraction)
    header = {
        "kind": "dataset",
        "n": n,
        "master_seed": master_seed,
        "n_train": n_train,
        "n_heldout": n_held,
        "train_fraction": train_fraction,
        "params": {k: v for k, v in params.to_dict().items() if k != "seed"},
    }
    lines = [json.dumps(header, sort_keys=True)]
    truth_lines = []
    for i in range(n):
        seed = pair_seed(master_seed, i)
        p = PhantomParams(**{**params.__dict__, "seed": seed})
        tlc, rv, truth = generate_pair(p)
        names = {k: f"pair{i:03d}_{k}.rvl" for k in ("tlc", "rv", "mask")}
        write_volume(out / names["tlc"], tlc)
        write_volume(out / names["rv"], rv)
        write_volume(out / names["mask"], truth.lung_mask)
        truth_lines.append(json.dumps({"index": i, "seed": seed, **truth.record()}, sort_keys=True))
        split = "train" if i < n_train else "heldout"
        lines.append(json.dumps({"kind": "pair", "index": i, "seed": seed, "split": split, **names}, sort_keys=True))
    try:
        (out / "truth.jsonl").write_text("\n".join(truth_lines) + "\n")
        manifest = out / "manifest.jsonl"
        manifest.write_text("\n".join(lines) + "\n")
    except OSError as err:
        raise OSError(f"cannot write dataset index in {out}: {err}") from err
    return manifest


@dataclass
class PairRecord:
    index: int
    seed: int
    split: str
    tlc: Path
    rv: Path
    mask: Path
    truth: dict = field(default_factory=dict)


def load_manifest(path) -> tuple[dict, list[PairRecord]]:
    path = Path(path)
    root = path.parent
    lines = [json.loads(s) for s in path.read_text().splitlines() if s.strip()]
    if not lines or lines[0].get("kind") != "dataset":
        raise ValueError(f"{path}: missing dataset header")
    truths = {}
    tpath = root / "truth.jsonl"
    if tpath.exists():
        for s in tpath.read_text().splitlines():
            if s.strip():
                rec = json.loads(s)
                truths[rec["index"]] = rec
    pairs = [
        PairRecord(r["index"], r["seed"], r["split"], root / r["tlc"], root / r["rv"], root / r["mask"],
                   truths.get(r["index"], {}))
        for r in lines[1:]
    ]
    return lines[0], pairs
