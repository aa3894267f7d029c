"""Synthetic two-class volume datasets with known discriminative regions.

Class 0 volumes are a fixed smooth "anatomy" template (bright ellipsoid on a
dark background) plus seeded Gaussian noise and optional box smoothing.
Class 1 volumes run the same pipeline with intensities inside each lesion
region multiplied by (1 - lesion_delta) before noise is added, so the classes
differ only inside the planted lesions. Generation is bit-deterministic for a
fixed spec: the noise stream for volume index i is derived from (seed, i).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import InvalidArgumentError
from .volume import PatchGrid, Region, Volume, patch_means, read_vol, write_vol


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    n_per_class: int
    lesion_regions: tuple[Region, ...]
    lesion_delta: float
    noise_sigma: float
    smooth_radius: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "lesion_regions", tuple(self.lesion_regions))
        if any(d < 1 for d in self.dims):
            raise InvalidArgumentError(f"dims must be >= 1, got {self.dims}")
        if self.n_per_class < 1:
            raise InvalidArgumentError("n_per_class must be >= 1")
        if not (0.0 < self.lesion_delta <= 1.0):
            raise InvalidArgumentError(
                f"lesion_delta must be in (0, 1], got {self.lesion_delta}"
            )
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")
        if self.smooth_radius < 0:
            raise InvalidArgumentError("smooth_radius must be >= 0")
        if not self.lesion_regions:
            raise InvalidArgumentError("at least one lesion region is required")
        for r in self.lesion_regions:
            if any(r.end[a] > self.dims[a] for a in range(3)):
                raise InvalidArgumentError(f"lesion region {r} outside dims {self.dims}")

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "n_per_class": self.n_per_class,
            "lesion_regions": [r.to_json() for r in self.lesion_regions],
            "lesion_delta": self.lesion_delta,
            "noise_sigma": self.noise_sigma,
            "smooth_radius": self.smooth_radius,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        return cls(
            dims=tuple(obj["dims"]),
            n_per_class=int(obj["n_per_class"]),
            lesion_regions=tuple(Region.from_json(r) for r in obj["lesion_regions"]),
            lesion_delta=float(obj["lesion_delta"]),
            noise_sigma=float(obj["noise_sigma"]),
            smooth_radius=int(obj["smooth_radius"]),
            seed=int(obj["seed"]),
        )


@dataclass
class DatasetManifest:
    """Index of generated volumes: (relative path, label) pairs plus provenance."""

    spec: PhantomSpec
    ground_truth: tuple[Region, ...]
    entries: list[tuple[str, int]]
    root: Path | None = field(default=None, compare=False)

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.entries], dtype=np.int64)

    def volume_path(self, i: int) -> Path:
        rel = self.entries[i][0]
        return (self.root / rel) if self.root is not None else Path(rel)

    def load_volume(self, i: int) -> Volume:
        return read_vol(self.volume_path(i))

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "ground_truth": [r.to_json() for r in self.ground_truth],
            "entries": [{"path": p, "label": label} for p, label in self.entries],
        }

    @classmethod
    def from_json(cls, obj: dict, root: Path | None = None) -> "DatasetManifest":
        return cls(
            spec=PhantomSpec.from_json(obj["spec"]),
            ground_truth=tuple(Region.from_json(r) for r in obj["ground_truth"]),
            entries=[(e["path"], int(e["label"])) for e in obj["entries"]],
            root=root,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), root=path.parent)


def base_anatomy(dims: tuple[int, int, int]) -> np.ndarray:
    """Fixed anatomy template as a float64 (D, H, W) array in [0, 1].

    A quadratic radial falloff inside an ellipsoid spanning ~84% of each axis,
    0.06 background outside; smooth and fully deterministic.
    """
    w, h, d = dims
    zs = np.arange(d, dtype=np.float64).reshape(d, 1, 1)
    ys = np.arange(h, dtype=np.float64).reshape(1, h, 1)
    xs = np.arange(w, dtype=np.float64).reshape(1, 1, w)
    rho2 = (
        ((xs - (w - 1) / 2.0) / (0.42 * w)) ** 2
        + ((ys - (h - 1) / 2.0) / (0.42 * h)) ** 2
        + ((zs - (d - 1) / 2.0) / (0.42 * d)) ** 2
    )
    return 0.06 + 0.82 * np.maximum(0.0, 1.0 - rho2)


def _volume_rng(seed: int, index: int) -> np.random.Generator:
    # Stream derived from (seed, index) so parallel generation cannot reorder draws.
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index))))


def synth_volume(spec: PhantomSpec, label: int, index: int, template: np.ndarray | None = None) -> Volume:
    """Build one phantom volume: template -> lesion scaling -> noise -> blur -> clamp."""
    if template is None:
        template = base_anatomy(spec.dims)
    arr = template.copy()
    if label == 1:
        for r in spec.lesion_regions:
            (x0, y0, z0), (sx, sy, sz) = r.origin, r.size
            arr[z0 : z0 + sz, y0 : y0 + sy, x0 : x0 + sx] *= 1.0 - spec.lesion_delta
    if spec.noise_sigma > 0:
        rng = _volume_rng(spec.seed, index)
        arr = arr + spec.noise_sigma * rng.standard_normal(arr.shape)
    if spec.smooth_radius > 0:
        arr = uniform_filter(arr, size=2 * spec.smooth_radius + 1, mode="nearest")
    arr = np.clip(arr, 0.0, 1.0)
    return Volume(spec.dims, arr.astype(np.float32).reshape(-1), validate=False)


def generate(spec: PhantomSpec, out_dir) -> DatasetManifest:
    """Write ``2 * n_per_class`` VOL1 volumes plus ``manifest.json`` under ``out_dir``.

    Volume index = label * n_per_class + i, so the per-volume noise streams are
    stable regardless of generation order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = base_anatomy(spec.dims)
    entries: list[tuple[str, int]] = []
    for label in (0, 1):
        for i in range(spec.n_per_class):
            index = label * spec.n_per_class + i
            vol = synth_volume(spec, label, index, template)
            name = f"vol_{label}_{i:04d}.vol"
            write_vol(out_dir / name, vol)
            entries.append((name, label))
    manifest = DatasetManifest(
        spec=spec, ground_truth=spec.lesion_regions, entries=entries, root=out_dir
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def class_separability(manifest: DatasetManifest, grid: PatchGrid) -> np.ndarray:
    """Per-patch difference of class-mean patch intensities (class 1 - class 0)."""
    if tuple(grid.vol_dims) != tuple(manifest.spec.dims):
        raise InvalidArgumentError(
            f"grid dims {grid.vol_dims} do not match dataset dims {manifest.spec.dims}"
        )
    sums = {0: np.zeros(len(grid)), 1: np.zeros(len(grid))}
    counts = {0: 0, 1: 0}
    for i, (_, label) in enumerate(manifest.entries):
        sums[label] += patch_means(manifest.load_volume(i), grid)
        counts[label] += 1
    if counts[0] == 0 or counts[1] == 0:
        raise InvalidArgumentError("both classes must be present")
    return sums[1] / counts[1] - sums[0] / counts[0]
