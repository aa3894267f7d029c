"""Dense 3D volumes, axis-aligned regions, uniform patch grids, and the VOL1 file format.

Voxel layout is fixed: x varies fastest, so the flat index of voxel (x, y, z)
in a volume of dims (W, H, D) is ``(z * H + y) * W + x``. All grid and patch
orderings in this package follow the same convention (z-major, x-fastest).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

VOL1_MAGIC = b"VOL1"
_VOL1_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class Region:
    """Axis-aligned cuboid: voxel origin (x0, y0, z0) and size (sx, sy, sz)."""

    origin: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(v) for v in self.origin))
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        if len(self.origin) != 3 or len(self.size) != 3:
            raise InvalidArgumentError("region origin and size must have 3 components")
        if any(o < 0 for o in self.origin):
            raise InvalidArgumentError(f"region origin must be nonnegative, got {self.origin}")
        if any(s < 1 for s in self.size):
            raise InvalidArgumentError(f"region size must be >= 1 per axis, got {self.size}")

    @property
    def voxel_count(self) -> int:
        sx, sy, sz = self.size
        return sx * sy * sz

    @property
    def end(self) -> tuple[int, int, int]:
        """Exclusive upper corner (x0+sx, y0+sy, z0+sz)."""
        return tuple(o + s for o, s in zip(self.origin, self.size))

    def contains(self, other: "Region") -> bool:
        return all(
            self.origin[a] <= other.origin[a] and other.end[a] <= self.end[a]
            for a in range(3)
        )

    def intersects(self, other: "Region") -> bool:
        return all(
            self.origin[a] < other.end[a] and other.origin[a] < self.end[a]
            for a in range(3)
        )

    def overlap_voxels(self, other: "Region") -> int:
        n = 1
        for a in range(3):
            lo = max(self.origin[a], other.origin[a])
            hi = min(self.end[a], other.end[a])
            if hi <= lo:
                return 0
            n *= hi - lo
        return n

    def to_json(self) -> dict:
        return {"origin": list(self.origin), "size": list(self.size)}

    @classmethod
    def from_json(cls, obj: dict) -> "Region":
        return cls(tuple(obj["origin"]), tuple(obj["size"]))


class Volume:
    """Immutable dense 3D scalar field: dims (W, H, D) plus a flat float32 buffer.

    The buffer is marked read-only after construction, so instances are safe to
    share across threads. Perturbations always allocate a fresh volume.
    """

    __slots__ = ("dims", "voxels")

    def __init__(self, dims: tuple[int, int, int], voxels, validate: bool = True):
        dims = tuple(int(d) for d in dims)
        buf = np.ascontiguousarray(voxels, dtype=np.float32).reshape(-1)
        if validate:
            if len(dims) != 3 or any(d < 1 for d in dims):
                raise InvalidArgumentError(f"volume dims must be three values >= 1, got {dims}")
            w, h, d = dims
            if buf.size != w * h * d:
                raise InvalidArgumentError(
                    f"voxel buffer has {buf.size} values, expected {w * h * d} for dims {dims}"
                )
            if not np.all(np.isfinite(buf)):
                raise InvalidArgumentError("volume intensities must be finite")
        buf.setflags(write=False)
        self.dims = dims
        self.voxels = buf

    @property
    def W(self) -> int:
        return self.dims[0]

    @property
    def H(self) -> int:
        return self.dims[1]

    @property
    def D(self) -> int:
        return self.dims[2]

    def as_array(self) -> np.ndarray:
        """Read-only (D, H, W) view of the voxel buffer (index order [z, y, x])."""
        return self.voxels.reshape(self.D, self.H, self.W)

    def bounding_region(self) -> Region:
        return Region((0, 0, 0), self.dims)

    def contains(self, r: Region) -> bool:
        return all(r.end[a] <= self.dims[a] for a in range(3))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Volume)
            and self.dims == other.dims
            and np.array_equal(self.voxels, other.voxels)
        )

    def __repr__(self) -> str:
        return f"Volume(dims={self.dims})"


@dataclass(frozen=True)
class PatchGrid:
    """Uniform cubic patch grid over a volume, trailing remainders excluded.

    Regions are ordered z-major, x-fastest: index = (gz * ny + gy) * nx + gx.
    """

    vol_dims: tuple[int, int, int]
    patch_edge: int
    counts: tuple[int, int, int]
    regions: tuple[Region, ...]

    @property
    def patch_size(self) -> tuple[int, int, int]:
        return (self.patch_edge,) * 3

    def __len__(self) -> int:
        return len(self.regions)

    def indices_intersecting(self, target: Region) -> list[int]:
        """Indices of grid patches whose region intersects ``target``."""
        return [i for i, r in enumerate(self.regions) if r.intersects(target)]

    def to_json(self) -> dict:
        return {
            "dims": list(self.vol_dims),
            "patch_edge": self.patch_edge,
            "counts": list(self.counts),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatchGrid":
        grid = make_grid(tuple(obj["dims"]), int(obj["patch_edge"]))
        if tuple(obj["counts"]) != grid.counts:
            raise InvalidArgumentError(
                f"grid counts {obj['counts']} inconsistent with dims/patch_edge"
            )
        return grid


def make_grid(vol_dims: tuple[int, int, int], patch_edge: int) -> PatchGrid:
    """Partition (W, H, D) into disjoint cubic patches of edge ``patch_edge``.

    Counts use floor division per axis; remainder voxels belong to no patch.
    """
    w, h, d = (int(v) for v in vol_dims)
    p = int(patch_edge)
    if p < 1:
        raise InvalidArgumentError(f"patch_edge must be positive, got {patch_edge}")
    if p > min(w, h, d):
        raise InvalidArgumentError(
            f"patch_edge {p} larger than smallest volume dimension of {vol_dims}"
        )
    nx, ny, nz = w // p, h // p, d // p
    regions = tuple(
        Region((gx * p, gy * p, gz * p), (p, p, p))
        for gz in range(nz)
        for gy in range(ny)
        for gx in range(nx)
    )
    return PatchGrid((w, h, d), p, (nx, ny, nz), regions)


def _check_inside(v: Volume, r: Region) -> None:
    if not v.contains(r):
        raise InvalidArgumentError(f"region {r} extends outside volume dims {v.dims}")


def perturb_zero(v: Volume, regions) -> Volume:
    """Return a copy of ``v`` with every voxel inside any listed region set to 0.0.

    The input volume is never modified; listing a region twice is a no-op.
    """
    regions = list(regions)
    for r in regions:
        _check_inside(v, r)
    out = v.voxels.copy().reshape(v.D, v.H, v.W)
    for r in regions:
        (x0, y0, z0), (sx, sy, sz) = r.origin, r.size
        out[z0 : z0 + sz, y0 : y0 + sy, x0 : x0 + sx] = 0.0
    return Volume(v.dims, out.reshape(-1), validate=False)


def extract_patch(v: Volume, r: Region) -> np.ndarray:
    """Copy a region's voxels into a flat vector in (z-major, x-fastest) order."""
    _check_inside(v, r)
    (x0, y0, z0), (sx, sy, sz) = r.origin, r.size
    block = v.as_array()[z0 : z0 + sz, y0 : y0 + sy, x0 : x0 + sx]
    return np.ascontiguousarray(block, dtype=np.float32).reshape(-1)


def octree_children(r: Region) -> list[Region]:
    """Split a region into at most 8 disjoint halves covering it exactly.

    Each axis of size s splits into floor(s/2) and s - floor(s/2); axes of size
    1 do not split. Children are ordered low-half first per axis, z-major.
    """
    if all(s < 2 for s in r.size):
        raise InvalidArgumentError(f"cannot split 1x1x1 region at {r.origin}")
    segments = []
    for a in range(3):
        s = r.size[a]
        o = r.origin[a]
        if s >= 2:
            lo = s // 2
            segments.append([(o, lo), (o + lo, s - lo)])
        else:
            segments.append([(o, s)])
    return [
        Region((xs[0], ys[0], zs[0]), (xs[1], ys[1], zs[1]))
        for zs in segments[2]
        for ys in segments[1]
        for xs in segments[0]
    ]


_ONES_CACHE: dict[int, np.ndarray] = {}


def patch_means(v: Volume, grid: PatchGrid) -> np.ndarray:
    """Mean intensity of every grid patch, in grid order, as float64.

    This is the pooled feature vector consumed by the surrogate classifiers
    and the t-test selector. It sits on the attribution hot path (one call per
    coalition evaluation), so the x-axis reduction runs as a float32 BLAS
    matvec before switching to float64 for the small remaining axes.
    """
    if grid.vol_dims != v.dims:
        raise InvalidArgumentError(
            f"grid dims {grid.vol_dims} do not match volume dims {v.dims}"
        )
    p = grid.patch_edge
    nx, ny, nz = grid.counts
    arr = v.as_array()[: nz * p, : ny * p, : nx * p]
    ones = _ONES_CACHE.get(p)
    if ones is None:
        ones = _ONES_CACHE.setdefault(p, np.ones(p, dtype=np.float32))
    xsum = np.ascontiguousarray(arr).reshape(-1, p) @ ones
    s = xsum.reshape(nz * p, ny, p, nx).sum(axis=2, dtype=np.float64)
    s = s.reshape(nz, p, ny, nx).sum(axis=1)
    return (s / float(p**3)).reshape(-1)


def write_vol(path, v: Volume) -> None:
    """Write a volume in the VOL1 format (magic, u32 W/H/D, f32 LE voxels)."""
    payload = _VOL1_HEADER.pack(VOL1_MAGIC, v.W, v.H, v.D) + v.voxels.astype("<f4").tobytes()
    Path(path).write_bytes(payload)


def read_vol(path) -> Volume:
    """Read a VOL1 file, rejecting wrong magic or truncated payloads."""
    raw = Path(path).read_bytes()
    if len(raw) < _VOL1_HEADER.size:
        raise InvalidArgumentError(f"{path}: file too short for a VOL1 header")
    magic, w, h, d = _VOL1_HEADER.unpack_from(raw)
    if magic != VOL1_MAGIC:
        raise InvalidArgumentError(f"{path}: bad magic {magic!r}, expected {VOL1_MAGIC!r}")
    expected = _VOL1_HEADER.size + 4 * w * h * d
    if len(raw) < expected:
        raise InvalidArgumentError(
            f"{path}: payload truncated, {len(raw)} bytes < {expected} expected"
        )
    voxels = np.frombuffer(raw, dtype="<f4", count=w * h * d, offset=_VOL1_HEADER.size)
    return Volume((w, h, d), voxels)
