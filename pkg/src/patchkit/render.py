"""Deterministic PGM (P5) renderings of volume mid-slices with patch outlines."""
from __future__ import annotations

import numpy as np

from .volume import Region, Volume


def encode_pgm(image: np.ndarray) -> bytes:
    """8-bit binary PGM bytes for a 2-D uint8 image."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def _outline(img: np.ndarray, row0: int, row1: int, col0: int, col1: int) -> None:
    # Half-open pixel ranges; border drawn at max intensity.
    img[row0, col0:col1] = 255
    img[row1 - 1, col0:col1] = 255
    img[row0:row1, col0] = 255
    img[row0:row1, col1 - 1] = 255


def render_slices(volume: Volume, regions: list[Region]) -> dict[str, bytes]:
    """Axial/coronal/sagittal mid-slices with the given regions outlined.

    Intensities are clamped to [0, 1] and scaled to 0..255; every region whose
    extent crosses the slice plane has its 2-D footprint border set to 255.
    """
    arr = np.clip(volume.as_array(), 0.0, 1.0)
    gray = np.round(arr * 255.0).astype(np.uint8)
    w, h, d = volume.dims
    zc, yc, xc = d // 2, h // 2, w // 2

    axial = gray[zc].copy()  # rows y, cols x
    coronal = gray[:, yc, :].copy()  # rows z, cols x
    sagittal = gray[:, :, xc].copy()  # rows z, cols y
    for r in regions:
        (x0, y0, z0), (sx, sy, sz) = r.origin, r.size
        if z0 <= zc < z0 + sz:
            _outline(axial, y0, y0 + sy, x0, x0 + sx)
        if y0 <= yc < y0 + sy:
            _outline(coronal, z0, z0 + sz, x0, x0 + sx)
        if x0 <= xc < x0 + sx:
            _outline(sagittal, z0, z0 + sz, y0, y0 + sy)
    return {
        "axial": encode_pgm(axial),
        "coronal": encode_pgm(coronal),
        "sagittal": encode_pgm(sagittal),
    }
