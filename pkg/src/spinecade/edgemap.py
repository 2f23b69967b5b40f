"""Axial Sobel gradients and edge-candidate extraction inside a mask."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimMismatchError, EmptyMaskError, IoError, ShapeMismatchError, TooSmallError
from .volume import Volume

# Cross-correlation kernels, rows = y, columns = x.
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]])
SOBEL_Y = SOBEL_X.T.copy()

DEFAULT_PERCENTILE = 75.0


def _sobel_last2(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # a: (..., rows, cols), already promoted to a wide type
    pad = [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(a, pad, mode="edge")
    left, centre, right = p[..., :, :-2], p[..., :, 1:-1], p[..., :, 2:]
    dx = right - left  # horizontal difference at every padded row
    sx = left + 2 * centre + right  # horizontal smoothing
    gx = dx[..., :-2, :] + 2 * dx[..., 1:-1, :] + dx[..., 2:, :]
    gy = sx[..., 2:, :] - sx[..., :-2, :]
    return gx, gy


def _promote(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
        return a.astype(np.int64)
    return a.astype(np.float64)


def sobel_slice(slice2d) -> tuple[np.ndarray, np.ndarray]:
    """Return (Gx, Gy) for one 2D slice with replicate-edge borders.

    Integer input is processed in 64-bit integers, so results are exact
    before the final conversion to float64.
    """
    a = np.asarray(slice2d)
    if a.ndim != 2:
        raise ShapeMismatchError(f"expected a 2D slice, got shape {a.shape}")
    if a.shape[0] < 3 or a.shape[1] < 3:
        raise TooSmallError(f"slice must be at least 3x3, got {a.shape}")
    gx, gy = _sobel_last2(_promote(a))
    return gx.astype(np.float64), gy.astype(np.float64)


def sobel_volume(v: Volume) -> tuple[np.ndarray, np.ndarray]:
    """Per-axial-slice (Gx, Gy) for the whole volume, arrays indexed [z, y, x]."""
    nx, ny, _ = v.dims
    if nx < 3 or ny < 3:
        raise TooSmallError(f"axial slices must be at least 3x3, got {nx}x{ny}")
    gx, gy = _sobel_last2(_promote(v.data))
    return gx.astype(np.float64), gy.astype(np.float64)


def gradient_magnitude(gx, gy) -> np.ndarray:
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape:
        raise ShapeMismatchError(f"Gx shape {gx.shape} != Gy shape {gy.shape}")
    return np.sqrt(gx * gx + gy * gy)


# Neighbour offsets (dx, dy) for gradient directions quantised to 0/45/90/135 degrees.
_NMS_OFFSETS = ((1, 0), (1, 1), (0, 1), (-1, 1))


def quantize_direction(gx, gy) -> np.ndarray:
    """Bin index 0..3 of the gradient direction folded into [0, 180) degrees."""
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    return (np.floor((angle + 22.5) / 45.0).astype(np.int64)) % 4


def non_maximum_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Boolean map of pixels that are local maxima along their gradient line.

    Works on the last two axes.  A pixel survives when its magnitude is
    >= the neighbour behind it and strictly > the neighbour ahead of it,
    which thins a symmetric two-pixel ridge to a single pixel.  Outside
    the slice counts as zero magnitude.
    """
    pad = [(0, 0)] * (mag.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(mag, pad, mode="constant")
    rows, cols = mag.shape[-2:]
    direction = quantize_direction(gx, gy)
    keep = np.zeros(mag.shape, dtype=bool)
    for k, (dx, dy) in enumerate(_NMS_OFFSETS):
        ahead = p[..., 1 + dy : 1 + dy + rows, 1 + dx : 1 + dx + cols]
        behind = p[..., 1 - dy : 1 - dy + rows, 1 - dx : 1 - dx + cols]
        keep |= (direction == k) & (mag >= behind) & (mag > ahead)
    return keep


@dataclass(frozen=True)
class EdgeVoxel:
    index: tuple[int, int, int]
    grad_x: float
    grad_y: float
    magnitude: float
    slice_axis: str = "axial"


@dataclass(eq=False)
class EdgeMap:
    """Edge candidates stored column-wise; ``indices`` rows are (x, y, z)."""

    indices: np.ndarray
    grad_x: np.ndarray
    grad_y: np.ndarray
    magnitude: np.ndarray
    source_dims: tuple[int, int, int]
    threshold_used: float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.grad_x = np.asarray(self.grad_x, dtype=np.float64)
        self.grad_y = np.asarray(self.grad_y, dtype=np.float64)
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64)
        self.source_dims = tuple(int(d) for d in self.source_dims)
        n = len(self.indices)
        if not (len(self.grad_x) == len(self.grad_y) == len(self.magnitude) == n):
            raise ShapeMismatchError("edge map columns have different lengths")

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> EdgeVoxel:
        return EdgeVoxel(
            tuple(int(c) for c in self.indices[i]),
            float(self.grad_x[i]),
            float(self.grad_y[i]),
            float(self.magnitude[i]),
        )

    @property
    def voxels(self) -> list[EdgeVoxel]:
        return list(self)

    def index_set(self) -> set[tuple[int, int, int]]:
        return {tuple(int(c) for c in row) for row in self.indices}


def dilate_in_plane(mask: np.ndarray) -> np.ndarray:
    """Grow a [z, y, x] mask by one voxel within each axial slice (8-neighbourhood)."""
    structure = np.zeros((3, 3, 3), dtype=bool)
    structure[1] = True
    return ndimage.binary_dilation(mask, structure=structure)


def extract_edges(v: Volume, mask: Volume, threshold_percentile: float = DEFAULT_PERCENTILE) -> EdgeMap:
    if not 0 < threshold_percentile < 100:
        raise ValueError(f"threshold_percentile must lie in (0, 100), got {threshold_percentile}")
    if v.dims != mask.dims or not np.allclose(v.spacing, mask.spacing):
        raise DimMismatchError(f"image {v.dims}/{v.spacing} and mask {mask.dims}/{mask.spacing} differ")
    inside = mask.data != 0
    if not inside.any():
        raise EmptyMaskError("mask has no foreground voxels")

    gx, gy = sobel_volume(v)
    mag = gradient_magnitude(gx, gy)
    threshold = float(np.percentile(mag[inside], threshold_percentile))
    keep = dilate_in_plane(inside) & (mag > threshold) & (mag > 0) & non_maximum_suppression(mag, gx, gy)

    z, y, x = np.nonzero(keep)  # already sorted by (z, y, x)
    return EdgeMap(
        np.stack([x, y, z], axis=1),
        gx[z, y, x],
        gy[z, y, x],
        mag[z, y, x],
        v.dims,
        threshold,
    )


def magnitude_volume(v: Volume) -> Volume:
    """|G| of every axial slice as an int16 volume for debugging."""
    mag = gradient_magnitude(*sobel_volume(v))
    data = np.clip(np.rint(mag), 0, np.iinfo(np.int16).max).astype(np.int16)
    return Volume(data, v.spacing, v.origin)


def save_edgemap(edges: EdgeMap, csv_path) -> None:
    """CSV ``x,y,z,gx,gy,mag`` plus a JSON sidecar with dims and threshold."""
    csv_path = Path(csv_path)
    try:
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "gx", "gy", "mag"])
            for (x, y, z), a, b, m in zip(edges.indices.tolist(), edges.grad_x, edges.grad_y, edges.magnitude):
                w.writerow([x, y, z, repr(float(a)), repr(float(b)), repr(float(m))])
        meta = {"source_dims": list(edges.source_dims), "threshold_used": edges.threshold_used}
        csv_path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write edge map {csv_path}: {exc}") from exc


def load_edgemap(csv_path) -> EdgeMap:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if table.size == 0:
        table = np.zeros((0, 6))
    return EdgeMap(
        table[:, :3].astype(np.int64),
        table[:, 3],
        table[:, 4],
        table[:, 5],
        tuple(meta["source_dims"]),
        float(meta["threshold_used"]),
    )
