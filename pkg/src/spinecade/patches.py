"""2.5D patch extraction (original, mirrored, oriented) and patch-set assembly."""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .edgemap import EdgeMap, EdgeVoxel, sobel_volume
from .errors import EmptyEdgeMapError, IoError, NoPositivesError, VersionMismatchError
from .orientation import DEFAULT_WINDOW_RADIUS, EdgeOrientation, MIN_ANISOTROPY, orientation_at
from .volume import Annotation, Volume

PATCH_SIZE = 64
CENTER = PATCH_SIZE // 2  # pixel that sits on the edge voxel
HU_WINDOW = (-200.0, 1300.0)
AIR_HU = -1000.0
DEFAULT_RADIUS_MM = 5.0
DEFAULT_POS_FRACTION = 0.33
MIRROR_AXES = ("lr", "ud")

_OFFSETS = np.arange(PATCH_SIZE) - CENTER
_PAD_Z = CENTER + 1
_PAD_XY = int(math.ceil(CENTER * math.sqrt(2))) + 2  # room for any rotated grid


class Label(enum.IntEnum):
    NON_FRACTURE = 0
    FRACTURE = 1


class Strategy(enum.IntEnum):
    ORIGINAL = 0
    MIRRORED = 1
    ORIENTED = 2

    @classmethod
    def parse(cls, name) -> "Strategy":
        if isinstance(name, cls):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ValueError(f"unknown strategy {name!r}; expected original, mirrored or oriented") from None


@dataclass(eq=False)
class Patch25D:
    """Axial, coronal and sagittal planes stacked as a (3, 64, 64) float32 array."""

    planes: np.ndarray
    label: Label
    source_index: tuple[int, int, int]
    strategy: Strategy
    theta_used: float | None = None
    mirrored: bool = False

    @property
    def axial(self):
        return self.planes[0]

    @property
    def coronal(self):
        return self.planes[1]

    @property
    def sagittal(self):
        return self.planes[2]

    def center_pixel(self, mirror_axis: str = "lr") -> tuple[int, int]:
        """(row, col) of the pixel that samples the edge voxel itself."""
        if not self.mirrored:
            return CENTER, CENTER
        if mirror_axis == "lr":
            return CENTER, PATCH_SIZE - 1 - CENTER
        return PATCH_SIZE - 1 - CENTER, CENTER


def window_hu(hu) -> np.ndarray:
    """Clamp to the bone window and map linearly onto [0, 1]."""
    lo, hi = HU_WINDOW
    return np.clip((np.asarray(hu, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def mirror(planes: np.ndarray, mirror_axis: str = "lr") -> np.ndarray:
    """Flip every plane left-right ("lr": column j -> 63 - j) or up-down ("ud")."""
    if mirror_axis not in MIRROR_AXES:
        raise ValueError(f"mirror_axis must be one of {MIRROR_AXES}, got {mirror_axis!r}")
    axis = -1 if mirror_axis == "lr" else -2
    return np.ascontiguousarray(np.flip(planes, axis=axis))


def mirror_patch(p: Patch25D, mirror_axis: str = "lr") -> Patch25D:
    return Patch25D(mirror(p.planes, mirror_axis), p.label, p.source_index, p.strategy, p.theta_used, not p.mirrored)


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``image[y, x]`` at float coordinates.

    Coordinates must lie inside the image (callers pad generously).
    Samples at integer coordinates return the stored value exactly.
    """
    rows, cols = image.shape
    xs = np.clip(xs, 0, cols - 1)
    ys = np.clip(ys, 0, rows - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), cols - 2)
    y0 = np.minimum(np.floor(ys).astype(np.int64), rows - 2)
    fx = xs - x0
    fy = ys - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x0 + 1] * fx
    bottom = image[y0 + 1, x0] * (1 - fx) + image[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bottom * fy


class PatchExtractor:
    """Pads a volume once with air so every patch is a plain slice."""

    def __init__(self, v: Volume):
        self.volume = v
        self._padded = np.pad(
            v.data.astype(np.float64),
            ((_PAD_Z, _PAD_Z), (_PAD_XY, _PAD_XY), (_PAD_XY, _PAD_XY)),
            mode="constant",
            constant_values=AIR_HU,
        )
        self._gradients = None

    def _index(self, e) -> tuple[int, int, int]:
        index = e.index if isinstance(e, EdgeVoxel) else e
        return tuple(int(c) for c in index)

    def raw_planes(self, e) -> np.ndarray:
        """Axis-aligned planes in HU, before windowing."""
        x, y, z = self._index(e)
        P = self._padded
        px, py, pz = x + _PAD_XY, y + _PAD_XY, z + _PAD_Z
        lo, hi = -CENTER, PATCH_SIZE - CENTER
        axial = P[pz, py + lo : py + hi, px + lo : px + hi]
        coronal = P[pz + lo : pz + hi, py, px + lo : px + hi]
        sagittal = P[pz + lo : pz + hi, py + lo : py + hi, px]
        return np.stack([axial, coronal, sagittal])

    def rotated_axial(self, e, theta: float) -> np.ndarray:
        """Axial plane in HU on a grid whose columns run along angle ``theta``."""
        x, y, z = self._index(e)
        c, s = math.cos(theta), math.sin(theta)
        cols, rows = np.meshgrid(_OFFSETS.astype(np.float64), _OFFSETS.astype(np.float64))
        xs = x + _PAD_XY + cols * c - rows * s
        ys = y + _PAD_XY + cols * s + rows * c
        return bilinear_sample(self._padded[z + _PAD_Z], xs, ys)

    def gradients(self):
        if self._gradients is None:
            self._gradients = sobel_volume(self.volume)
        return self._gradients

    def orientation(self, e, window_radius: int = DEFAULT_WINDOW_RADIUS, orient_mode: str = "tangent") -> EdgeOrientation:
        x, y, z = self._index(e)
        gx, gy = self.gradients()
        return orientation_at(gx[z], gy[z], (x, y), window_radius, orient_mode)

    def original(self, e, label: Label = Label.NON_FRACTURE) -> Patch25D:
        planes = window_hu(self.raw_planes(e)).astype(np.float32)
        return Patch25D(planes, label, self._index(e), Strategy.ORIGINAL)

    def mirrored(self, e, label: Label = Label.NON_FRACTURE, mirror_axis: str = "lr") -> Patch25D:
        p = self.original(e, label)
        return Patch25D(mirror(p.planes, mirror_axis), label, p.source_index, Strategy.MIRRORED, None, True)

    def oriented(self, e, orient: EdgeOrientation, label: Label = Label.NON_FRACTURE) -> Patch25D:
        raw = self.raw_planes(e)
        theta_used = None
        if orient.anisotropy >= MIN_ANISOTROPY:
            theta_used = float(orient.theta)
            raw = raw.copy()
            raw[0] = self.rotated_axial(e, theta_used)
        planes = window_hu(raw).astype(np.float32)
        return Patch25D(planes, label, self._index(e), Strategy.ORIENTED, theta_used)

    def inference_patch(self, e, strategy: Strategy, window_radius: int = DEFAULT_WINDOW_RADIUS,
                        orient_mode: str = "tangent") -> Patch25D:
        """Patch used at prediction time; never mirrored."""
        if strategy == Strategy.ORIENTED:
            return self.oriented(e, self.orientation(e, window_radius, orient_mode))
        p = self.original(e)
        p.strategy = strategy
        return p


def extract_original(v: Volume, e) -> Patch25D:
    return PatchExtractor(v).original(e)


def extract_mirrored(v: Volume, e, mirror_axis: str = "lr") -> Patch25D:
    return PatchExtractor(v).mirrored(e, mirror_axis=mirror_axis)


def extract_oriented(v: Volume, e, orient: EdgeOrientation) -> Patch25D:
    return PatchExtractor(v).oriented(e, orient)


def label_edge_voxel(e, annotations, v: Volume, radius_mm: float = DEFAULT_RADIUS_MM) -> Label:
    if radius_mm <= 0:
        raise ValueError("radius_mm must be positive")
    index = e.index if isinstance(e, EdgeVoxel) else e
    p = v.world(index)
    for a in annotations:
        if np.linalg.norm(p - np.asarray(a.position)) <= radius_mm:
            return Label.FRACTURE
    return Label.NON_FRACTURE


def label_edges(edges: EdgeMap, annotations, v: Volume, radius_mm: float = DEFAULT_RADIUS_MM) -> np.ndarray:
    """Vectorised :func:`label_edge_voxel` over a whole edge map (bool, True = fracture)."""
    if radius_mm <= 0:
        raise ValueError("radius_mm must be positive")
    out = np.zeros(len(edges), dtype=bool)
    if len(edges) == 0 or not annotations:
        return out
    points = v.world(edges.indices)
    for a in annotations:
        out |= np.linalg.norm(points - np.asarray(a.position), axis=1) <= radius_mm
    return out


@dataclass(eq=False)
class PatchSet:
    patches: list[Patch25D]
    seed: int | None = None
    shortfall: int = 0  # requested positives that could not be supplied
    negative_shortfall: int = 0

    @property
    def positives(self) -> int:
        return sum(1 for p in self.patches if p.label == Label.FRACTURE)

    @property
    def negatives(self) -> int:
        return len(self.patches) - self.positives

    def __len__(self) -> int:
        return len(self.patches)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(N, 3, 64, 64) float32 inputs and (N,) int64 labels."""
        if not self.patches:
            return np.zeros((0, 3, PATCH_SIZE, PATCH_SIZE), np.float32), np.zeros(0, np.int64)
        x = np.stack([p.planes for p in self.patches]).astype(np.float32, copy=False)
        y = np.array([int(p.label) for p in self.patches], dtype=np.int64)
        return x, y


@dataclass
class SamplingSource:
    """One training case: image, its edge map and its annotations."""

    volume: Volume
    edges: EdgeMap
    annotations: list[Annotation] = field(default_factory=list)


def sample_patches(sources, strategy, target_count: int, pos_fraction: float = DEFAULT_POS_FRACTION,
                   seed: int = 0, radius_mm: float = DEFAULT_RADIUS_MM, mirror_axis: str = "lr",
                   orient_mode: str = "tangent", window_radius: int = DEFAULT_WINDOW_RADIUS) -> PatchSet:
    """Draw a labelled patch set from the pooled edge maps of several cases.

    Positives count mirrored copies: for the mirrored and oriented
    strategies ceil(n/2) fracture voxels are drawn and each contributes
    itself plus its mirror image.
    """
    strategy = Strategy.parse(strategy)
    if target_count <= 0:
        raise ValueError("target_count must be positive")
    if not 0 < pos_fraction < 1:
        raise ValueError("pos_fraction must lie in (0, 1)")
    sources = list(sources)
    if sum(len(s.edges) for s in sources) == 0:
        raise EmptyEdgeMapError("no edge voxels to sample from")

    pool_pos, pool_neg = [], []
    for k, s in enumerate(sources):
        fracture = label_edges(s.edges, s.annotations, s.volume, radius_mm)
        pool_pos.extend((k, i) for i in np.flatnonzero(fracture))
        pool_neg.extend((k, i) for i in np.flatnonzero(~fracture))

    want_pos = int(round(target_count * pos_fraction))
    want_neg = target_count - want_pos
    if want_pos > 0 and not pool_pos:
        raise NoPositivesError("no edge voxel lies within the fracture radius of an annotation")

    paired = strategy in (Strategy.MIRRORED, Strategy.ORIENTED)
    rng = np.random.default_rng([int(seed), int(strategy)])
    n_pos_vox = min(math.ceil(want_pos / 2) if paired else want_pos, len(pool_pos))
    pos_pick = sorted(rng.choice(len(pool_pos), size=n_pos_vox, replace=False).tolist())
    n_neg = min(want_neg, len(pool_neg))
    neg_pick = sorted(rng.choice(len(pool_neg), size=n_neg, replace=False).tolist())

    extractors = {}

    def extract(k, i, label):
        if k not in extractors:
            extractors[k] = PatchExtractor(sources[k].volume)
        ex = extractors[k]
        e = sources[k].edges.indices[i]
        if strategy == Strategy.ORIENTED:
            return ex.oriented(e, ex.orientation(e, window_radius, orient_mode), label)
        p = ex.original(e, label)
        p.strategy = strategy
        return p

    patches = []
    for j in pos_pick:
        p = extract(*pool_pos[j], Label.FRACTURE)
        patches.append(p)
        if paired:
            patches.append(mirror_patch(p, mirror_axis))
    n_positive = len(patches)
    for j in neg_pick:
        patches.append(extract(*pool_neg[j], Label.NON_FRACTURE))
    return PatchSet(patches, int(seed), max(0, want_pos - n_positive), want_neg - n_neg)


def build_patchset(v: Volume, edges: EdgeMap, annotations, strategy, target_count: int,
                   pos_fraction: float = DEFAULT_POS_FRACTION, seed: int = 0, **kwargs) -> PatchSet:
    if len(edges) == 0:
        raise EmptyEdgeMapError("edge map is empty")
    return sample_patches([SamplingSource(v, edges, list(annotations))], strategy, target_count,
                          pos_fraction, seed, **kwargs)


# --- binary patch-set file -------------------------------------------------

MAGIC = b"P25D"
VERSION = 1
_RECORD = struct.Struct("<BBf3I")
_PLANE_BYTES = 3 * PATCH_SIZE * PATCH_SIZE * 4
_MIRROR_BIT = 0x80


def patchset_bytes(ps: PatchSet) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(ps.patches))]
    for p in ps.patches:
        theta = math.nan if p.theta_used is None else p.theta_used
        code = int(p.strategy) | (_MIRROR_BIT if p.mirrored else 0)
        chunks.append(_RECORD.pack(int(p.label), code, theta, *p.source_index))
        chunks.append(np.asarray(p.planes, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_patchset(ps: PatchSet, path) -> None:
    try:
        Path(path).write_bytes(patchset_bytes(ps))
    except OSError as exc:
        raise IoError(f"cannot write patch set {path}: {exc}") from exc


def load_patchset(path) -> PatchSet:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise VersionMismatchError(f"{path}: not a patch-set file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    step = _RECORD.size + _PLANE_BYTES
    if len(blob) != 12 + count * step:
        raise IoError(f"{path}: truncated patch-set file")
    patches = []
    offset = 12
    for _ in range(count):
        label, code, theta, x, y, z = _RECORD.unpack_from(blob, offset)
        planes = np.frombuffer(blob, dtype="<f4", count=3 * PATCH_SIZE * PATCH_SIZE,
                               offset=offset + _RECORD.size).reshape(3, PATCH_SIZE, PATCH_SIZE)
        patches.append(Patch25D(planes.astype(np.float32), Label(label), (x, y, z),
                                Strategy(code & ~_MIRROR_BIT), None if math.isnan(theta) else float(theta),
                                bool(code & _MIRROR_BIT)))
        offset += step
    return PatchSet(patches)
