"""Synthetic spine phantoms with implanted posterior-process fractures.

Each vertebra is an elliptical body (cortical shell around cancellous
interior) with three solid bar-shaped processes pointing posteriorly:
left, right and spinous.  A fracture is a slab of soft tissue cut across
one bar.  Geometry lives in millimetres so the same phantom can be
rasterised at any spacing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SpecTooSmallError
from .volume import Annotation, ProcessLabel, Volume

SOFT_TISSUE_HU = 40
CORTICAL_HU = 1200
CANCELLOUS_HU = 300

BODY_RADII_MM = (11.0, 8.0)
SHELL_MM = 1.5
DISC_MM = 6.0
PROCESS_THICKNESS_MM = 8.0
PROCESS_WIDTH_MM = 3.0
MARGIN_MM = 2.0

# base angle on the body ellipse, pointing angle, length range (mm)
_PROCESS_LAYOUT = {
    ProcessLabel.LEFT: (-140.0, -150.0, (12.0, 15.0)),
    ProcessLabel.RIGHT: (-40.0, -30.0, (12.0, 15.0)),
    ProcessLabel.SPINOUS: (-90.0, -90.0, (15.0, 18.0)),
}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (128, 128, 96)
    spacing: tuple[float, float, float] = (0.5, 0.5, 1.0)
    n_vertebrae: int = 4
    fracture_count: int = 3
    gap_width_mm: float = 2.0
    noise_sigma_hu: float = 20.0
    seed: int = 0
    patient_id: str = "phantom"

    def __post_init__(self):
        if self.n_vertebrae < 1:
            raise ValueError("n_vertebrae must be >= 1")
        if not 0 <= self.fracture_count <= 3 * self.n_vertebrae:
            raise ValueError("fracture_count must lie in [0, 3 * n_vertebrae]")
        if self.gap_width_mm <= 0 or self.noise_sigma_hu < 0:
            raise ValueError("gap_width_mm must be > 0 and noise_sigma_hu >= 0")
        if min(self.dims) < 1 or min(self.spacing) <= 0:
            raise ValueError("dims and spacing must be positive")


@dataclass
class Process:
    label: ProcessLabel
    base: np.ndarray  # (x, y) mm
    direction: np.ndarray  # unit (x, y)
    length: float
    width: float
    z_range: tuple[float, float]  # mm, inclusive
    gap_center: float | None = None  # distance along the bar, mm

    def local(self, x, y):
        """Along-bar and across-bar coordinates of world points."""
        dx, dy = x - self.base[0], y - self.base[1]
        u = dx * self.direction[0] + dy * self.direction[1]
        v = -dx * self.direction[1] + dy * self.direction[0]
        return u, v

    def footprint(self, x, y):
        u, v = self.local(x, y)
        return (u >= -1.0) & (u <= self.length) & (np.abs(v) <= self.width / 2)

    def gap(self, x, y, gap_width):
        if self.gap_center is None:
            return np.zeros(np.broadcast(x, y).shape, dtype=bool)
        u, _ = self.local(x, y)
        return np.abs(u - self.gap_center) <= gap_width / 2

    def point_at(self, u: float) -> np.ndarray:
        return self.base + u * self.direction

    @property
    def z_center(self) -> float:
        return 0.5 * (self.z_range[0] + self.z_range[1])


@dataclass
class Vertebra:
    center: np.ndarray  # (x, y) mm
    yaw: float  # radians
    z_range: tuple[float, float]
    processes: list[Process] = field(default_factory=list)


def _layout(spec: PhantomSpec, rng: np.random.Generator) -> list[Vertebra]:
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    width, height, depth = nx * sx, ny * sy, nz * sz
    pitch = depth / spec.n_vertebrae
    if pitch < PROCESS_THICKNESS_MM + 2 * MARGIN_MM:
        raise SpecTooSmallError(f"{pitch:.1f} mm per vertebra is too thin for {PROCESS_THICKNESS_MM} mm processes")

    ax, ay = BODY_RADII_MM
    vertebrae = []
    for k in range(spec.n_vertebrae):
        yaw = math.radians(rng.uniform(-12.0, 12.0))
        center = np.array([width / 2, height / 2 + 8.0]) + rng.uniform(-1.5, 1.5, size=2)
        z_lo, z_hi = k * pitch, (k + 1) * pitch
        body_h = max(pitch - DISC_MM, PROCESS_THICKNESS_MM)
        zc = 0.5 * (z_lo + z_hi)
        # snap the process slab centre onto a slice so annotations sit on voxel centres
        zc_proc = round((zc + rng.uniform(-1.0, 1.0)) / sz) * sz
        half = PROCESS_THICKNESS_MM / 2
        vert = Vertebra(center, yaw, (zc - body_h / 2, zc + body_h / 2))
        c, s = math.cos(yaw), math.sin(yaw)
        for label, (base_deg, dir_deg, (lmin, lmax)) in _PROCESS_LAYOUT.items():
            b = math.radians(base_deg)
            a = math.radians(dir_deg + rng.uniform(-8.0, 8.0))
            base_local = np.array([ax * math.cos(b), ay * math.sin(b)])
            dir_local = np.array([math.cos(a), math.sin(a)])
            rot = np.array([[c, -s], [s, c]])
            direction = rot @ dir_local
            base = center + rot @ base_local - 1.0 * direction
            vert.processes.append(
                Process(label, base, direction, float(rng.uniform(lmin, lmax)) + 1.0,
                        PROCESS_WIDTH_MM, (zc_proc - half, zc_proc + half))
            )
        vertebrae.append(vert)

    lo = np.array([MARGIN_MM, MARGIN_MM])
    hi = np.array([width, height]) - MARGIN_MM
    for vert in vertebrae:
        for p in vert.processes:
            normal = np.array([-p.direction[1], p.direction[0]]) * p.width / 2
            tip = p.point_at(p.length)
            for corner in (tip + normal, tip - normal):
                if np.any(corner < lo) or np.any(corner > hi):
                    raise SpecTooSmallError(f"{p.label.value} process of a vertebra leaves the {width:.0f}x{height:.0f} mm field of view")
    return vertebrae


def _with_fractures(spec: PhantomSpec, rng: np.random.Generator) -> list[Vertebra]:
    vertebrae = _layout(spec, rng)
    processes = [p for v in vertebrae for p in v.processes]
    chosen = rng.choice(len(processes), size=spec.fracture_count, replace=False)
    for i in sorted(chosen.tolist()):
        processes[i].gap_center = float(rng.uniform(0.45, 0.7)) * processes[i].length
    return vertebrae


def layout(spec: PhantomSpec) -> list[Vertebra]:
    """Geometry of a phantom, fractures included, without rasterising it."""
    return _with_fractures(spec, np.random.default_rng(spec.seed))


def generate(spec: PhantomSpec) -> tuple[Volume, Volume, list[Annotation]]:
    """Rasterise a phantom; returns (image int16 HU, mask uint8, annotations)."""
    rng = np.random.default_rng(spec.seed)
    vertebrae = _with_fractures(spec, rng)
    annotations = []
    for p in (p for v in vertebrae for p in v.processes if p.gap_center is not None):
        x, y = p.point_at(p.gap_center)
        annotations.append(Annotation(spec.patient_id, (float(x), float(y), p.z_center), p.label))

    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    xs = np.arange(nx) * sx
    ys = np.arange(ny) * sy
    X, Y = np.meshgrid(xs, ys)  # [y, x]
    image = np.full((nz, ny, nx), SOFT_TISSUE_HU, dtype=np.float64)
    mask = np.zeros((nz, ny, nx), dtype=np.uint8)
    ax, ay = BODY_RADII_MM

    for vert in vertebrae:
        c, s = math.cos(vert.yaw), math.sin(vert.yaw)
        dx, dy = X - vert.center[0], Y - vert.center[1]
        u, v = c * dx + s * dy, -s * dx + c * dy
        outer = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        inner = (u / (ax - SHELL_MM)) ** 2 + (v / (ay - SHELL_MM)) ** 2 <= 1.0
        foot = [p.footprint(X, Y) for p in vert.processes]
        gaps = [p.gap(X, Y, spec.gap_width_mm) for p in vert.processes]
        for z in range(nz):
            zmm = z * sz
            plane = image[z]
            z0, z1 = vert.z_range
            if z0 <= zmm <= z1:
                in_cap = zmm - z0 < 1.0 or z1 - zmm < 1.0
                plane[outer] = CORTICAL_HU
                if not in_cap:
                    plane[inner] = CANCELLOUS_HU
            for p, f, g in zip(vert.processes, foot, gaps):
                if p.z_range[0] <= zmm <= p.z_range[1]:
                    plane[f] = CORTICAL_HU
                    plane[f & g] = SOFT_TISSUE_HU
                    mask[z][f] = 1

    if spec.noise_sigma_hu > 0:
        image += rng.normal(0.0, spec.noise_sigma_hu, size=image.shape)
    image = np.clip(np.rint(image), -32768, 32767).astype(np.int16)
    return Volume(image, spec.spacing), Volume(mask, spec.spacing), annotations

