"""Local edge orientation from the 2x2 gradient structure tensor."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutOfBoundsError, ShapeMismatchError

DEFAULT_WINDOW_RADIUS = 3
MIN_ANISOTROPY = 0.05
ORIENT_MODES = ("tangent", "gradient")


@dataclass(frozen=True)
class EdgeOrientation:
    """Edge angle in radians, folded into (-pi/2, pi/2].

    ``eigenvector`` is the unit eigenvector of the larger eigenvalue,
    i.e. the dominant gradient direction.  In tangent mode ``theta`` is
    perpendicular to it.
    """

    theta: float
    anisotropy: float
    eigenvector: tuple[float, float]
    eigenvalues: tuple[float, float] = (0.0, 0.0)

    @property
    def degenerate(self) -> bool:
        return self.anisotropy < MIN_ANISOTROPY


def fold_angle(theta: float) -> float:
    """Map an undirected line angle into (-pi/2, pi/2]."""
    t = math.fmod(theta + math.pi / 2, math.pi)
    if t <= 0:
        t += math.pi
    return t - math.pi / 2


def structure_tensor(gx, gy, center, window_radius: int = DEFAULT_WINDOW_RADIUS) -> np.ndarray:
    """Sum of gradient outer products over a square window clamped to the image.

    ``gx``/``gy`` are indexed [row=y, col=x]; ``center`` is (x, y).
    """
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape or gx.ndim != 2:
        raise ShapeMismatchError(f"gradient arrays must be equal 2D shapes, got {gx.shape} and {gy.shape}")
    if window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    cx, cy = (int(c) for c in center)
    rows, cols = gx.shape
    if not (0 <= cx < cols and 0 <= cy < rows):
        raise OutOfBoundsError(f"center {center} outside a {cols}x{rows} slice")
    ys = slice(max(cy - window_radius, 0), min(cy + window_radius + 1, rows))
    xs = slice(max(cx - window_radius, 0), min(cx + window_radius + 1, cols))
    wx, wy = gx[ys, xs], gy[ys, xs]
    sxy = float(np.sum(wx * wy))
    return np.array([[float(np.sum(wx * wx)), sxy], [sxy, float(np.sum(wy * wy))]])


def symmetric_eigen(t) -> tuple[float, float, tuple[float, float]]:
    """Closed-form eigen-decomposition of a symmetric 2x2 matrix.

    Returns (lambda1, lambda2, v) with lambda1 >= lambda2 and v the unit
    eigenvector of lambda1.  Ties resolve to v = (1, 0).
    """
    a, b, c = float(t[0][0]), 0.5 * (float(t[0][1]) + float(t[1][0])), float(t[1][1])
    mean = 0.5 * (a + c)
    radius = math.hypot(0.5 * (a - c), b)
    phi = 0.5 * math.atan2(2.0 * b, a - c)
    return mean + radius, mean - radius, (math.cos(phi), math.sin(phi))


def principal_orientation(t, orient_mode: str = "tangent") -> EdgeOrientation:
    if orient_mode not in ORIENT_MODES:
        raise ValueError(f"orient_mode must be one of {ORIENT_MODES}, got {orient_mode!r}")
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (2, 2):
        raise ShapeMismatchError(f"expected a 2x2 matrix, got {t.shape}")
    lam1, lam2, (v0, v1) = symmetric_eigen(t)
    if lam1 <= 0:
        anisotropy = 0.0
    else:
        anisotropy = min(max(1.0 - lam2 / lam1, 0.0), 1.0)
    if anisotropy < MIN_ANISOTROPY:
        theta = 0.0
    else:
        angle = math.atan2(v1, v0)
        if orient_mode == "tangent":
            angle += math.pi / 2
        theta = fold_angle(angle)
    return EdgeOrientation(theta, anisotropy, (v0, v1), (lam1, lam2))


def orientation_at(gx_slice, gy_slice, center, window_radius: int = DEFAULT_WINDOW_RADIUS,
                   orient_mode: str = "tangent") -> EdgeOrientation:
    return principal_orientation(structure_tensor(gx_slice, gy_slice, center, window_radius), orient_mode)
