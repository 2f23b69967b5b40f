import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinecade.errors import OutOfBoundsError
from spinecade.orientation import fold_angle, principal_orientation, structure_tensor, symmetric_eigen


def test_vertical_step_tensor():
    gx = np.zeros((9, 9))
    gy = np.zeros((9, 9))
    gx[:, 4] = 4000.0
    t = structure_tensor(gx, gy, (4, 4), 3)
    assert t[0, 0] > 0 and t[0, 1] == 0 and t[1, 1] == 0


def test_zero_window():
    assert not structure_tensor(np.zeros((5, 5)), np.zeros((5, 5)), (2, 2), 1).any()


def test_tensor_matches_double_loop():
    rng = np.random.default_rng(0)
    gx, gy = rng.normal(size=(2, 12, 15))
    for center in [(0, 0), (7, 5), (14, 11), (3, 10)]:
        t = structure_tensor(gx, gy, center, 3)
        ref = np.zeros((2, 2))
        cx, cy = center
        for y in range(cy - 3, cy + 4):
            for x in range(cx - 3, cx + 4):
                if 0 <= x < 15 and 0 <= y < 12:
                    g = np.array([gx[y, x], gy[y, x]])
                    ref += np.outer(g, g)
        assert np.allclose(t, ref, rtol=1e-12, atol=1e-12)


def test_center_outside_image():
    with pytest.raises(OutOfBoundsError):
        structure_tensor(np.zeros((5, 5)), np.zeros((5, 5)), (5, 0), 1)


def test_axis_aligned_and_isotropic():
    o = principal_orientation([[1.0, 0.0], [0.0, 0.0]])
    assert o.theta == pytest.approx(math.pi / 2)
    assert o.anisotropy == 1.0
    assert principal_orientation([[1.0, 0.0], [0.0, 0.0]], "gradient").theta == 0.0
    iso = principal_orientation(np.eye(2))
    assert iso.anisotropy == 0.0 and iso.theta == 0.0
    zero = principal_orientation(np.zeros((2, 2)))
    assert zero.anisotropy == 0.0 and zero.theta == 0.0


def test_random_eigenpairs_match_quadratic_formula():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = rng.normal(size=(2, 2))
        t = a @ a.T
        lam1, lam2, v = symmetric_eigen(t)
        tr, det = np.trace(t), np.linalg.det(t)
        disc = math.sqrt(max(tr * tr / 4 - det, 0.0))
        assert lam1 == pytest.approx(tr / 2 + disc, abs=1e-9)
        assert lam2 == pytest.approx(tr / 2 - disc, abs=1e-9)
        assert np.linalg.norm(t @ np.array(v) - lam1 * np.array(v)) < 1e-9
        o = principal_orientation(t)
        assert abs(np.hypot(*o.eigenvector) - 1) < 1e-9
        assert lam1 >= lam2 >= -1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50))
def test_fold_range(theta):
    f = fold_angle(theta)
    assert -math.pi / 2 < f <= math.pi / 2
    assert math.isclose(math.sin(2 * (f - theta)), 0.0, abs_tol=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), phi=st.floats(-math.pi, math.pi), c=st.floats(1e-3, 1e3))
def test_scale_invariance_and_gradient_mode(seed, phi, c):
    rng = np.random.default_rng(seed)
    gx, gy = rng.normal(size=(2, 7, 7))
    t = structure_tensor(gx, gy, (3, 3), 3)
    o, oc = principal_orientation(t), principal_orientation(c * t)
    assert o.theta == pytest.approx(oc.theta, abs=1e-9)
    assert o.anisotropy == pytest.approx(oc.anisotropy, abs=1e-9)
    if not o.degenerate:
        g = principal_orientation(t, "gradient")
        expected = fold_angle(math.atan2(o.eigenvector[1], o.eigenvector[0]))
        assert g.theta == pytest.approx(expected, abs=1e-12)


def test_eigenvalues_ordered_for_built_tensors():
    rng = np.random.default_rng(3)
    for _ in range(100):
        gx, gy = rng.normal(size=(2, 9, 9)) * rng.uniform(0.1, 100)
        lam1, lam2, _ = symmetric_eigen(structure_tensor(gx, gy, tuple(rng.integers(0, 9, 2)), 2))
        assert lam1 >= lam2 >= -1e-9 * max(lam1, 1)
