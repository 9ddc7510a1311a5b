"""Curvature of coordinate metrics against classical closed forms.

Oracles
-------
* round 2-sphere (stereographic) and hyperbolic plane: Ric = K h
* Schwarzschild: Ric = 0 and Kretschmann scalar 48 M^2 / r^6
* static de Sitter patch: Ric = (3 / L^2) g
* algebraic symmetries of the Riemann tensor (antisymmetry, first Bianchi)
* flat Laplacian and divergence in polar coordinates
"""

import numpy as np
import pytest

from walkerlab import geometry as geo
from walkerlab.geometry import MetricField, SingularMetricError


def _sphere(K):
    f = f"4/({K!r}*(1+u^2+v^2)^2)" if K > 0 else f"4/({-K!r}*(1-u^2-v^2)^2)"
    return MetricField.from_exprs(["u", "v"], [[f, "0"], [None, f]])


SCHWARZSCHILD = MetricField.from_exprs(
    ["t", "r", "th", "ph"],
    [
        ["-(1-2*M/r)", "0", "0", "0"],
        [None, "1/(1-2*M/r)", "0", "0"],
        [None, None, "r^2", "0"],
        [None, None, None, "r^2*sin(th)^2"],
    ],
    params={"M": 1.0},
)

DE_SITTER = MetricField.from_exprs(
    ["t", "r", "th", "ph"],
    [
        ["-(1-r^2/L^2)", "0", "0", "0"],
        [None, "1/(1-r^2/L^2)", "0", "0"],
        [None, None, "r^2", "0"],
        [None, None, None, "r^2*sin(th)^2"],
    ],
    params={"L": 3.0},
)


def _schwarzschild_points(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack(
        [rng.uniform(-1, 1, n), rng.uniform(3.0, 8.0, n), rng.uniform(0.4, 2.7, n), rng.uniform(0, 6, n)]
    )


# ---------------------------------------------------------------------------
# Constant curvature surfaces
# ---------------------------------------------------------------------------


class TestSurfaces:
    @pytest.mark.parametrize("K", [1.0, -1.0, 2.0, -2.0])
    def test_ricci_is_K_h(self, K):
        m = _sphere(K)
        rng = np.random.default_rng(1)
        pts = rng.uniform(-0.6, 0.6, (50, 2))
        fd = geo.frame_data(m, pts)
        ric = geo.ricci(m, pts)
        np.testing.assert_allclose(ric, K * fd.g, atol=1e-10)

    def test_scalar_curvature(self):
        pts = np.array([[0.1, 0.2], [-0.3, 0.4]])
        np.testing.assert_allclose(geo.scalar_curvature(_sphere(1.0), pts), 2.0, atol=1e-11)


# ---------------------------------------------------------------------------
# Four-dimensional vacua
# ---------------------------------------------------------------------------


class TestSchwarzschild:
    def test_ricci_flat(self):
        pts = _schwarzschild_points()
        np.testing.assert_allclose(geo.ricci(SCHWARZSCHILD, pts), 0.0, atol=1e-12)

    def test_kretschmann(self):
        pts = _schwarzschild_points()
        fd = geo.frame_data(SCHWARZSCHILD, pts)
        R = geo.riemann_from_frame(fd)
        low = np.einsum("...ae,...ebcd->...abcd", fd.g, R)
        up = np.einsum("...ae,...bf,...cg,...dh,...efgh->...abcd", fd.g_inv, fd.g_inv, fd.g_inv, fd.g_inv, low)
        K = np.einsum("...abcd,...abcd->...", low, up)
        np.testing.assert_allclose(K, 48.0 / pts[:, 1] ** 6, rtol=1e-10)

    def test_riemann_symmetries(self):
        pts = _schwarzschild_points(5)
        fd = geo.frame_data(SCHWARZSCHILD, pts)
        low = np.einsum("...ae,...ebcd->...abcd", fd.g, geo.riemann_from_frame(fd))
        np.testing.assert_allclose(low, -np.swapaxes(low, -1, -2), atol=1e-12)
        np.testing.assert_allclose(low, -np.swapaxes(low, -3, -4), atol=1e-12)
        bianchi = low + np.einsum("...abcd->...acdb", low) + np.einsum("...abcd->...adbc", low)
        np.testing.assert_allclose(bianchi, 0.0, atol=1e-12)


class TestDeSitter:
    def test_einstein_constant(self):
        rng = np.random.default_rng(3)
        pts = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(0.3, 2.5, 20), rng.uniform(0.4, 2.7, 20),
                               rng.uniform(0, 6, 20)])
        fd = geo.frame_data(DE_SITTER, pts)
        np.testing.assert_allclose(geo.ricci(DE_SITTER, pts), 3.0 / 9.0 * fd.g, atol=1e-12)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


POLAR = MetricField.from_exprs(["r", "t"], [["1", "0"], [None, "r^2"]])


class TestOperators:
    def test_christoffel_polar(self):
        pts = np.array([[2.0, 0.3]])
        G = geo.christoffel(geo.frame_data(POLAR, pts))
        assert G[0, 0, 1, 1] == pytest.approx(-2.0)
        assert G[0, 1, 0, 1] == pytest.approx(0.5)
        assert G[0, 1, 1, 0] == pytest.approx(0.5)

    def test_laplacian_of_r_squared(self):
        pts = np.array([[0.5, 0.1], [1.7, 2.0]])
        np.testing.assert_allclose(geo.laplace_beltrami(POLAR, "r^2", pts), 4.0, atol=1e-12)

    def test_laplacian_of_harmonic(self):
        pts = np.array([[0.5, 0.1], [1.7, 2.0]])
        np.testing.assert_allclose(geo.laplace_beltrami(POLAR, "r^2*cos(2*t)", pts), 0.0, atol=1e-12)

    def test_divergence_of_gradient_equals_laplacian(self):
        pts = np.array([[0.8, 0.4], [1.2, -1.0]])
        f = "r^3*sin(t)"
        grad = ["3*r^2*sin(t)", "r^3*cos(t)"]
        np.testing.assert_allclose(
            geo.divergence(POLAR, grad, pts), geo.laplace_beltrami(POLAR, f, pts), rtol=1e-12
        )

    def test_exterior_derivative(self):
        pts = np.array([[0.3, 0.7]])
        F = geo.d_one_form(["-t", "r"], pts, ["r", "t"])
        np.testing.assert_allclose(F[0], [[0.0, 2.0], [-2.0, 0.0]])  # F_rt = d_r A_t - d_t A_r

    def test_singular_metric_rejected(self):
        m = MetricField.from_exprs(["u", "v"], [["1", "1"], [None, "1"]])
        with pytest.raises(SingularMetricError):
            geo.frame_data(m, np.array([[0.0, 0.0]]))
