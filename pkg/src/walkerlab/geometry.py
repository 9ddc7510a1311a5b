"""Coordinate tensor calculus driven by jets.

Everything here is batched over sample points: a point set is an array of
shape ``(P, N)`` and every returned tensor carries the leading axis ``P``.

Curvature convention.  With Ricci obtained by the contraction
``Ric_ab = R^c_{abc}``, we use

    R^a_{bcd} = d_d Gamma^a_{cb} - d_c Gamma^a_{db}
                + Gamma^a_{de} Gamma^e_{cb} - Gamma^a_{ce} Gamma^e_{db},

which makes the hyperbolic plane with ``Lambda < 0`` satisfy ``Ric = Lambda h``
(the constant-curvature convention lock in the test-suite).  In endomorphism
language ``R(X, Y) Z`` has components ``R^a_{bcd} Z^b X^c Y^d`` and
``Ric(X, Y) = tr(Z -> R(X, Z) Y)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import exprlang
from .jets import Jet, seeds

COND_LIMIT = 1e12


class SingularMetricError(ArithmeticError):
    """The metric matrix is singular or too ill-conditioned at a point."""


class MetricField:
    """Symmetric ``N x N`` metric given by a component evaluator.

    ``evaluator(points, order)`` returns a :class:`Jet` of value shape
    ``(P, N, N)`` with all ``N`` coordinates active.
    """

    def __init__(self, dim, evaluator, names=None):
        self.dim = dim
        self._evaluator = evaluator
        self.names = list(names) if names is not None else [f"x{i}" for i in range(dim)]

    @classmethod
    def from_exprs(cls, names, components, params=None):
        """Build from an ``N x N`` array of expressions (upper triangle is used)."""
        names = list(names)
        n = len(names)
        comps = [[None] * n for _ in range(n)]
        for a in range(n):
            for b in range(a, n):
                src = components[a][b]
                if src is None:
                    src = components[b][a]
                comps[a][b] = comps[b][a] = exprlang.as_expr(src)
        params = dict(params or {})

        def evaluator(points, order=2):
            points = np.asarray(points, dtype=float)
            env = dict(params)
            env.update(zip(names, seeds(points, order)))
            ref = env[names[0]]
            out = Jet.constant(np.zeros(points.shape[:-1] + (n, n)), ref.dim, order)
            for a in range(n):
                for b in range(a, n):
                    val = comps[a][b].evaluate(env)
                    out[..., a, b] = val
                    if a != b:
                        out[..., b, a] = val
            return out

        field = cls(n, evaluator, names)
        field.components = comps
        return field

    def jet(self, points, order=2):
        return self._evaluator(np.asarray(points, dtype=float), order)


@dataclass
class PointFrameData:
    """Metric values and derivatives at a batch of points.

    ``dg[..., a, b, c] = d_c g_ab`` and ``d2g[..., a, b, c, d] = d_c d_d g_ab``.
    """

    point: np.ndarray
    g: np.ndarray
    g_inv: np.ndarray
    dg: np.ndarray
    d2g: np.ndarray


def checked_inverse(g):
    """Batched inverse with a condition-number guard."""
    g = np.asarray(g, dtype=float)
    cond = np.linalg.cond(g)
    bad = ~np.isfinite(cond) | (cond > COND_LIMIT)
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise SingularMetricError(
            f"metric is singular or ill-conditioned (cond {np.atleast_1d(cond)[idx]:.3g}) at sample {idx}"
        )
    return np.linalg.inv(g)


def frame_from_jet(points, gjet):
    """Assemble :class:`PointFrameData` from a metric jet of order >= 2."""
    g = gjet.value
    return PointFrameData(
        point=np.asarray(points, dtype=float),
        g=g,
        g_inv=checked_inverse(g),
        dg=gjet.grad,
        d2g=gjet.hess,
    )


def frame_data(metric, points):
    """Frame data of ``metric`` at ``points`` (shape ``(P, N)`` or ``(N,)``)."""
    return frame_from_jet(points, metric.jet(points, order=2))


def christoffel(fd):
    """``Gamma^a_bc = 1/2 g^{ad} (d_b g_dc + d_c g_bd - d_d g_bc)``."""
    return np.einsum("...ad,...dbc->...abc", fd.g_inv, christoffel_lowered(fd))


def christoffel_lowered(fd):
    """``Gamma_{d,bc} = 1/2 (d_b g_dc + d_c g_bd - d_d g_bc)`` indexed ``[d, b, c]``."""
    dg = fd.dg
    # dg[x, y, z] = d_z g_xy
    t1 = np.einsum("...dcb->...dbc", dg)  # d_b g_dc
    t2 = np.einsum("...bdc->...dbc", dg)  # d_c g_bd
    t3 = np.einsum("...bcd->...dbc", dg)  # d_d g_bc
    return 0.5 * (t1 + t2 - t3)


def christoffel_derivative(fd):
    """``dGamma[..., a, b, c, d] = d_d Gamma^a_bc`` from analytic second derivatives."""
    low = christoffel_lowered(fd)
    d2 = fd.d2g  # d2[x, y, z, w] = d_z d_w g_xy
    dlow = 0.5 * (
        np.einsum("...ecbd->...ebcd", d2)  # d_b d_d g_ec
        + np.einsum("...becd->...ebcd", d2)  # d_c d_d g_be
        - np.einsum("...bced->...ebcd", d2)  # d_e d_d g_bc
    )
    dginv = -np.einsum("...af,...fhd,...he->...aed", fd.g_inv, fd.dg, fd.g_inv)
    return np.einsum("...aed,...ebc->...abcd", dginv, low) + np.einsum("...ae,...ebcd->...abcd", fd.g_inv, dlow)


def riemann_from_frame(fd):
    gam = christoffel(fd)
    dgam = christoffel_derivative(fd)
    r = np.einsum("...acbd->...abcd", dgam) - np.einsum("...adbc->...abcd", dgam)
    r = r + np.einsum("...ade,...ecb->...abcd", gam, gam) - np.einsum("...ace,...edb->...abcd", gam, gam)
    return r


def ricci_from_riemann(riem):
    """``Ric_ab = R^c_{abc}``."""
    return np.einsum("...cabc->...ab", riem)


def riemann(metric, points):
    """``R^a_{bcd}`` at ``points``."""
    return riemann_from_frame(frame_data(metric, points))


def ricci(metric, points):
    return ricci_from_riemann(riemann(metric, points))


def scalar_curvature(metric, points):
    fd = frame_data(metric, points)
    return np.einsum("...ab,...ab->...", fd.g_inv, ricci_from_riemann(riemann_from_frame(fd)))


def laplacian_arrays(g_inv, gamma, grad, hess):
    """``h^{ij} (d_i d_j f - Gamma^k_ij d_k f)`` from plain arrays."""
    return np.einsum("...ij,...ij->...", g_inv, hess - np.einsum("...kij,...k->...ij", gamma, grad))


def divergence_arrays(g_inv, gamma, omega, domega):
    """``h^{ij} (d_i w_j - Gamma^k_ij w_k)``; ``domega[..., j, i] = d_i w_j``."""
    cov = np.swapaxes(domega, -1, -2) - np.einsum("...kij,...k->...ij", gamma, omega)
    return np.einsum("...ij,...ij->...", g_inv, cov)


def _field_jet(metric, field, points):
    if callable(field) and not isinstance(field, exprlang.Expr):
        return field(points)
    env = dict(zip(metric.names, seeds(points, 2)))
    val = exprlang.as_expr(field).evaluate(env)
    if not isinstance(val, Jet):
        val = Jet.constant(np.broadcast_to(val, np.asarray(points).shape[:-1]), metric.dim, 2)
    return val


def laplace_beltrami(metric, field, points):
    """Laplace-Beltrami operator of ``metric`` applied to a scalar field."""
    fd = frame_data(metric, points)
    f = _field_jet(metric, field, points)
    return laplacian_arrays(fd.g_inv, christoffel(fd), f.grad, f.hess)


def divergence(metric, one_form, points):
    """Divergence ``nabla^i w_i`` of a one-form given componentwise."""
    fd = frame_data(metric, points)
    comps = [_field_jet(metric, w, points) for w in one_form]
    omega = np.stack([c.value for c in comps], axis=-1)
    domega = np.stack([c.grad for c in comps], axis=-2)
    return divergence_arrays(fd.g_inv, christoffel(fd), omega, domega)


def d_one_form(one_form, points, names):
    """``F_ij = d_i A_j - d_j A_i`` for a one-form given componentwise."""
    env = dict(zip(names, seeds(points, 1)))
    grads = []
    for w in one_form:
        val = exprlang.as_expr(w).evaluate(env) if not callable(w) or isinstance(w, exprlang.Expr) else w(points)
        if isinstance(val, Jet):
            grads.append(val.grad)
        else:
            grads.append(np.zeros(np.asarray(points).shape[:-1] + (len(names),)))
    dA = np.stack(grads, axis=-2)  # dA[..., j, i] = d_i A_j
    return np.swapaxes(dA, -1, -2) - dA
