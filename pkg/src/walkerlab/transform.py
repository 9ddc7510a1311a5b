"""Coordinate changes preserving the Walker form.

Every change of coordinates with ``d~_+ = d_+`` has the shape

    x~+ = xp + phi(x, xm),   x~i = psi^i(x, xm),   x~- = xm + c.

This module provides

* :func:`gauge_transform` for explicit ``phi, psi, c`` (inverse-block formulas),
* :func:`plus_shift`, the ``xp``-shift acting on ``A`` and ``H``,
* characteristic flows (:func:`kill_A_flow`, :func:`theorem1_flow`,
  :func:`main_theorem_flow`) which realize ``psi`` through its inverse,
  the trajectories ``dx/dxm = W(x, xm)`` with ``W = h^{-1}(grad phi - A)``,
* :func:`theorem2_phi`, a grid solver for the ``phi`` that removes ``H0``.

Flows are integrated with fixed-step RK4 on jets: seeding the initial data
with jet variables propagates the Jacobian (and higher derivatives) of the
flow exactly as the variational equations would, so transformed metrics can
be assembled with their second derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import exprlang as el
from . import jets
from .geometry import checked_inverse
from .jets import Jet, seeds
from .walker import (
    Box,
    ProfileError,
    WalkerData,
    WalkerFormError,
    WalkerMetric,
    _check_profile,
    walker_matrix,
)


class FlowEscapeError(RuntimeError):
    """A characteristic left the declared flow box."""


class JacobianError(ArithmeticError):
    """The Jacobian of a coordinate map is singular or changes sign."""


class LambdaZeroError(ValueError):
    """An operation that divides by Lambda was requested with Lambda = 0."""


class GridTooCoarseError(RuntimeError):
    """The Richardson error estimate of a grid solution exceeds the request."""


class BlowUpError(RuntimeError):
    """The marched solution exceeded its bound: the local solution left the domain."""


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------

class ExprField:
    """``W = h^{-1} (grad phi - A)`` for an expression-based Walker metric.

    Called with a jet ``X`` of full coordinates (value shape ``(P, N)``),
    returns ``W`` as a jet in the variables of ``X``.
    """

    def __init__(self, w, phi=None):
        if not isinstance(w, WalkerMetric):
            raise TypeError("characteristic flows need an expression-based WalkerMetric")
        self.w = w
        self.phi = None if phi is None else el.simplify(el.as_expr(phi))
        if self.phi is not None and "xp" in self.phi.free_vars:
            raise WalkerFormError("phi must not depend on xp")
        self.dphi = None if self.phi is None else [el.simplify(el.diff(self.phi, c)) for c in w.coords]
        grad_zero = self.dphi is None or all(el.is_zero(d) for d in self.dphi)
        self.trivial = w.A_is_zero and grad_zero

    def __call__(self, X):
        w = self.w
        n = w.n
        env = dict(w.params)
        if not isinstance(X, Jet):
            env.update({name: X[..., i] for i, name in enumerate(w.variables)})
            shape = X.shape[:-1]
            ev = lambda e: np.broadcast_to(np.asarray(e.evaluate(env), dtype=float), shape)
            h = np.empty(shape + (n, n))
            for i in range(n):
                for j in range(i, n):
                    h[..., i, j] = h[..., j, i] = ev(w.h[i][j])
            rhs = np.stack([-ev(a) for a in w.A], axis=-1)
            if self.dphi is not None:
                rhs = rhs + np.stack([ev(d) for d in self.dphi], axis=-1)
            return np.linalg.solve(h, rhs[..., None])[..., 0]
        env.update({name: X[..., i] for i, name in enumerate(w.variables)})
        shape, dim, order = X.shape[:-1], X.dim, X.order
        h = Jet.constant(np.zeros(shape + (n, n)), dim, order)
        for i in range(n):
            for j in range(i, n):
                val = w._eval(w.h[i][j], env, shape, dim, order)
                h[..., i, j] = val
                if i != j:
                    h[..., j, i] = val
        rhs = Jet.constant(np.zeros(shape + (n,)), dim, order)
        for i in range(n):
            comp = -w._eval(w.A[i], env, shape, dim, order)
            if self.dphi is not None:
                comp = comp + w._eval(self.dphi[i], env, shape, dim, order)
            rhs[..., i] = comp
        return jets.solve(h, rhs)


# ---------------------------------------------------------------------------
# Fixed-step RK4 on jets
# ---------------------------------------------------------------------------

@dataclass
class IntegratorSettings:
    step: float = 1e-3
    method_order: int = 4
    agree_tol: float = 1e-9
    max_halvings: int = 6
    calibration_points: int = 16
    calibrated: bool = False
    agreement: float = float("nan")

    def to_json(self):
        return {
            "step": self.step,
            "method_order": self.method_order,
            "agree_tol": self.agree_tol,
            "calibrated": self.calibrated,
            "agreement": None if not np.isfinite(self.agreement) else float(self.agreement),
        }


def _val(x):
    return x.value if isinstance(x, Jet) else np.asarray(x)


def _stack_point(xp, Y, t):
    if not isinstance(Y, Jet):
        return np.concatenate([np.asarray(xp)[..., None], Y, np.asarray(t)[..., None]], axis=-1)
    n = Y.shape[-1]
    return jets.stack([xp] + [Y[..., i] for i in range(n)] + [t], axis=-1)


def integrate_flow(field, xp, Y0, t_start, t_end, step, escape_box=None, check_det=True):
    """Integrate ``dY/dt = W(xp, Y, t)`` from ``t_start`` to ``t_end`` per point.

    Either every argument except ``field`` and ``step`` is a plain array, or
    all are jets in the same variables (the first ``n`` of which are the
    initial spatial coordinates).  Time is rescaled to ``s in [0, 1]`` so
    that every point uses the same number of steps while the physical step
    stays at most ``step``.
    """
    tau = t_end - t_start
    tv = _val(tau)
    span = float(np.max(np.abs(tv))) if tv.size else 0.0
    m = max(1, int(ceil(span / step - 1e-12)))
    ds = 1.0 / m
    taun = tau.reshape(*tau.shape, 1) if isinstance(tau, Jet) else tau[..., None]
    n = Y0.shape[-1]

    def rhs(Y, s):
        return field(_stack_point(xp, Y, t_start + tau * s)) * taun

    Y = Y0
    if span == 0.0:
        return Y, 0
    for k in range(m):
        s = k * ds
        k1 = rhs(Y, s)
        k2 = rhs(Y + k1 * (0.5 * ds), s + 0.5 * ds)
        k3 = rhs(Y + k2 * (0.5 * ds), s + 0.5 * ds)
        k4 = rhs(Y + k3 * ds, s + ds)
        Y = Y + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (ds / 6.0)
        yv = _val(Y)
        if escape_box is not None:
            t_now = _val(t_start + tau * (s + ds))
            pts = np.concatenate([_val(xp)[..., None], yv, t_now[..., None]], axis=-1)
            inside = escape_box.contains(pts, slack=1e-12) & np.all(np.isfinite(yv), axis=-1)
            if not np.all(inside):
                i = int(np.flatnonzero(~inside)[0])
                raise FlowEscapeError(
                    f"characteristic from sample {i} left the flow box at x- = {t_now[i]:.6g} "
                    f"(position {np.round(yv[i], 6).tolist()})"
                )
        if check_det and isinstance(Y, Jet) and Y.order >= 1:
            det = np.linalg.det(Y.grad[..., :n])
            if np.any(det <= 0):
                i = int(np.flatnonzero(det <= 0)[0])
                raise JacobianError(f"flow Jacobian determinant reached {det[i]:.3g} at sample {i}")
    return Y, m


# ---------------------------------------------------------------------------
# Coordinate maps
# ---------------------------------------------------------------------------

class CoordinateMap:
    """Flow map realized through its inverse ``x(x~)``.

    ``inverse`` takes new coordinates ``x~`` to old ``x``:
    ``x = Y(x~)`` with ``Y`` the characteristic through ``x~`` at the base
    slice, ``xm = x~-`` and ``xp = x~+ - phi(x)``.  ``forward`` is the map
    ``x -> x~``, obtained by integrating the same characteristic back to the
    base slice.  ``jacobian`` returns ``dx/dx~``; at the base slice its
    spatial block is the identity.
    """

    kind = "flow"

    def __init__(self, field, n, base_slice=0.0, settings=None, flow_box=None, phi=None, params=None,
                 calibration_box=None):
        self.field = field
        self.n = n
        self.N = n + 2
        self.base_slice = float(base_slice)
        self.settings = settings or IntegratorSettings()
        self.flow_box = flow_box
        self.phi = phi
        self.params = dict(params or {})
        self.calibration_box = calibration_box
        self._cache = {}
        self.trivial = bool(getattr(field, "trivial", False))

    # -- integration ----------------------------------------------------
    def calibrate(self, points=None):
        """Choose the production step from the refinement sequence ``2h, h, h/2, ...``.

        Starting from the configured step ``h``, the flow at ``h`` is compared
        with the flow at ``2h``; while they differ by more than ``agree_tol``
        the step is halved.  The finer step of the first agreeing pair is kept.
        """
        st = self.settings
        if st.calibrated or self.trivial:
            st.calibrated = True
            return st
        if points is None:
            if self.calibration_box is None:
                st.calibrated = True
                return st
            points = self.calibration_box.sample(st.calibration_points, seed=12345)
        points = np.asarray(points, dtype=float)
        coarse = self._integrate_values(points, 2 * st.step)
        for _ in range(st.max_halvings + 1):
            fine = self._integrate_values(points, st.step)
            diff = float(np.max(np.abs(fine - coarse)))
            st.agreement = diff
            if diff <= st.agree_tol:
                break
            st.step /= 2
            coarse = fine
        st.calibrated = True
        return st

    def _integrate_values(self, points, step):
        points = np.asarray(points, dtype=float)
        t0 = np.full(points.shape[:-1], self.base_slice)
        Y, _ = integrate_flow(self.field, points[..., 0], points[..., 1:self.n + 1], t0, points[..., -1], step,
                              self.flow_box, check_det=False)
        return Y

    def _spatial_jet(self, points, order):
        """Flow jet in all ``N`` variables (no dependence on ``x~+``)."""
        points = np.asarray(points, dtype=float)
        key = (points[..., 1:].tobytes(), points.shape, order)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        n, N = self.n, self.N
        if order == 0:
            if self.trivial:
                Yv = points[..., 1:n + 1]
            else:
                self.calibrate()
                Yv = self._integrate_values(points, self.settings.step)
            Y = Jet.constant(Yv, N, 0)
        else:
            Z = seeds(points, order, active=list(range(1, N)))
            Y0 = jets.stack(Z[1:n + 1], axis=-1)
            if self.trivial:
                Ys = Y0
            else:
                self.calibrate()
                t0 = Jet.constant(np.full(points.shape[:-1], self.base_slice), N - 1, order)
                Ys, _ = integrate_flow(self.field, Z[0], Y0, t0, Z[-1], self.settings.step, self.flow_box,
                                       check_det=True)
            Y = jets.embed(Ys, N, list(range(1, N)))
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = Y
        return Y

    # -- public evaluators ----------------------------------------------
    def inverse_jet(self, points, order=1):
        """Jet of ``x(x~)`` at ``points`` (value shape ``(P, N)``) in the new variables."""
        points = np.asarray(points, dtype=float)
        X = seeds(points, order)
        Y = self._spatial_jet(points, order)
        xm = X[-1]
        xp = X[0]
        if self.phi is not None:
            env = dict(self.params)
            names = ["xp", *self.field.w.coords, "xm"]
            parts = [xp] + [Y[..., i] for i in range(self.n)] + [xm]
            env.update(zip(names, parts))
            val = self.phi.evaluate(env)
            xp = xp - val
        return _stack_point(xp, Y, xm)

    def inverse(self, points):
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        out = self.inverse_jet(np.atleast_2d(points), 0).value
        return out[0] if single else out

    def jacobian(self, points):
        """``J[..., a, b] = d x^a / d x~^b``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self.inverse_jet(points, 1).grad

    def forward(self, points):
        """``x -> x~`` by integrating the characteristic through ``x`` back to the base slice."""
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        points = np.atleast_2d(points)
        out = points.copy()
        if not self.trivial:
            self.calibrate()
            t1 = np.full(points.shape[:-1], self.base_slice)
            Y, _ = integrate_flow(self.field, points[..., 0], points[..., 1:self.n + 1], points[..., -1], t1,
                                  self.settings.step, self.flow_box, check_det=False)
            out[..., 1:self.n + 1] = Y
        if self.phi is not None:
            env = dict(self.params)
            names = ["xp", *self.field.w.coords, "xm"]
            env.update(zip(names, np.moveaxis(points, -1, 0)))
            out[..., 0] = points[..., 0] + np.broadcast_to(self.phi.evaluate(env), points.shape[:-1])
        return out[0] if single else out

    def to_json(self):
        return {
            "kind": self.kind,
            "base_slice": self.base_slice,
            "integrator": self.settings.to_json(),
            "phi": None if self.phi is None else el.to_string(self.phi),
            "identity": self.trivial,
        }


def _drop_variable(J, var):
    """Zero every coefficient of ``J`` that involves variable ``var``."""
    b = jets.basis(J.dim, J.order)
    mask = np.array([e[var] > 0 for e in b.exps])
    coef = J.coef.copy()
    coef[..., mask] = 0.0
    return Jet(coef, J.dim, J.order)


class TransformedMetric(WalkerData):
    """Pullback of ``source`` along a coordinate map, as a composite evaluator.

    ``g~ = Dx^T g(x(x~)) Dx`` with ``Dx`` from the map's jet.  ``project``
    selects an exact structural projection applied to the pullback:
    ``'A'`` sets ``A~ = 0``; ``'main'`` sets ``A~ = 0`` and
    ``H~ = Lambda xp^2 + H~0``.  The unprojected pullback is available by
    passing ``project=None``; the projections are justified by the measured
    post-conditions recorded in the flow diagnostics.
    """

    def __init__(self, source, cmap, lam=None, project=None, name=None, box=None):
        if project not in (None, "A", "main"):
            raise ValueError(f"unknown projection {project!r}")
        self.source = source
        self.cmap = cmap
        self.coords = list(source.coords)
        self.lam = source.lam if lam is None else float(lam)
        self.project = project
        self.name = name or f"{source.name}~"
        self.box = box if box is not None else source.box
        self.A_is_zero = project in ("A", "main")
        self.H1_is_zero = project == "main"

    def full_jet(self, points, order=2):
        """Unprojected ``g~`` as a jet of order ``order``."""
        points = np.asarray(points, dtype=float)
        X = self.cmap.inverse_jet(points, order + 1)
        g = walker_matrix(*self.source.components_at(X)).truncate(order)
        N = self.N
        D = jets.stack([X.derivative(a) for a in range(N)], axis=-1)  # D[c, a] = d x^c / d x~^a
        gD = jets.einsum("cd,db->cb", g, D)
        return jets.einsum("ca,cb->ab", D, gD)

    def walker_defect(self, points):
        """Deviation of the pulled-back ``xp`` row from ``(0, 0, 1)``."""
        gt = self.full_jet(points, 0).value
        row = gt[..., 0, :].copy()
        row[..., -1] -= 1.0
        return float(np.max(np.abs(row)))

    def components(self, points, order=2):
        points = np.asarray(points, dtype=float)
        n = self.n
        gt = self.full_jet(points, order)
        h = gt[..., 1:n + 1, 1:n + 1]
        A = gt[..., 1:n + 1, n + 1]
        H = gt[..., n + 1, n + 1]
        if self.project in ("A", "main"):
            A = Jet.constant(np.zeros(A.shape), A.dim, A.order)
        if self.project == "main":
            H1, H0 = self.profile_components(points, order)
            xp = seeds(points, order)[0]
            H = H0 + self.lam * xp * xp
        return h, A, H

    def _H_at(self, points, xp_value, order):
        pts = np.array(points, dtype=float, copy=True)
        pts[..., 0] = xp_value
        gt = self.full_jet(pts, order)
        return gt[..., self.n + 1, self.n + 1]

    def profile_components(self, points, order=2):
        points = np.asarray(points, dtype=float)
        H0 = _drop_variable(self._H_at(points, 0.0, order), 0)
        if self.project == "main":
            return Jet.constant(np.zeros(H0.shape), H0.dim, order), H0
        Hp = self._H_at(points, 1.0, order)
        Hm = self._H_at(points, -1.0, order)
        H1 = _drop_variable((Hp - Hm) * 0.5, 0)
        return H1, H0


# ---------------------------------------------------------------------------
# Flow constructors
# ---------------------------------------------------------------------------

def _settings(step=None, agree_tol=None):
    st = IntegratorSettings()
    if step is not None:
        st.step = float(step)
    if agree_tol is not None:
        st.agree_tol = float(agree_tol)
    return st


def theorem1_flow(w, phi=None, base_slice=0.0, box=None, flow_box=None, step=None, agree_tol=None):
    """Flow of ``X = d_- + (B^k + h^{kl} d_l phi) d_k``, i.e. ``W = h^{-1}(grad phi - A)``.

    In the new coordinates ``B~ = 0`` (equivalently ``A~ = 0``); the
    ``xp``-component of the map is ``x~+ = xp + phi``.
    """
    fld = ExprField(w, phi)
    box = box if box is not None else w.box
    return CoordinateMap(fld, w.n, base_slice, _settings(step, agree_tol), flow_box,
                         phi=fld.phi, params=w.params, calibration_box=box)


def kill_A_flow(w, base_slice=0.0, box=None, flow_box=None, step=None, agree_tol=None):
    """Flow ``dx^i/dx~- = -A_j h^{ji}`` removing ``A`` (``phi = 0``)."""
    return theorem1_flow(w, None, base_slice, box, flow_box, step, agree_tol)


def transformed_metric(w, cmap, project=None, name=None):
    return TransformedMetric(w, cmap, project=project, name=name)


@dataclass
class FlowResult:
    map: CoordinateMap
    metric: WalkerData
    raw: WalkerData
    diagnostics: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.map, self.metric))


def measure_postconditions(raw, points):
    """Sup norms of ``A~`` and ``H~1`` of an unprojected pullback at ``points``."""
    h, A, H = raw.components(points, 0)
    H1, _ = raw.profile_components(points, 0)
    return {
        "sup_A": float(np.max(np.abs(A.value))) if A.value.size else 0.0,
        "sup_H1": float(np.max(np.abs(H1.value))),
        "walker_defect": raw.walker_defect(points),
    }


def main_theorem_flow(w, lam, base_slice=0.0, box=None, flow_box=None, points=None, step=None,
                      agree_tol=None, measure=True):
    """Characteristic flow with ``phi = H1 / (2 Lambda)`` followed by the ``xp``-shift.

    Returns a :class:`FlowResult` (iterable as ``(map, metric)``).  ``metric``
    is the main-form projection (``A~ = 0``, ``H~ = Lambda xp^2 + H~0``);
    ``raw`` is the unprojected pullback and ``diagnostics`` holds the measured
    ``sup|A~|`` and ``sup|H~1|`` at ``points``.
    """
    if lam == 0:
        raise LambdaZeroError("the main-theorem flow divides by Lambda, so it needs Lambda != 0; use kill-a or theorem2 for Lambda = 0")
    box = box if box is not None else w.box
    if points is None:
        points = box.sample(100, 0)
    points = np.asarray(points, dtype=float)
    _check_profile(w, lam, points)
    phi = el.simplify(el.div(w.H1, el.Num(2.0 * lam)))
    cmap = theorem1_flow(w, phi, base_slice, box, flow_box, step, agree_tol)
    raw = TransformedMetric(w, cmap, lam=lam, project=None, name=f"{w.name}~raw")
    metric = TransformedMetric(w, cmap, lam=lam, project="main", name=f"{w.name}~")
    diag = measure_postconditions(raw, points) if measure else {}
    diag["integrator"] = cmap.settings.to_json()
    diag["identity"] = cmap.trivial
    return FlowResult(cmap, metric, raw, diag)


def kill_A(w, base_slice=0.0, box=None, flow_box=None, points=None, step=None, agree_tol=None, measure=True):
    """:func:`kill_A_flow` plus the transformed metric and its measured ``sup|A~|``."""
    box = box if box is not None else w.box
    if points is None:
        points = box.sample(100, 0)
    cmap = kill_A_flow(w, base_slice, box, flow_box, step, agree_tol)
    raw = TransformedMetric(w, cmap, project=None, name=f"{w.name}~raw")
    metric = TransformedMetric(w, cmap, project="A", name=f"{w.name}~")
    diag = measure_postconditions(raw, points) if measure else {}
    diag["integrator"] = cmap.settings.to_json()
    diag["identity"] = cmap.trivial
    return FlowResult(cmap, metric, raw, diag)


# ---------------------------------------------------------------------------
# x+ shift
# ---------------------------------------------------------------------------

def plus_shift(w, f=None, lam=None):
    """Metric in coordinates ``x~+ = xp - f`` (so ``xp = x~+ + f``).

    ``A_i -> A_i + d_i f`` and ``H -> H(xp + f) + 2 d_- f``; on the profile
    this is ``H1 -> H1 + 2 Lambda f`` and ``H0 -> H0 + H1 f + Lambda f^2 + 2 fdot``.
    With ``f=None`` the killing choice ``f = -H1 / (2 Lambda)`` is used and
    ``H~`` is assembled from the profile formulas, so ``H~1`` vanishes
    identically.
    """
    lam = w.lam if lam is None else float(lam)
    if f is None:
        if lam is None or lam == 0:
            raise LambdaZeroError("the choice f = -H1/(2 Lambda) requires Lambda != 0")
        _check_profile(w, lam, w.sample(50, 0))
        f = el.simplify(el.div(el.neg(w.H1), el.Num(2.0 * lam)))
        killing = True
    else:
        f = el.simplify(el.as_expr(f))
        killing = False
    if "xp" in f.free_vars:
        raise WalkerFormError("f must not depend on xp")
    A = [el.simplify(a + el.diff(f, c)) for a, c in zip(w.A, w.coords)]
    fdot = el.diff(f, "xm")
    if killing:
        H0 = el.simplify(w.H0 + w.H1 * f + lam * f * f + 2.0 * fdot)
        H = el.simplify(el.Num(lam) * el.Var("xp") ** 2 + H0)
    else:
        H = el.simplify(el.substitute(w.H, {"xp": el.Var("xp") + f}) + 2.0 * fdot)
    return w.replace(A=A, H=H, name=f"{w.name}+shift")


# ---------------------------------------------------------------------------
# Explicit gauge maps
# ---------------------------------------------------------------------------

class GaugeMetric(WalkerData):
    """Walker data after ``x~+ = xp + phi``, ``x~ = psi``, ``x~- = xm + c``.

    Points are new coordinates.  The old point is recovered by Newton's
    method on the spatial block; components come from the inverse-block
    formulas, evaluated as jets in the old variables and composed with the
    series inverse of the map.
    """

    def __init__(self, w, phi, psi, c=0.0, name=None, box=None, newton_tol=1e-13, newton_iter=60):
        self.source = w
        self.coords = list(w.coords)
        self.phi = el.simplify(el.as_expr(phi))
        self.psi = [el.simplify(el.as_expr(p)) for p in psi]
        if len(self.psi) != w.n:
            raise WalkerFormError(f"psi needs {w.n} components")
        for e in [self.phi, *self.psi]:
            if "xp" in e.free_vars:
                raise WalkerFormError("phi and psi must not depend on xp")
            unknown = e.free_vars - set(w.variables) - set(w.params)
            if unknown:
                raise WalkerFormError(f"unknown names {sorted(unknown)} in the gauge map")
        self.c = float(c)
        self.lam = w.lam
        self.name = name or f"{w.name}~gauge"
        self.box = box
        self.newton_tol = newton_tol
        self.newton_iter = newton_iter

    def _env(self, points, order):
        env = dict(self.source.params)
        env.update(zip(self.source.variables, seeds(points, order)))
        return env

    def map_jet(self, old_points, order):
        """Jet of ``x -> x~`` at old points (value shape ``(P, N)``)."""
        old_points = np.asarray(old_points, dtype=float)
        env = self._env(old_points, order)
        shape, dim = old_points.shape[:-1], old_points.shape[-1]
        ev = lambda e: self.source._eval(e, env, shape, dim, order)
        parts = [env["xp"] + ev(self.phi)] + [ev(p) for p in self.psi] + [env["xm"] + self.c]
        return jets.stack(parts, axis=-1)

    def old_points(self, points):
        """Newton solve of ``psi(x, x~- - c) = x~`` and ``xp = x~+ - phi``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = self.n
        x = points.copy()
        x[..., -1] = points[..., -1] - self.c
        for _ in range(self.newton_iter):
            F = self.map_jet(x, 1)
            r = F.value[..., 1:n + 1] - points[..., 1:n + 1]
            J = F.grad[..., 1:n + 1, 1:n + 1]
            det = np.linalg.det(J)
            if np.any(np.abs(det) < 1e-12):
                i = int(np.flatnonzero(np.abs(det) < 1e-12)[0])
                raise JacobianError(f"psi Jacobian is singular at sample {i}")
            dx = np.linalg.solve(J, r[..., None])[..., 0]
            x[..., 1:n + 1] -= dx
            if np.max(np.abs(dx)) <= self.newton_tol * (1.0 + np.max(np.abs(x[..., 1:n + 1]))):
                break
        else:
            raise JacobianError("Newton inversion of psi did not converge")
        F = self.map_jet(x, 0)
        x[..., 0] = points[..., 0] - (F.value[..., 0] - x[..., 0])
        return x

    def check_jacobian(self, old_points):
        """Raise :class:`JacobianError` where ``det(d psi / d x)`` vanishes."""
        F = self.map_jet(np.atleast_2d(old_points), 1)
        det = np.linalg.det(F.grad[..., 1:self.n + 1, 1:self.n + 1])
        bad = np.abs(det) < 1e-12
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise JacobianError(f"psi Jacobian is singular at sample {i} (det {det[i]:.3g})")
        return det

    def blocks_old(self, old_points, order):
        """``(h~^{ij}, B~, F~)`` as jets in the old variables."""
        n = self.n
        m = n + 1
        Fm = self.map_jet(old_points, order + 1)
        dpsi = jets.stack([Fm.derivative(a) for a in range(self.N)], axis=-1)  # [b, a] = d x~^b / d x^a
        Dpsi = dpsi[..., 1:n + 1, 1:n + 1]  # d_k psi^i, index [i, k]
        psidot = dpsi[..., 1:n + 1, m]
        dphi = dpsi[..., 0, 1:n + 1]
        phidot = dpsi[..., 0, m]
        h, A, H = self.source.components(old_points, order)
        hinv = jets.inv(h)
        B = -jets.einsum("ij,j->i", hinv, A)
        F = -H - (A * B).sum(-1)
        ht = jets.einsum("ik,jk->ij", Dpsi, jets.einsum("kl,jl->jk", hinv, Dpsi))
        grad_up = jets.einsum("kl,l->k", hinv, dphi)
        Bt = psidot + jets.einsum("ik,k->i", Dpsi, B + grad_up)
        Ft = F + 2.0 * phidot + 2.0 * (B * dphi).sum(-1) + (grad_up * dphi).sum(-1)
        return ht, Bt, Ft

    def components(self, points, order=2):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        old = self.old_points(points)
        self.check_jacobian(old)
        ht, Bt, Ft = self.blocks_old(old, order)
        if order >= 1:
            G = jets.invert_map(self.map_jet(old, order), old)
            ht, Bt, Ft = (jets.compose(_lift(t, order), G) for t in (ht, Bt, Ft))
        hnew = jets.inv(ht)
        Anew = -jets.einsum("ij,j->i", hnew, Bt)
        Hnew = -Ft - (Anew * Bt).sum(-1)
        return hnew, Anew, Hnew

    def profile_components(self, points, order=2):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        H = {}
        for p in (-1.0, 0.0, 1.0):
            pts = points.copy()
            pts[..., 0] = p
            H[p] = self.components(pts, order)[2]
        H1 = _drop_variable((H[1.0] - H[-1.0]) * 0.5, 0)
        return H1, _drop_variable(H[0.0], 0)


def _lift(t, order):
    return t if t.order == order else t.truncate(order)


def gauge_transform(w, phi, psi, c=0.0, check_points=None, name=None, box=None):
    """Walker data in coordinates ``x~+ = xp + phi``, ``x~ = psi``, ``x~- = xm + c``.

    ``h~^{ij} = d_k psi^i h^{kl} d_l psi^j``,
    ``B~^i = d_- psi^i + B^k d_k psi^i + h^{kl} d_k phi d_l psi^i``,
    ``F~ = F + 2 d_- phi + 2 B^k d_k phi + h^{kl} d_k phi d_l phi``,
    and then ``h~``, ``A~ = -h~ B~``, ``H~ = -F~ - A~^t B~``.
    """
    g = GaugeMetric(w, phi, psi, c, name=name, box=box)
    if check_points is None and w.box is not None:
        check_points = w.sample(50, 0)
    if check_points is not None:
        g.check_jacobian(check_points)
    return g


def pullback_oracle(w, gauge, points):
    """Direct congruence ``g~ = J^T g(x) J`` at new-coordinate ``points`` (values only).

    ``J = dx/dx~`` is the inverse of the forward map's Jacobian.
    """
    old = gauge.old_points(points)
    Jf = gauge.map_jet(old, 1).grad
    J = np.linalg.inv(Jf)
    g = walker_matrix(*w.components(old, 0)).value
    return np.einsum("...ca,...cd,...db->...ab", J, g, J)


# ---------------------------------------------------------------------------
# Removing H0 on a grid
# ---------------------------------------------------------------------------

@dataclass
class Grid:
    """Rectangular spatial grid: per-axis ``(lo, hi)`` and a common node count."""

    bounds: list
    nodes: int = 33

    def axes(self):
        return [np.linspace(lo, hi, self.nodes) for lo, hi in self.bounds]

    def spacing(self):
        return [(hi - lo) / (self.nodes - 1) for lo, hi in self.bounds]

    def refined(self):
        return Grid(list(self.bounds), 2 * self.nodes - 1)

    def coarsened(self):
        if self.nodes % 2 == 0:
            raise ValueError("coarsening needs an odd node count")
        return Grid(list(self.bounds), (self.nodes + 1) // 2)


@dataclass
class Theorem2Result:
    phi: np.ndarray
    times: np.ndarray
    grid: Grid
    residual_sup: float
    residual_region: dict
    richardson: float
    psi_map: object = None
    notes: list = field(default_factory=list)

    def to_json(self):
        return {
            "residual_sup": self.residual_sup,
            "residual_region": self.residual_region,
            "richardson_estimate": None if not np.isfinite(self.richardson) else float(self.richardson),
            "grid_nodes": self.grid.nodes,
            "steps": len(self.times) - 1,
            "phi_sup": float(np.max(np.abs(self.phi))),
        }


class _GridFields:
    """Values of ``h``, ``H1``, ``H0`` on the grid at a given ``xm``."""

    def __init__(self, w, grid):
        self.w = w
        self.axes = grid.axes()
        self.mesh = np.meshgrid(*self.axes, indexing="ij")

    def at(self, t):
        w = self.w
        env = dict(w.params)
        env.update(zip(w.coords, self.mesh))
        env["xp"] = 0.0
        env["xm"] = np.full(self.mesh[0].shape, float(t))
        shape = self.mesh[0].shape
        ev = lambda e: np.broadcast_to(np.asarray(e.evaluate(env), dtype=float), shape)
        n = w.n
        h = np.empty(shape + (n, n))
        for i in range(n):
            for j in range(n):
                h[..., i, j] = ev(w.h[i][j])
        return np.linalg.inv(h), ev(w.H1), ev(w.H0)


def _grad(phi, axes):
    g = np.gradient(phi, *axes, edge_order=2)
    return np.stack(g if isinstance(g, (list, tuple)) else [g], axis=-1)


def _march(w, lam, grid, steps, t0, t1, bound):
    fields = _GridFields(w, grid)
    axes = fields.axes
    tau = (t1 - t0) / steps
    phi = np.zeros(fields.mesh[0].shape)
    out = [phi]

    def rhs(phi, t):
        hinv, H1, H0 = fields.at(t)
        g = _grad(phi, axes)
        q = np.einsum("...k,...kl,...l->...", g, hinv, g)
        return 0.5 * (H0 - H1 * phi + lam * phi * phi - q)

    t = t0
    for _ in range(steps):
        k1 = rhs(phi, t)
        pred = phi + tau * k1
        k2 = rhs(pred, t + tau)
        phi = phi + 0.5 * tau * (k1 + k2)
        t += tau
        if not np.all(np.isfinite(phi)) or np.max(np.abs(phi)) > bound:
            raise BlowUpError(f"|phi| exceeded {bound:g} at x- = {t:.6g}: the local solution left the domain")
        out.append(phi)
    return np.array(out), np.linspace(t0, t1, steps + 1), fields


def _d4(f, h, axis):
    """Fourth-order central difference, valid two nodes away from the ends."""
    f = np.moveaxis(f, axis, 0)
    d = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12.0 * h)
    pad = np.full((2,) + d.shape[1:], np.nan)
    return np.moveaxis(np.concatenate([pad, d, pad]), 0, axis)


def theorem2_residual(w, lam, phi, times, grid, fields=None):
    """``H~0 = H0 - H1 phi + Lambda phi^2 - 2 d_- phi - |grad phi|_h^2`` on the interior sub-box.

    The interior sub-box is the middle half of each spatial axis and all
    x- slices at least two steps from the ends; derivatives are fourth-order
    central differences so the figure measures the marching error.
    """
    fields = fields or _GridFields(w, grid)
    tau = times[1] - times[0]
    dt = _d4(phi, tau, 0)
    grads = [_d4(phi, hk, k + 1) for k, hk in enumerate(grid.spacing())]
    nodes = grid.nodes
    lo, hi = nodes // 4, nodes - nodes // 4
    sl = (slice(2, len(times) - 2),) + tuple(slice(lo, hi) for _ in grid.bounds)
    sup = 0.0
    for ti in range(2, len(times) - 2):
        hinv, H1, H0 = fields.at(times[ti])
        g = np.stack([gk[ti] for gk in grads], axis=-1)
        q = np.einsum("...k,...kl,...l->...", g, hinv, g)
        r = H0 - H1 * phi[ti] + lam * phi[ti] ** 2 - 2.0 * dt[ti] - q
        sup = max(sup, float(np.max(np.abs(r[sl[1:]]))))
    region = {"x-": [float(times[2]), float(times[-3])],
              "spatial": [[float(a[lo]), float(a[hi - 1])] for a in grid.axes()]}
    return sup, region


class GridField:
    """``W = h^{-1} grad phi`` with ``grad phi`` interpolated from a marched solution.

    Supports jets of order 0 and 1: the first derivatives of ``W`` come from
    the interpolated Hessian and x- derivative of ``grad phi``.
    """

    def __init__(self, w, phi, times, grid):
        self.w = w
        self.trivial = False
        axes = grid.axes()
        g = np.stack(np.gradient(phi, times, *axes, edge_order=2), axis=-1)  # [..., 0] d_-, [..., k+1] d_k
        grad = g[..., 1:]
        n = w.n
        hess = np.stack([np.stack(np.gradient(grad[..., k], times, *axes, edge_order=2), axis=-1)
                         for k in range(n)], axis=-2)  # [..., k, 0] d_- d_k phi, [..., k, l+1] d_l d_k phi
        data = np.concatenate([grad, hess.reshape(hess.shape[:-2] + (-1,))], axis=-1)
        self.interp = RegularGridInterpolator((times, *axes), data, method="linear", bounds_error=True)
        self.n = n

    def _h_values(self, v):
        w = self.w
        env = dict(w.params)
        env.update({name: v[..., i] for i, name in enumerate(w.variables)})
        shape = v.shape[:-1]
        n = self.n
        h = np.empty(shape + (n, n))
        for i in range(n):
            for j in range(n):
                h[..., i, j] = np.broadcast_to(np.asarray(w.h[i][j].evaluate(env), dtype=float), shape)
        return h

    def __call__(self, X):
        n = self.n
        v = _val(X)
        q = np.concatenate([v[..., -1:], v[..., 1:n + 1]], axis=-1)
        try:
            data = self.interp(q)
        except ValueError as exc:
            raise FlowEscapeError(f"characteristic left the phi grid: {exc}") from None
        grad = data[..., :n]
        if not isinstance(X, Jet):
            return np.linalg.solve(self._h_values(v), grad[..., None])[..., 0]
        if X.order > 1:
            raise ValueError("interpolated characteristic fields support jets of order <= 1")
        N = X.shape[-1]
        hess = data[..., n:].reshape(v.shape[:-1] + (n, n + 1))
        coef = np.zeros(v.shape[:-1] + (n, jets.basis(N, X.order).size))
        coef[..., 0] = grad
        if X.order >= 1:
            lin = jets.basis(N, X.order).linear
            coef[..., lin[1:n + 1]] = hess[..., 1:]
            coef[..., lin[N - 1]] = hess[..., 0]
        Gx = Jet(coef, N, X.order)
        G = jets.compose(Gx, X) if X.order >= 1 else Gx
        w = self.w
        env = dict(w.params)
        env.update({name: X[..., i] for i, name in enumerate(w.variables)})
        shape = X.shape[:-1]
        h = Jet.constant(np.zeros(shape + (n, n)), X.dim, X.order)
        for i in range(n):
            for j in range(n):
                h[..., i, j] = w._eval(w.h[i][j], env, shape, X.dim, X.order)
        return jets.solve(h, G)


def theorem2_phi(w, lam, grid, steps, t_end=1.0, base_slice=0.0, bound=1e6, tol=None, build_map=True,
                 richardson=True):
    """Solve ``2 d_- phi = H0 - H1 phi + Lambda phi^2 - h^{kl} d_k phi d_l phi``, ``phi = 0`` at the base slice.

    Explicit RK2 (Heun) in ``xm`` with second-order spatial gradients
    (one-sided at the boundary).  The report carries ``sup|H~0|`` on the
    interior sub-box, a Richardson estimate against the grid with half the
    resolution in space and time, and (optionally) the characteristic map
    ``psi`` for ``W = h^{-1} grad phi`` built on the interpolated gradient.
    """
    if not w.A_is_zero:
        raise WalkerFormError("theorem2_phi needs a metric with A = 0 (apply kill_A_flow first)")
    box_pts = np.array([[0.0, *[0.5 * (lo + hi) for lo, hi in grid.bounds], base_slice]])
    mesh_pts = np.array(np.meshgrid(*[np.linspace(lo, hi, 5) for lo, hi in grid.bounds], indexing="ij"))
    mesh_pts = mesh_pts.reshape(len(grid.bounds), -1).T
    pts = np.concatenate([np.zeros((len(mesh_pts), 1)), mesh_pts,
                          np.full((len(mesh_pts), 1), 0.5 * (base_slice + t_end))], axis=1)
    _check_profile(w, lam, np.vstack([box_pts, pts]))
    phi, times, fields = _march(w, lam, grid, steps, base_slice, t_end, bound)
    sup, region = theorem2_residual(w, lam, phi, times, grid, fields)
    est = float("nan")
    notes = []
    if richardson and grid.nodes % 2 == 1 and steps % 2 == 0 and grid.nodes >= 9 and steps >= 8:
        coarse, _, _ = _march(w, lam, grid.coarsened(), steps // 2, base_slice, t_end, bound)
        fine_sub = phi[::2][(slice(None),) + tuple(slice(None, None, 2) for _ in grid.bounds)]
        est = float(np.max(np.abs(fine_sub - coarse)) / 3.0)
    elif tol is not None:
        notes.append("Richardson estimate needs odd node count and even step count")
    if tol is not None and np.isfinite(est) and est > tol:
        raise GridTooCoarseError(f"Richardson estimate {est:.3g} exceeds requested tolerance {tol:.3g}")
    psi_map = None
    if build_map:
        fld = GridField(w, phi, times, grid)
        psi_map = CoordinateMap(fld, w.n, base_slice, IntegratorSettings(step=(t_end - base_slice) / steps,
                                                                        calibrated=True))
    return Theorem2Result(phi, times, grid, sup, region, est, psi_map, notes)
