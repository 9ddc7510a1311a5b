"""Walker metrics, their H-profile, the Einstein residual systems and the
curvature decomposition in the null frame.

Coordinates are ordered ``(xp, x^1, ..., x^n, xm)`` and the metric is

    g = 2 dxp dxm + h_ij dx^i dx^j + 2 A_i dx^i dxm + H dxm^2.

All x^- derivatives ("dots") are exact because ``xm`` is an active jet
variable.  ``hdot^{ij}`` always means ``d_-(h^{ij}) = -h^{ik} hdot_kl h^{lj}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import exprlang as el
from . import geometry as geo
from .jets import Jet, seeds

RESERVED = ("xp", "xm")


class WalkerFormError(ValueError):
    """A structural hypothesis on the metric (Walker form, A = 0, ...) fails."""


class ProfileError(ValueError):
    """H is not of the form Lambda xp^2 + xp H1 + H0."""


class DecompositionError(ArithmeticError):
    """The curvature decomposition does not reproduce the Ricci tensor."""


# ---------------------------------------------------------------------------
# Sampling domains
# ---------------------------------------------------------------------------

class Box:
    """Axis-aligned coordinate box, optionally cut to a spatial disc.

    ``bounds`` maps every variable (in order) to ``(lo, hi)``.  When
    ``radius`` is given, sampled points also satisfy ``sum x_i^2 < radius^2``
    over the ``spatial`` variables.
    """

    def __init__(self, bounds, radius=None, spatial=None):
        self.names = list(bounds)
        self.lo = np.array([float(bounds[k][0]) for k in self.names])
        self.hi = np.array([float(bounds[k][1]) for k in self.names])
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ValueError("box bounds must be finite")
        if np.any(self.lo >= self.hi):
            bad = [k for k, a, b in zip(self.names, self.lo, self.hi) if a >= b]
            raise ValueError(f"box bounds need min < max for {bad}")
        self.radius = None if radius is None else float(radius)
        if spatial is None:
            spatial = [k for k in self.names if k not in RESERVED]
        self.spatial = [self.names.index(k) for k in spatial]

    @property
    def bounds(self):
        return {k: (float(a), float(b)) for k, a, b in zip(self.names, self.lo, self.hi)}

    def contains(self, points, slack=0.0):
        points = np.asarray(points, dtype=float)
        ok = np.all((points >= self.lo - slack) & (points <= self.hi + slack), axis=-1)
        if self.radius is not None:
            r = np.sqrt(np.sum(points[..., self.spatial] ** 2, axis=-1))
            ok &= r <= self.radius + slack
        return ok

    def sample(self, n=100, seed=0):
        """``n`` scrambled Halton points inside the box (deterministic for a seed)."""
        sampler = qmc.Halton(d=len(self.names), scramble=True, seed=seed)
        out = np.empty((0, len(self.names)))
        while len(out) < n:
            pts = self.lo + (self.hi - self.lo) * sampler.random(max(2 * n, 16))
            if self.radius is not None:
                r = np.sqrt(np.sum(pts[:, self.spatial] ** 2, axis=1))
                pts = pts[r < self.radius]
            out = np.vstack([out, pts])
        return out[:n]

    def with_bounds(self, **updates):
        b = self.bounds
        b.update({k: tuple(v) for k, v in updates.items()})
        return Box(b, self.radius, [self.names[i] for i in self.spatial])

    def to_json(self):
        return {"bounds": {k: list(v) for k, v in self.bounds.items()}, "radius": self.radius}


# ---------------------------------------------------------------------------
# Metric data
# ---------------------------------------------------------------------------

class WalkerData:
    """Common interface of Walker metrics given by expressions or composites.

    Subclasses provide ``components(points, order)`` returning jets
    ``(h, A, H)`` of value shapes ``(P, n, n)``, ``(P, n)`` and ``(P,)`` over
    all ``n + 2`` coordinates, and ``profile_components(points, order)``
    returning jets ``(H1, H0)``.
    """

    coords: list
    lam = None
    box = None
    name = ""

    @property
    def n(self):
        return len(self.coords)

    @property
    def variables(self):
        return ["xp", *self.coords, "xm"]

    @property
    def N(self):
        return self.n + 2

    # structural flags; composites override them
    A_is_zero = False
    H1_is_zero = False
    H0_is_zero = False
    H_is_zero = False

    def components(self, points, order=2):  # pragma: no cover - interface
        raise NotImplementedError

    def profile_components(self, points, order=2):  # pragma: no cover - interface
        raise NotImplementedError

    def sample(self, n=100, seed=0):
        if self.box is None:
            raise ValueError(f"metric {self.name!r} has no declared box; pass points explicitly")
        return self.box.sample(n, seed)


def check_positive_definite(h, name=""):
    """Raise :class:`WalkerFormError` unless every matrix in ``h`` admits a Cholesky factor."""
    h = np.asarray(h, dtype=float)
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        flat = h.reshape(-1, *h.shape[-2:])
        bad = next(i for i, m in enumerate(flat) if np.any(np.linalg.eigvalsh(m) <= 0))
        label = f" of {name!r}" if name else ""
        raise WalkerFormError(f"h{label} is not positive definite at sample {bad}") from None


def _zero(e):
    return el.is_zero(el.simplify(e))


class WalkerMetric(WalkerData):
    """Walker metric whose components are expressions.

    Parameters
    ----------
    coords : list of n names for x^1..x^n (``xp``/``xm`` are reserved).
    h : n x n nested list of expressions (text or Expr); entries below the
        diagonal may be ``None`` and are mirrored.
    A : n expressions.
    H : expression in ``xp``, the coordinates and ``xm``.
    lam : optional Einstein constant asserted for the metric.
    params : constants bound by name during evaluation.
    """

    def __init__(self, coords, h, A, H, lam=None, params=None, name="", box=None, meta=None):
        coords = list(coords)
        n = len(coords)
        if n < 2:
            raise WalkerFormError(f"need at least two spatial coordinates, got {n}")
        if len(set(coords)) != n or any(c in RESERVED for c in coords):
            raise WalkerFormError(f"coordinate names must be unique and avoid {RESERVED}: {coords}")
        self.coords = coords
        self.params = dict(params or {})
        clash = set(self.params) & set(self.variables)
        if clash:
            raise WalkerFormError(f"parameter names clash with coordinates: {sorted(clash)}")
        if len(h) != n or any(len(row) != n for row in h):
            raise WalkerFormError(f"h must be {n}x{n}")
        hh = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                src = h[i][j] if h[i][j] is not None else h[j][i]
                if src is None:
                    raise WalkerFormError(f"h[{i}][{j}] missing")
                hh[i][j] = hh[j][i] = el.as_expr(src)
        if len(A) != n:
            raise WalkerFormError(f"A must have {n} components")
        self.h = hh
        self.A = [el.as_expr(a) for a in A]
        self.H = el.as_expr(H)
        self.lam = None if lam is None else float(lam)
        self.name = name
        self.box = box
        self.meta = dict(meta or {})
        allowed = set(self.variables) | set(self.params)
        for label, e in [("h", x) for row in hh for x in row] + [("A", a) for a in self.A] + [("H", self.H)]:
            unknown = e.free_vars - allowed
            if unknown:
                raise WalkerFormError(f"{label} references unknown names {sorted(unknown)}")
            if label != "H" and "xp" in e.free_vars:
                raise WalkerFormError(f"{label} must not depend on xp: {e}")

        self.H0 = el.simplify(el.substitute(self.H, {"xp": 0.0}))
        self.H1 = el.simplify(el.substitute(el.diff(self.H, "xp"), {"xp": 0.0}))
        self.H2 = el.simplify(el.diff(el.diff(self.H, "xp"), "xp"))

    # structural checks (syntactic)
    @property
    def A_is_zero(self):
        return all(_zero(a) for a in self.A)

    @property
    def H1_is_zero(self):
        return _zero(self.H1)

    @property
    def H0_is_zero(self):
        return _zero(self.H0)

    @property
    def H_is_zero(self):
        return _zero(self.H)

    @property
    def h_depends_on_xm(self):
        return any("xm" in e.free_vars for row in self.h for e in row)

    def env(self, points, order=2):
        points = np.asarray(points, dtype=float)
        env = dict(self.params)
        env.update(zip(self.variables, seeds(points, order)))
        return env

    def _eval(self, e, env, shape, dim, order):
        val = e.evaluate(env)
        if isinstance(val, Jet):
            return val
        return Jet.constant(np.broadcast_to(np.asarray(val, dtype=float), shape), dim, order)

    def components(self, points, order=2):
        """Jets of ``(h, A, H)`` at ``points``; ``h`` must be positive definite there."""
        points = np.asarray(points, dtype=float)
        h, A, H = self._components_env(self.env(points, order), points.shape[:-1], self.N, order)
        check_positive_definite(h.value, self.name)
        return h, A, H

    def components_at(self, X):
        """Components with the coordinates replaced by the jet ``X`` (value shape ``(P, N)``).

        The result is expressed in the variables of ``X``; this is how a
        metric is pulled back along a coordinate map given as a jet.
        """
        env = dict(self.params)
        env.update({name: X[..., i] for i, name in enumerate(self.variables)})
        return self._components_env(env, X.shape[:-1], X.dim, X.order)

    def _components_env(self, env, shape, dim, order):
        n = self.n
        h = Jet.constant(np.zeros(shape + (n, n)), dim, order)
        for i in range(n):
            for j in range(i, n):
                val = self._eval(self.h[i][j], env, shape, dim, order)
                h[..., i, j] = val
                if i != j:
                    h[..., j, i] = val
        A = Jet.constant(np.zeros(shape + (n,)), dim, order)
        for i in range(n):
            A[..., i] = self._eval(self.A[i], env, shape, dim, order)
        H = self._eval(self.H, env, shape, dim, order)
        return h, A, H

    def profile_components(self, points, order=2):
        points = np.asarray(points, dtype=float)
        env = self.env(points, order)
        shape = points.shape[:-1]
        return (
            self._eval(self.H1, env, shape, self.N, order),
            self._eval(self.H0, env, shape, self.N, order),
        )

    def expr_env(self):
        return dict(self.params)

    def replace(self, **changes):
        """Copy with some of ``h``, ``A``, ``H``, ``lam``, ``name``, ``box``, ``meta`` replaced."""
        kw = dict(coords=self.coords, h=self.h, A=self.A, H=self.H, lam=self.lam, params=self.params,
                  name=self.name, box=self.box, meta=self.meta)
        kw.update(changes)
        return WalkerMetric(**kw)

    def to_spec(self):
        """Serializable dictionary in the metric-spec file layout."""
        spec = {
            "format": 1,
            "n": self.n,
            "coords": list(self.coords),
            "lambda": self.lam,
            "h": [[el.to_string(self.h[i][j]) if j >= i else None for j in range(self.n)] for i in range(self.n)],
            "A": [el.to_string(a) for a in self.A],
            "H": el.to_string(self.H),
        }
        if self.params:
            spec["params"] = dict(self.params)
        if self.box is not None:
            spec["box"] = {k: list(v) for k, v in self.box.bounds.items()}
            if self.box.radius is not None:
                spec["radius"] = self.box.radius
        return spec


# ---------------------------------------------------------------------------
# Full metric, inverse blocks
# ---------------------------------------------------------------------------

def full_metric_jet(w, points, order=2):
    """Jet of the assembled ``(n+2) x (n+2)`` metric at ``points``."""
    return walker_matrix(*w.components(points, order))


def walker_matrix(h, A, H):
    """Assemble the block matrix ``[[0, 0, 1], [0, h, A], [1, A^t, H]]`` from jets."""
    n = h.shape[-1]
    shape = H.shape
    order = H.order
    g = Jet.constant(np.zeros(shape + (n + 2, n + 2)), H.dim, order)
    g.coef[..., 0, n + 1, 0] = 1.0
    g.coef[..., n + 1, 0, 0] = 1.0
    g[..., 1:n + 1, 1:n + 1] = h
    g[..., 1:n + 1, n + 1] = A
    g[..., n + 1, 1:n + 1] = A
    g[..., n + 1, n + 1] = H
    return g


def assemble_full(w):
    """The full metric of ``w`` as a :class:`~walkerlab.geometry.MetricField`."""
    return geo.MetricField(w.N, lambda pts, order=2: full_metric_jet(w, pts, order), w.variables)


def inverse_blocks(w, points):
    """Values of ``B = -h^{-1} A`` and ``F = -H - A^t B`` at ``points``."""
    h, A, H = w.components(points, 0)
    hinv = geo.checked_inverse(h.value)
    B = -np.einsum("...ij,...j->...i", hinv, A.value)
    F = -H.value - np.einsum("...i,...i->...", A.value, B)
    return B, F


def full_inverse(w, points):
    """Assembled inverse metric from the blocks ``(F, B, h^{-1})``."""
    h, A, H = w.components(points, 0)
    B, F = inverse_blocks(w, points)
    n = w.n
    shape = np.asarray(points).shape[:-1]
    ginv = np.zeros(shape + (n + 2, n + 2))
    ginv[..., 0, 0] = F
    ginv[..., 0, 1:n + 1] = B
    ginv[..., 1:n + 1, 0] = B
    ginv[..., 0, n + 1] = 1.0
    ginv[..., n + 1, 0] = 1.0
    ginv[..., 1:n + 1, 1:n + 1] = np.linalg.inv(h.value)
    return ginv


# ---------------------------------------------------------------------------
# H-profile
# ---------------------------------------------------------------------------

@dataclass
class HProfile:
    lambda_hat: float
    H1: object  # callable points -> Jet
    H0: object
    cubic_residual: float
    probes: tuple = ()


def extract_profile(w, probe_xplus=(-1.0, 0.0, 1.0), points=None, tol=1e-8):
    """Decompose ``H = lambda_hat xp^2 + xp H1 + H0`` and measure its defect."""
    probes = tuple(float(p) for p in probe_xplus)
    if len(probes) < 3:
        raise ValueError("need at least three x+ probe values")
    if points is None:
        points = w.sample()
    points = np.asarray(points, dtype=float)
    half_second = []
    for p in probes:
        pts = points.copy()
        pts[:, 0] = p
        _, _, H = w.components(pts, 2)
        half_second.append(0.5 * H.hess[..., 0, 0])
    half_second = np.array(half_second)
    lam_hat = float(np.mean(half_second))
    cubic = float(np.max(np.abs(half_second - lam_hat)))
    prof = HProfile(
        lambda_hat=lam_hat,
        H1=lambda pts, order=2: w.profile_components(pts, order)[0],
        H0=lambda pts, order=2: w.profile_components(pts, order)[1],
        cubic_residual=cubic,
        probes=probes,
    )
    if cubic > tol:
        raise ProfileError(
            f"H not quadratic in x+ (cubic_residual {cubic:.3g} > {tol:.3g})", ) from None
    return prof


# ---------------------------------------------------------------------------
# Residual reports
# ---------------------------------------------------------------------------

@dataclass
class ResidualReport:
    equation_id: str
    points: np.ndarray = field(repr=False)
    sup_residual: float
    tolerance: float
    passed: bool
    values: np.ndarray = field(default=None, repr=False)

    def to_json(self, seed=None):
        d = {
            "equation_id": self.equation_id,
            "sup_residual": float(self.sup_residual),
            "tolerance": float(self.tolerance),
            "pass": bool(self.passed),
            "n_points": int(len(self.points)),
        }
        if seed is not None:
            d["seed"] = seed
        return d


def make_report(equation_id, points, values, tol):
    values = np.asarray(values, dtype=float)
    per_point = np.abs(values).reshape(len(points), -1).max(axis=1) if values.size else np.zeros(len(points))
    sup = float(per_point.max()) if len(per_point) else 0.0
    return ResidualReport(equation_id, np.asarray(points), sup, float(tol), bool(sup <= tol), values)


class SliceData:
    """Everything the residual systems need, evaluated once at a point set.

    Index conventions: ``dh[..., i, j, k] = d_k h_ij``,
    ``dA[..., i, k] = d_k A_i``; spatial derivatives only.
    """

    def __init__(self, w, points):
        points = np.asarray(points, dtype=float)
        self.points = points
        n = w.n
        s = slice(1, n + 1)
        m = n + 1
        hJ, AJ, HJ = w.components(points, 2)
        H1J, H0J = w.profile_components(points, 2)

        self.h = hJ.value
        g = hJ.grad
        hs = hJ.hess
        self.dh = g[..., s]
        self.hdot = g[..., m]
        self.d2h = hs[..., s, s]
        self.dhdot = hs[..., s, m]
        self.hddot = hs[..., m, m]
        self.hinv = geo.checked_inverse(self.h)
        self.hinvdot = -np.einsum("...ik,...kl,...lj->...ij", self.hinv, self.hdot, self.hinv)
        self.dhinv = -np.einsum("...ia,...abk,...bj->...ijk", self.hinv, self.dh, self.hinv)

        fd = geo.PointFrameData(points[..., s], self.h, self.hinv, self.dh, self.d2h)
        self.frame = fd
        self.gamma = geo.christoffel(fd)
        low_dot = geo.christoffel_lowered(geo.PointFrameData(None, None, None, self.dhdot, None))
        self.gamma_dot = np.einsum("...kl,...lij->...kij", self.hinvdot, geo.christoffel_lowered(fd)) + np.einsum(
            "...kl,...lij->...kij", self.hinv, low_dot
        )
        self.ric_h = geo.ricci_from_riemann(geo.riemann_from_frame(fd))

        self.A = AJ.value
        self.dA = AJ.grad[..., s]
        self.Adot = AJ.grad[..., m]
        self.d2A = AJ.hess[..., s, s]
        self.dAdot = AJ.hess[..., s, m]

        self.H1 = H1J.value
        self.dH1 = H1J.grad[..., s]
        self.d2H1 = H1J.hess[..., s, s]
        self.H0 = H0J.value
        self.dH0 = H0J.grad[..., s]
        self.d2H0 = H0J.hess[..., s, s]

    # building blocks -----------------------------------------------------
    @property
    def F(self):
        return np.swapaxes(self.dA, -1, -2) - self.dA

    @property
    def dF(self):
        """``dF[..., i, j, k] = d_k F_ij``."""
        return np.einsum("...jik->...ijk", self.d2A) - self.d2A

    def laplacian(self, grad, hess):
        return geo.laplacian_arrays(self.hinv, self.gamma, grad, hess)

    def div(self, omega, domega):
        return geo.divergence_arrays(self.hinv, self.gamma, omega, domega)

    def div_two_form(self, T, dT):
        """``h^{jk} (d_k T_ij - Gamma^l_ki T_lj - Gamma^l_kj T_il)``, free index i."""
        cov = dT - np.einsum("...lki,...lj->...ijk", self.gamma, T) - np.einsum("...lkj,...il->...ijk", self.gamma, T)
        return np.einsum("...jk,...ijk->...i", self.hinv, cov)

    @property
    def lap_H0(self):
        return self.laplacian(self.dH0, self.d2H0)

    @property
    def lap_H1(self):
        return self.laplacian(self.dH1, self.d2H1)

    @property
    def FF(self):
        F = self.F
        return np.einsum("...ik,...jl,...kl,...ij->...", self.hinv, self.hinv, F, F)

    @property
    def hdot_hdot(self):
        """``hdot^{ij} hdot_ij`` with ``hdot^{ij} = d_-(h^{ij})``."""
        return np.einsum("...ij,...ij->...", self.hinvdot, self.hdot)

    @property
    def tr_hddot(self):
        return np.einsum("...ij,...ij->...", self.hinv, self.hddot)

    @property
    def tr_hdot(self):
        return np.einsum("...ij,...ij->...", self.hinv, self.hdot)

    @property
    def d_tr_hdot(self):
        """``d_i (h^{jk} hdot_jk)``."""
        return np.einsum("...jki,...jk->...i", self.dhinv, self.hdot) + np.einsum(
            "...jk,...jki->...i", self.hinv, self.dhdot
        )

    @property
    def div_hdot(self):
        """``nabla^j hdot_ij``."""
        return self.div_two_form(self.hdot, self.dhdot)

    @property
    def div_F(self):
        return self.div_two_form(self.F, self.dF)

    @property
    def A_up_dH1(self):
        return np.einsum("...ij,...j,...i->...", self.hinv, self.A, self.dH1)

    @property
    def div_A(self):
        return self.div(self.A, self.dA)

    @property
    def div_Adot(self):
        return self.div(self.Adot, self.dAdot)

    @property
    def A_sq(self):
        return np.einsum("...ij,...i,...j->...", self.hinv, self.A, self.A)

    def einstein_h(self, lam):
        return self.ric_h - lam * self.h

    @property
    def strong(self):
        """``S[..., k, i, j] = nabla_i (h^{kt} hdot_tj) - 2 Gammadot^k_ij``."""
        M = np.einsum("...kt,...tj->...kj", self.hinv, self.hdot)
        dM = np.einsum("...kti,...tj->...kji", self.dhinv, self.hdot) + np.einsum(
            "...kt,...tji->...kji", self.hinv, self.dhdot
        )  # dM[k, j, i] = d_i M^k_j
        cov = (
            np.einsum("...kji->...kij", dM)
            + np.einsum("...kil,...lj->...kij", self.gamma, M)
            - np.einsum("...lij,...kl->...kij", self.gamma, M)
        )
        return cov - 2.0 * self.gamma_dot


# ---------------------------------------------------------------------------
# Residual systems
# ---------------------------------------------------------------------------

DEFAULT_TOL = 1e-8


def _points(w, points):
    return w.sample() if points is None else np.asarray(points, dtype=float)


def _check_profile(w, lam, points, tol=1e-8):
    prof = extract_profile(w, points=points, tol=tol)
    if abs(prof.lambda_hat - lam) > tol:
        raise ProfileError(f"lambda_hat {prof.lambda_hat:.12g} differs from Lambda {lam:.12g}")
    return prof


def _require(w, flag, what):
    if not getattr(w, flag):
        raise WalkerFormError(f"precondition failed: {what}")


def einstein_residual(w, lam, points=None, tol=DEFAULT_TOL):
    """``sup |Ric_ab - Lambda g_ab|`` of the assembled metric."""
    points = _points(w, points)
    gJ = full_metric_jet(w, points, 2)
    fd = geo.frame_from_jet(points, gJ)
    ric = geo.ricci_from_riemann(geo.riemann_from_frame(fd))
    return make_report("einstein", points, ric - lam * fd.g, tol)


def residuals_general(w, lam, points=None, tol=DEFAULT_TOL):
    """The full system: eq4.8 (scalar), eq4.9 (vector), eq4.10 (scalar), eq4.11 (tensor)."""
    points = _points(w, points)
    _check_profile(w, lam, points)
    s = SliceData(w, points)
    e48 = (
        s.lap_H0
        - 0.5 * s.FF
        - 2.0 * s.A_up_dH1
        - s.H1 * s.div_A
        + 2.0 * lam * s.A_sq
        - 2.0 * s.div_Adot
        + 0.5 * s.hdot_hdot
        + s.tr_hddot
        + 0.5 * s.tr_hdot * s.H1
    )
    e49 = s.div_F + s.dH1 - 2.0 * lam * s.A + s.div_hdot - s.d_tr_hdot
    e410 = s.lap_H1 - 2.0 * lam * s.div_A + lam * s.tr_hdot
    e411 = s.einstein_h(lam)
    return [
        make_report("eq4.8", points, e48, tol),
        make_report("eq4.9", points, e49, tol),
        make_report("eq4.10", points, e410, tol),
        make_report("eq4.11", points, e411, tol),
    ]


def residuals_A0(w, lam, points=None, tol=DEFAULT_TOL):
    """The system for ``A = 0``: eq8 .. eq11."""
    _require(w, "A_is_zero", "A must vanish identically (syntactic check on every A_i)")
    points = _points(w, points)
    _check_profile(w, lam, points)
    s = SliceData(w, points)
    e8 = s.lap_H0 + 0.5 * s.hdot_hdot + s.tr_hddot + 0.5 * s.tr_hdot * s.H1
    e9 = s.dH1 + s.div_hdot - s.d_tr_hdot
    e10 = s.lap_H1 + lam * s.tr_hdot
    e11 = s.einstein_h(lam)
    return [make_report(k, points, v, tol) for k, v in (("eq8", e8), ("eq9", e9), ("eq10", e10), ("eq11", e11))]


def residuals_theorem2(w, lam, points=None, tol=DEFAULT_TOL):
    """The system for ``A = 0`` and ``H = Lambda xp^2 + xp H1``: eq12 .. eq15."""
    _require(w, "A_is_zero", "A must vanish identically (syntactic check on every A_i)")
    _require(w, "H0_is_zero", "H0 = H(xp=0) must vanish identically")
    points = _points(w, points)
    _check_profile(w, lam, points)
    s = SliceData(w, points)
    e12 = 0.5 * s.hdot_hdot + s.tr_hddot + 0.5 * s.tr_hdot * s.H1
    e13 = s.dH1 + s.div_hdot - s.d_tr_hdot
    e14 = s.lap_H1 + lam * s.tr_hdot
    e15 = s.einstein_h(lam)
    return [make_report(k, points, v, tol) for k, v in (("eq12", e12), ("eq13", e13), ("eq14", e14), ("eq15", e15))]


def residuals_ricciflat(w, points=None, tol=DEFAULT_TOL):
    """The Ricci-flat system eq4.8B, eq4.9B, eq4.11B for ``g = 2 dxp dxm + h``."""
    _require(w, "A_is_zero", "A must vanish identically (syntactic check on every A_i)")
    _require(w, "H_is_zero", "H must vanish identically (the system has no H-terms)")
    points = _points(w, points)
    s = SliceData(w, points)
    e8 = 0.5 * s.hdot_hdot + s.tr_hddot
    e9 = s.div_hdot - s.d_tr_hdot
    e11 = s.ric_h
    return [make_report(k, points, v, tol) for k, v in (("eq4.8B", e8), ("eq4.9B", e9), ("eq4.11B", e11))]


def residuals_main(w, lam, points=None, tol=DEFAULT_TOL):
    """The system for ``A = 0`` and ``H1 = 0``: eq16 .. eq19."""
    _require(w, "A_is_zero", "A must vanish identically (syntactic check on every A_i)")
    _require(w, "H1_is_zero", "H1 = dH/dxp at xp=0 must vanish identically")
    points = _points(w, points)
    _check_profile(w, lam, points)
    s = SliceData(w, points)
    e16 = s.lap_H0 + 0.5 * s.tr_hddot
    e17 = s.div_hdot
    e18 = s.tr_hdot
    e19 = s.einstein_h(lam)
    return [make_report(k, points, v, tol) for k, v in (("eq16", e16), ("eq17", e17), ("eq18", e18), ("eq19", e19))]


def residual_strong(w, points=None, tol=DEFAULT_TOL):
    """The tensor ``nabla_i (h^{kt} hdot_tj) - 2 Gammadot^k_ij`` for all i, j, k."""
    _require(w, "A_is_zero", "A must vanish identically (syntactic check on every A_i)")
    points = _points(w, points)
    s = SliceData(w, points)
    return make_report("eq4.9strong", points, s.strong, tol)


def strong_trace(w, points):
    """Contraction ``k = i`` of the strong tensor, a covector in ``j``."""
    s = SliceData(w, np.asarray(points, dtype=float))
    return np.einsum("...iij->...j", s.strong)


SYSTEMS = {
    "full": residuals_general,
    "a0": residuals_A0,
    "theorem2": residuals_theorem2,
    "main": residuals_main,
}


def applicable_system(w, lam):
    """Most specialized residual system whose structural preconditions hold.

    Returns one of ``"ricciflat"``, ``"main"``, ``"theorem2"``, ``"a0"`` or
    ``"full"``, decided syntactically from ``A``, ``H`` and ``Lambda``.
    """
    if not w.A_is_zero:
        return "full"
    if w.H_is_zero and lam == 0:
        return "ricciflat"
    if w.H1_is_zero and lam != 0:
        return "main"
    if w.H0_is_zero:
        return "theorem2"
    return "a0"


def run_system(w, lam, name, points=None, tol=DEFAULT_TOL):
    """Evaluate the named system (``"auto"`` picks :func:`applicable_system`)."""
    if name == "auto":
        name = applicable_system(w, lam)
    if name == "ricciflat":
        return residuals_ricciflat(w, points, tol)
    return SYSTEMS[name](w, lam, points, tol)


# ---------------------------------------------------------------------------
# Curvature decomposition
# ---------------------------------------------------------------------------

@dataclass
class CurvatureDecomposition:
    """Null-frame parts of the curvature tensor at a batch of points.

    ``R0``, ``P`` and ``T`` are stored with the first index lowered by ``h``:
    ``R0[..., a, b, k, l] = h(R(X_k, X_l) X_b, X_a)``,
    ``P[..., k, a, b] = h(P(X_k) X_b, X_a)`` and ``T[..., k, l] = h(T(X_k), X_l)``.
    ``v`` holds the components of ``v`` in the basis ``X_i``.
    """

    lam: np.ndarray
    v: np.ndarray
    R0: np.ndarray
    P: np.ndarray
    T: np.ndarray
    h: np.ndarray
    ricci_error: float = 0.0
    checks: dict = field(default_factory=dict)


def null_frame(w, points):
    """Columns ``p, X_1..X_n, q`` in coordinate components, shape ``(P, N, N)``."""
    h, A, H = w.components(points, 0)
    n = w.n
    shape = np.asarray(points).shape[:-1]
    E = np.zeros(shape + (n + 2, n + 2))
    E[..., 0, 0] = 1.0
    for i in range(n):
        E[..., i + 1, i + 1] = 1.0
        E[..., 0, i + 1] = -A.value[..., i]
    E[..., n + 1, n + 1] = 1.0
    E[..., 0, n + 1] = -0.5 * H.value
    return E, h.value


def curvature_decomposition(w, lam, points, tol=1e-8):
    """Read ``(lambda, v, R0, P, T)`` off the Riemann tensor and verify Ricci."""
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    if single:
        points = points[None, :]
    n = w.n
    q = n + 1
    sp = slice(1, n + 1)
    gJ = full_metric_jet(w, points, 2)
    fd = geo.frame_from_jet(points, gJ)
    R = geo.riemann_from_frame(fd)
    ric = geo.ricci_from_riemann(R)
    E, h = null_frame(w, points)
    Einv = np.linalg.inv(E)
    Rf = np.einsum("...xa,...abcd,...bB,...cC,...dD->...xBCD", Einv, R, E, E, E)

    lam_part = Rf[..., 0, 0, 0, q]
    v = -Rf[..., sp, q, 0, q]
    R0e = Rf[..., sp, sp, sp, sp]
    Pe = np.einsum("...ijk->...kij", Rf[..., sp, sp, sp, q])  # Pe[k, i, j] = (P(X_k))^i_j
    Te = -Rf[..., sp, q, sp, q]  # Te[i, k] = T(X_k)^i

    R0 = np.einsum("...ai,...ibkl->...abkl", h, R0e)
    P = np.einsum("...ai,...kib->...kab", h, Pe)
    T = np.einsum("...li,...ik->...kl", h, Te)

    ric_f = np.einsum("...ab,...aA,...bB->...AB", ric, E, E)
    hinv = np.linalg.inv(h)
    tr = np.einsum("...kji,...ik->...j", Pe, hinv)
    checks = {
        "Ric(p,q)": np.abs(ric_f[..., 0, q] + lam_part).max(),
        "Ric(x,y)": np.abs(ric_f[..., sp, sp] - np.einsum("...ilki->...kl", R0e)).max(),
        "Ric(x,q)": np.abs(ric_f[..., sp, q] - np.einsum("...kj,...j->...k", h, tr - v)).max(),
        "Ric(q,q)": np.abs(ric_f[..., q, q] - np.einsum("...kk->...", Te)).max(),
        "R(p,x)": np.abs(Rf[..., :, :, 0, :q]).max(),
        "g(v,x)": np.abs(Rf[..., 0, 0, sp, q] - np.einsum("...kj,...j->...k", h, v)).max(),
        "x-part of R(x,y)": np.abs(
            -Rf[..., sp, q, sp, sp] - (np.einsum("...lik->...ikl", Pe) - np.einsum("...kil->...ikl", Pe))
        ).max(),
    }
    scale = max(1.0, float(np.abs(ric).max()))
    err = max(checks.values()) / scale
    if err > tol:
        worst = max(checks, key=checks.get)
        raise DecompositionError(f"curvature decomposition mismatch in {worst}: {checks[worst]:.3g}")
    dec = CurvatureDecomposition(lam_part, v, R0, P, T, h, err, {k: float(x) for k, x in checks.items()})
    if single:
        dec = CurvatureDecomposition(lam_part[0], v[0], R0[0], P[0], T[0], h[0], err, dec.checks)
    return dec


def tric(dec, h_at_point=None):
    """``Ric~(P) = P^j_{ik} g^{ik} X_j`` as components in the basis ``X_j``."""
    h = dec.h if h_at_point is None else np.asarray(h_at_point, dtype=float)
    hinv = np.linalg.inv(h)
    Pe = np.einsum("...ja,...kab->...kjb", hinv, dec.P)  # raise the first matrix index
    return np.einsum("...ijk,...ik->...j", Pe, hinv)


def v_formula(w, lam, points):
    """Expected ``v^j = -(1/2 d_i H1 - Lambda A_i) h^{ij}``."""
    s = SliceData(w, np.asarray(points, dtype=float))
    return -np.einsum("...i,...ij->...j", 0.5 * s.dH1 - lam * s.A, s.hinv)
