"""Forward-mode jets: truncated multivariate Taylor polynomials.

A :class:`Jet` carries, for every entry of an array-valued quantity, the
Taylor coefficients of that entry in ``dim`` active variables up to total
degree ``order``.  Order 2 is the workhorse (value, gradient and an exactly
symmetric Hessian); higher orders are used by the coordinate flows, whose
pulled-back metrics need one more derivative than the metric itself.

Coefficients are stored in a packed monomial basis along the last axis, so a
batch of 100 sample points, or a batch of 100 matrices, is one ``Jet`` and
every arithmetic operation is a handful of vectorized numpy calls.

The stored coefficient of the monomial ``x^alpha`` is ``d^alpha f / alpha!``.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


class JetError(ValueError):
    """Raised for invalid jet operations (dimension or order mismatch)."""


class JetDomainError(ArithmeticError):
    """Raised when a function is applied outside its real domain."""


class _Basis:
    """Monomial basis of total degree <= order in ``dim`` variables."""

    def __init__(self, dim, order):
        self.dim = dim
        self.order = order
        exps = []
        for deg in range(order + 1):
            # all compositions of deg into dim parts, in a fixed order
            for combo in itertools.combinations_with_replacement(range(dim), deg):
                e = [0] * dim
                for i in combo:
                    e[i] += 1
                exps.append(tuple(e))
        self.exps = exps
        self.index = {e: k for k, e in enumerate(exps)}
        self.size = len(exps)
        self.degree = np.array([sum(e) for e in exps])
        self.factorial = np.array(
            [math.prod(math.factorial(a) for a in e) for e in exps], dtype=float
        )

        left, right, target = [], [], []
        for i, a in enumerate(exps):
            for j, b in enumerate(exps):
                if sum(a) + sum(b) <= order:
                    left.append(i)
                    right.append(j)
                    target.append(self.index[tuple(x + y for x, y in zip(a, b))])
        self.mul_left = np.array(left)
        self.mul_right = np.array(right)
        scatter = np.zeros((len(target), self.size))
        scatter[np.arange(len(target)), target] = 1.0
        self.scatter = scatter

        # positions of linear and quadratic monomials
        self.linear = np.array([self.index[_unit(dim, i)] for i in range(dim)]) if order >= 1 else None
        if order >= 2:
            quad = np.empty((dim, dim), dtype=int)
            qfac = np.empty((dim, dim))
            for i in range(dim):
                for j in range(dim):
                    e = list(_unit(dim, i))
                    e[j] += 1
                    quad[i, j] = self.index[tuple(e)]
                    qfac[i, j] = 2.0 if i == j else 1.0
            self.quad = quad
            self.quad_factor = qfac

    def derivative_table(self, i):
        lower = basis(self.dim, self.order - 1)
        src, dst, fac = [], [], []
        for k, e in enumerate(self.exps):
            if e[i] >= 1 and sum(e) <= self.order:
                f = list(e)
                f[i] -= 1
                src.append(k)
                dst.append(lower.index[tuple(f)])
                fac.append(float(e[i]))
        return np.array(src), np.array(dst), np.array(fac)


def _unit(dim, i):
    e = [0] * dim
    e[i] = 1
    return tuple(e)


@lru_cache(maxsize=None)
def basis(dim, order):
    """Return the cached monomial basis for ``(dim, order)``."""
    if dim < 1:
        raise JetError(f"jet dimension must be positive, got {dim}")
    if order < 0:
        raise JetError(f"jet order must be non-negative, got {order}")
    return _Basis(dim, order)


@lru_cache(maxsize=None)
def _derivative_table(dim, order, i):
    return basis(dim, order).derivative_table(i)


class Jet:
    """Array of truncated Taylor polynomials in ``dim`` variables.

    ``coef`` has shape ``value_shape + (M,)`` where ``M`` is the size of the
    monomial basis.  Python scalars and numpy arrays mix freely with jets and
    are treated as constants.
    """

    __slots__ = ("coef", "dim", "order")
    __array_ufunc__ = None  # make ndarray (op) Jet defer to the Jet methods

    def __init__(self, coef, dim, order):
        coef = np.asarray(coef, dtype=float)
        b = basis(dim, order)
        if coef.shape[-1:] != (b.size,):
            raise JetError(f"coefficient axis has length {coef.shape[-1:]}, expected {b.size}")
        self.coef = coef
        self.dim = dim
        self.order = order

    # -- construction -----------------------------------------------------
    @classmethod
    def constant(cls, value, dim, order=2):
        """Lift a scalar or array to a jet with zero derivatives."""
        value = np.asarray(value, dtype=float)
        coef = np.zeros(value.shape + (basis(dim, order).size,))
        coef[..., 0] = value
        return cls(coef, dim, order)

    @classmethod
    def variable(cls, value, index, dim, order=2):
        """Coordinate function ``x_index`` evaluated at ``value``."""
        if not 0 <= index < dim:
            raise JetError(f"active index {index} out of range for dimension {dim}")
        jet = cls.constant(value, dim, order)
        if order >= 1:
            jet.coef[..., basis(dim, order).linear[index]] = 1.0
        return jet

    # -- read access --------------------------------------------------------
    @property
    def shape(self):
        return self.coef.shape[:-1]

    @property
    def ndim(self):
        return self.coef.ndim - 1

    @property
    def value(self):
        return self.coef[..., 0]

    @property
    def grad(self):
        """First derivatives, trailing axis of length ``dim``."""
        if self.order < 1:
            raise JetError("order-0 jet has no gradient")
        return self.coef[..., basis(self.dim, self.order).linear]

    @property
    def hess(self):
        """Second derivatives, trailing axes ``(dim, dim)``; exactly symmetric."""
        if self.order < 2:
            raise JetError("jet of order < 2 has no Hessian")
        b = basis(self.dim, self.order)
        return self.coef[..., b.quad] * b.quad_factor

    def partial(self, alpha):
        """Mixed partial derivative ``d^alpha`` of the value, ``alpha`` a multi-index."""
        alpha = tuple(int(a) for a in alpha)
        b = basis(self.dim, self.order)
        if sum(alpha) > self.order:
            raise JetError(f"derivative of degree {sum(alpha)} exceeds jet order {self.order}")
        k = b.index[alpha]
        return self.coef[..., k] * b.factorial[k]

    def derivative(self, i):
        """Jet of ``d f / d x_i``, one order lower."""
        if self.order < 1:
            raise JetError("cannot differentiate an order-0 jet")
        src, dst, fac = _derivative_table(self.dim, self.order, i)
        out = np.zeros(self.shape + (basis(self.dim, self.order - 1).size,))
        out[..., dst] = self.coef[..., src] * fac
        return Jet(out, self.dim, self.order - 1)

    def truncate(self, order):
        if order > self.order:
            raise JetError(f"cannot raise jet order from {self.order} to {order}")
        if order == self.order:
            return self
        return Jet(self.coef[..., : basis(self.dim, order).size], self.dim, order)

    # -- array plumbing -----------------------------------------------------
    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return Jet(self.coef[key + (slice(None),)], self.dim, self.order)

    def __setitem__(self, key, val):
        if not isinstance(key, tuple):
            key = (key,)
        self.coef[key + (slice(None),)] = self._coef_of(val)

    def __len__(self):
        return self.shape[0]

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Jet(self.coef.reshape(tuple(shape) + (self.coef.shape[-1],)), self.dim, self.order)

    def _axis(self, axis):
        return axis if axis >= 0 else axis - 1

    def sum(self, axis=None):
        if axis is None:
            axes = tuple(range(self.ndim))
        elif isinstance(axis, tuple):
            axes = tuple(self._axis(a) for a in axis)
        else:
            axes = (self._axis(axis),)
        return Jet(self.coef.sum(axis=axes), self.dim, self.order)

    def swapaxes(self, a, b):
        return Jet(np.swapaxes(self.coef, self._axis(a), self._axis(b)), self.dim, self.order)

    @property
    def mT(self):
        """Swap the last two value axes (matrix transpose)."""
        return self.swapaxes(-1, -2)

    def copy(self):
        return Jet(self.coef.copy(), self.dim, self.order)

    def __repr__(self):
        return f"Jet(dim={self.dim}, order={self.order}, shape={self.shape}, value={self.value!r})"

    # -- arithmetic ---------------------------------------------------------
    def _check(self, other):
        if other.dim != self.dim:
            raise JetError(f"jet dimension mismatch: {self.dim} vs {other.dim}")
        if other.order != self.order:
            raise JetError(f"jet order mismatch: {self.order} vs {other.order}")

    def _coef_of(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return other.coef
        arr = np.asarray(other, dtype=float)
        coef = np.zeros(arr.shape + (self.coef.shape[-1],))
        coef[..., 0] = arr
        return coef

    def __neg__(self):
        return Jet(-self.coef, self.dim, self.order)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return Jet(self.coef + other.coef, self.dim, self.order)
        arr = np.asarray(other, dtype=float)
        shape = np.broadcast_shapes(self.shape, arr.shape)
        coef = np.broadcast_to(self.coef, shape + self.coef.shape[-1:]).copy()
        coef[..., 0] += arr
        return Jet(coef, self.dim, self.order)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            b = basis(self.dim, self.order)
            prod = self.coef[..., b.mul_left] * other.coef[..., b.mul_right]
            return Jet(prod @ b.scatter, self.dim, self.order)
        arr = np.asarray(other, dtype=float)
        return Jet(self.coef * arr[..., None], self.dim, self.order)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        arr = np.asarray(other, dtype=float)
        if np.any(arr == 0):
            raise JetDomainError("division by zero")
        return Jet(self.coef / arr[..., None], self.dim, self.order)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, p):
        if isinstance(p, Jet):
            raise JetError("jet exponents are not supported; use exp(b*log(a))")
        return power(self, float(p))

    def reciprocal(self):
        return power(self, -1.0)

    # -- Taylor series of a scalar function -------------------------------
    def _apply_series(self, derivs):
        """Return ``sum_k derivs[k] / k! * (self - value)^k``.

        ``derivs`` is a list of ``order + 1`` arrays holding the successive
        derivatives of the scalar function at ``self.value``.
        """
        delta = self.coef.copy()
        delta[..., 0] = 0.0
        delta = Jet(delta, self.dim, self.order)
        out = np.zeros_like(self.coef)
        out[..., 0] = derivs[0]
        power_k = delta
        for k in range(1, self.order + 1):
            out += (derivs[k] / math.factorial(k))[..., None] * power_k.coef
            if k < self.order:
                power_k = power_k * delta
        return Jet(out, self.dim, self.order)


# ---------------------------------------------------------------------------
# Elementary functions
# ---------------------------------------------------------------------------

def _value(a):
    return a.value if isinstance(a, Jet) else np.asarray(a, dtype=float)


def exp(a):
    if not isinstance(a, Jet):
        return np.exp(a)
    e = np.exp(a.value)
    return a._apply_series([e] * (a.order + 1))


def log(a):
    v = _value(a)
    if np.any(v <= 0):
        raise JetDomainError(f"ln of non-positive value (min {np.min(v):.6g})")
    if not isinstance(a, Jet):
        return np.log(a)
    derivs = [np.log(v)]
    for k in range(1, a.order + 1):
        derivs.append((-1.0) ** (k + 1) * math.factorial(k - 1) / v**k)
    return a._apply_series(derivs)


def sin(a):
    if not isinstance(a, Jet):
        return np.sin(a)
    s, c = np.sin(a.value), np.cos(a.value)
    cycle = [s, c, -s, -c]
    return a._apply_series([cycle[k % 4] for k in range(a.order + 1)])


def cos(a):
    if not isinstance(a, Jet):
        return np.cos(a)
    s, c = np.sin(a.value), np.cos(a.value)
    cycle = [c, -s, -c, s]
    return a._apply_series([cycle[k % 4] for k in range(a.order + 1)])


def sqrt(a):
    v = _value(a)
    if np.any(v <= 0):
        raise JetDomainError(f"sqrt of non-positive value (min {np.min(v):.6g})")
    return power(a, 0.5)


def power(a, p):
    """``a**p`` for a constant real exponent ``p``."""
    p = float(p)
    v = _value(a)
    is_int = p.is_integer()
    if not is_int and np.any(v <= 0):
        raise JetDomainError(f"non-integer power {p} of non-positive value (min {np.min(v):.6g})")
    if is_int and p < 0 and np.any(v == 0):
        raise JetDomainError(f"negative power {p} of zero")
    if not isinstance(a, Jet):
        return np.power(v, p)
    if p == 0.0:
        return Jet.constant(np.ones(a.shape), a.dim, a.order)
    if p == 1.0:
        return a
    if p == 2.0:
        return a * a
    derivs = []
    falling = 1.0
    for k in range(a.order + 1):
        if falling == 0.0:
            derivs.append(np.zeros_like(v))
        else:
            derivs.append(falling * np.power(v, p - k))
        falling *= p - k
    return a._apply_series(derivs)


# ---------------------------------------------------------------------------
# Seeding and batched linear algebra
# ---------------------------------------------------------------------------

def seed(point, active_index, order=2):
    """Jet of the coordinate ``active_index`` at ``point`` (last axis = coordinates)."""
    point = np.asarray(point, dtype=float)
    dim = point.shape[-1]
    return Jet.variable(point[..., active_index], active_index, dim, order)


def seeds(points, order=2, active=None):
    """All coordinate jets at ``points``; inactive coordinates become constants.

    ``active`` lists which coordinates are active variables (default: all).
    The jet dimension equals the number of active coordinates.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[-1]
    active = list(range(n)) if active is None else list(active)
    dim = len(active)
    out = []
    for i in range(n):
        if i in active:
            out.append(Jet.variable(points[..., i], active.index(i), dim, order))
        else:
            out.append(Jet.constant(points[..., i], dim, order))
    return out


def stack(items, axis=0):
    """Stack jets (and constants) along a new value axis."""
    ref = next((x for x in items if isinstance(x, Jet)), None)
    if ref is None:
        return np.stack([np.asarray(x, dtype=float) for x in items], axis=axis)
    coefs = [ref._coef_of(x) for x in items]
    shape = np.broadcast_shapes(*[c.shape for c in coefs])
    coefs = [np.broadcast_to(c, shape) for c in coefs]
    ax = axis if axis >= 0 else axis - 1
    return Jet(np.stack(coefs, axis=ax), ref.dim, ref.order)


def einsum(subscripts, a, b):
    """Bilinear ``np.einsum`` where either operand may be a jet.

    Subscripts refer to value axes only and must not use ``...``; leading
    batch axes shared by both operands are handled implicitly.
    """
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    if isinstance(a, Jet) and isinstance(b, Jet):
        a._check(b)
        bas = basis(a.dim, a.order)
        ga = a.coef[..., bas.mul_left]
        gb = b.coef[..., bas.mul_right]
        r = np.einsum(f"...{sa}Z,...{sb}Z->...{out}Z", ga, gb)
        return Jet(r @ bas.scatter, a.dim, a.order)
    if isinstance(a, Jet):
        r = np.einsum(f"...{sa}Z,...{sb}->...{out}Z", a.coef, np.asarray(b, dtype=float))
        return Jet(r, a.dim, a.order)
    if isinstance(b, Jet):
        r = np.einsum(f"...{sa},...{sb}Z->...{out}Z", np.asarray(a, dtype=float), b.coef)
        return Jet(r, b.dim, b.order)
    return np.einsum(f"...{sa},...{sb}->...{out}", a, b)


def matmul(a, b):
    """Matrix product over the last two value axes."""
    return einsum("ij,jk->ik", a, b)


def inv(a):
    """Inverse of a batch of square matrix jets by the Neumann series.

    With ``a = a0 + d`` (``d`` without constant term),
    ``a^{-1} = a0^{-1} sum_k (-d a0^{-1})^k``, exact through the jet order.
    """
    if not isinstance(a, Jet):
        return np.linalg.inv(a)
    a0inv = np.linalg.inv(a.value)
    d = a.coef.copy()
    d[..., 0] = 0.0
    neg = -einsum("ij,jk->ik", Jet(d, a.dim, a.order), a0inv)
    n = a.shape[-1]
    eye = np.broadcast_to(np.eye(n), a.shape)
    series = Jet.constant(eye, a.dim, a.order)
    for _ in range(a.order):
        series = matmul(neg, series) + eye
    return einsum("ij,jk->ik", a0inv, series)


def compose(outer, inner):
    """Substitute ``inner`` for the variables of ``outer``.

    ``outer`` is a jet in ``m`` variables expanded at the point ``inner.value``;
    ``inner`` is a jet whose last value axis has length ``m`` and whose
    leading value axes match the leading value axes of ``outer``.
    The result is a jet in the variables of ``inner``.
    """
    m = outer.dim
    if inner.shape[-1] != m:
        raise JetError(f"inner jet has {inner.shape[-1]} components, outer expects {m}")
    if outer.order < inner.order:
        raise JetError("outer jet order must be at least the inner jet order")
    k = inner.order
    ob = basis(m, outer.order)
    ib = basis(inner.dim, k)
    batch = inner.shape[:-1]
    delta = inner.coef.copy()
    delta[..., 0] = 0.0
    comps = [Jet(delta[..., j, :], inner.dim, k) for j in range(m)]
    n_out = basis(m, k).size
    monos = np.zeros(batch + (n_out, ib.size))
    monos[..., 0, 0] = 1.0
    cache = {ob.exps[0]: Jet(monos[..., 0, :], inner.dim, k)}
    for idx in range(1, n_out):
        e = ob.exps[idx]
        j = next(t for t, x in enumerate(e) if x > 0)
        prev = list(e)
        prev[j] -= 1
        mono = cache[tuple(prev)] * comps[j]
        cache[e] = mono
        monos[..., idx, :] = mono.coef
    extra = outer.shape[len(batch):]
    oc = outer.coef[..., :n_out].reshape(batch + (-1, n_out))
    r = np.einsum("...ek,...kl->...el", oc, monos)
    return Jet(r.reshape(batch + extra + (ib.size,)), inner.dim, k)


def invert_map(F, x0):
    """Jet of the inverse of a map ``y = F(x)`` expanded at ``y0 = F.value``.

    ``F`` is a jet in ``m`` variables expanded at ``x0`` whose last value axis
    has length ``m``.  The result ``G`` is a jet in the ``m`` variables ``y``
    with value ``x0`` and ``G(F(x)) = x`` through the jet order.  Computed by
    Newton iteration on the truncated series; every sweep fixes at least one
    more order.
    """
    m = F.dim
    if F.shape[-1] != m:
        raise JetError(f"map has {F.shape[-1]} components but {m} variables")
    k = F.order
    if k < 1:
        raise JetError("need a jet of order >= 1 to invert a map")
    y0 = F.value
    Jinv = np.linalg.inv(F.grad)
    Y = stack(seeds(y0, k), axis=-1)
    G = Jet.constant(np.broadcast_to(np.asarray(x0, dtype=float), F.shape), m, k) + einsum("ij,j->i", Jinv, Y - y0)
    for _ in range(k):
        R = compose(F, G) - Y
        G = G - einsum("ij,j->i", Jinv, R)
    return G


def solve(a, b):
    """``a^{-1} b`` for a batch of square matrix jets ``a`` and vector jets ``b``.

    Uses the same Neumann expansion as :func:`inv` but only with
    matrix-vector products.
    """
    if not isinstance(a, Jet):
        a0inv = np.linalg.inv(np.asarray(a, dtype=float))
        return einsum("ij,j->i", a0inv, b)
    a0inv = np.linalg.inv(a.value)
    d = a.coef.copy()
    d[..., 0] = 0.0
    dj = Jet(d, a.dim, a.order)
    if not isinstance(b, Jet):
        b = Jet.constant(np.broadcast_to(np.asarray(b, dtype=float), a.shape[:-1]), a.dim, a.order)
    x = einsum("ij,j->i", a0inv, b)
    for _ in range(a.order):
        x = einsum("ij,j->i", a0inv, b - einsum("ij,j->i", dj, x))
    return x


def embed(J, dim, positions):
    """Re-express a jet in ``dim`` variables; variable ``k`` of ``J`` becomes ``positions[k]``.

    The new variables not listed in ``positions`` do not appear.
    """
    small = basis(J.dim, J.order)
    big = basis(dim, J.order)
    idx = []
    for e in small.exps:
        f = [0] * dim
        for k, p in enumerate(positions):
            f[p] = e[k]
        idx.append(big.index[tuple(f)])
    coef = np.zeros(J.shape + (big.size,))
    coef[..., idx] = J.coef
    return Jet(coef, dim, J.order)
