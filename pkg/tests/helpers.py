"""Shared test helpers: random expressions and a finite-difference oracle."""

import numpy as np

VARIABLES = ("u", "v", "w")


def random_expression(rng, depth=3):
    """Random expression source text over ``u, v, w``, defined on ``[-1, 1]^3``.

    Divisions and the functions ``ln`` and ``sqrt`` are wrapped so that their
    arguments stay away from the singular set.
    """
    if depth == 0 or rng.random() < 0.15:
        if rng.random() < 0.7:
            return VARIABLES[rng.integers(3)]
        return f"{rng.uniform(-2, 2):.3f}"
    a = random_expression(rng, depth - 1)
    kind = rng.integers(10)
    if kind == 0:
        return f"({a})+({random_expression(rng, depth - 1)})"
    if kind == 1:
        return f"({a})-({random_expression(rng, depth - 1)})"
    if kind == 2:
        return f"({a})*({random_expression(rng, depth - 1)})"
    if kind == 3:
        return f"({a})/(2+({random_expression(rng, depth - 1)})^2)"
    if kind == 4:
        return f"({a})^{int(rng.integers(2, 4))}"
    if kind == 5:
        return f"-({a})"
    if kind == 6:
        return f"exp(0.5*sin({a}))"
    if kind == 7:
        return f"ln(1.5+sin({a}))"
    if kind == 8:
        return f"sqrt(2+cos({a}))"
    return f"{'sin' if rng.random() < 0.5 else 'cos'}({a})"


def fd_gradient_hessian(f, p, h=1e-3):
    """Central differences with one Richardson step (fourth order in ``h``)."""
    p = np.asarray(p, dtype=float)
    n = len(p)

    def grad(step):
        e = np.eye(n) * step
        return np.array([(f(p + e[i]) - f(p - e[i])) / (2 * step) for i in range(n)])

    def hess(step):
        e = np.eye(n) * step
        H = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                H[i, j] = (f(p + e[i] + e[j]) - f(p + e[i] - e[j]) - f(p - e[i] + e[j]) + f(p - e[i] - e[j])) / (
                    4 * step * step
                )
        return H

    g = (4 * grad(h / 2) - grad(h)) / 3
    H = (4 * hess(h / 2) - hess(h)) / 3
    return g, H


def relative_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))
