"""Squared-exponential kernel and its exact mixed derivatives.

Covariances between derivative values of a random field reduce to mixed
partial derivatives of the kernel,

    Cov[Y^(m)(x), Y^(m2)(x')] = d^|m|/dx^m  d^|m2|/dx'^m2  k(x, x'),

so everything downstream only needs k and its derivatives up to total
order 4 (the worst case is a Laplacian-to-Laplacian covariance in 2D).
For the squared-exponential kernel these derivatives are closed-form
polynomials in h = (x - x') / theta^2 times k itself.

Conventions: a multi-index is a tuple of d non-negative ints; ``m``
differentiates with respect to the first argument, ``m2`` with respect
to the second.  Each derivative on the second argument flips one sign,
which collapses to an overall factor (-1)^|m| on the all-first-argument
polynomial form.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SqExpKernel",
    "DimensionMismatchError",
    "UnsupportedOrderError",
    "evaluate",
    "deriv",
    "deriv_fd",
    "total_order",
]

MAX_TOTAL_ORDER = 4


class DimensionMismatchError(ValueError):
    """A point or multi-index does not match the kernel dimension."""


class UnsupportedOrderError(ValueError):
    """Requested derivative exceeds the analytic coverage (total order 4)."""


@dataclass(frozen=True)
class SqExpKernel:
    """Isotropic squared-exponential kernel k(x,x') = sigma2*exp(-|x-x'|^2/(2 theta^2)).

    Parameters
    ----------
    sigma2 : float
        Process variance, > 0.
    theta : float
        Lengthscale, > 0.
    dim : int
        Spatial dimension d, >= 1.
    """

    sigma2: float
    theta: float
    dim: int

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not (np.isfinite(self.theta) and self.theta > 0):
            raise ValueError(f"theta must be positive, got {self.theta}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")


def total_order(m):
    """Total derivative order |m| of a multi-index."""
    return int(sum(m))


def _as_point(k, x, name):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (k.dim,):
        raise DimensionMismatchError(
            f"{name} has shape {x.shape}, kernel dim is {k.dim}"
        )
    return x


def _check_multi_index(k, m, name):
    m = tuple(int(v) for v in np.atleast_1d(m))
    if len(m) != k.dim:
        raise DimensionMismatchError(
            f"{name} has length {len(m)}, kernel dim is {k.dim}"
        )
    if any(v < 0 for v in m):
        raise ValueError(f"{name} has negative orders: {m}")
    return m


def evaluate(k, x, x2):
    """Kernel value sigma2 * exp(-||x - x2||^2 / (2 theta^2))."""
    x = _as_point(k, x, "x")
    x2 = _as_point(k, x2, "x2")
    d2 = float(np.dot(x - x2, x - x2))
    return k.sigma2 * np.exp(-d2 / (2.0 * k.theta ** 2))


def _bracket(idx, h, it2):
    """Polynomial factor for the order-|idx| derivative, all on one argument.

    ``idx`` lists one coordinate per unit of derivative (length 1..4), ``h``
    is (x - x2)/theta^2 and ``it2`` is 1/theta^2.  The order-4 pair set (6
    elements) and the pair partitions (3 elements) are written out in full.
    """
    t = len(idx)
    if t == 1:
        return h[idx[0]]
    if t == 2:
        i, j = idx
        return h[i] * h[j] - it2 * (i == j)
    if t == 3:
        i, j, l = idx
        return h[i] * h[j] * h[l] - it2 * (
            h[i] * (j == l) + h[j] * (i == l) + h[l] * (i == j)
        )
    i, j, l, o = idx
    pairs = (
        h[i] * h[j] * (l == o)
        + h[i] * h[l] * (j == o)
        + h[i] * h[o] * (j == l)
        + h[j] * h[l] * (i == o)
        + h[j] * h[o] * (i == l)
        + h[l] * h[o] * (i == j)
    )
    partitions = (i == j) * (l == o) + (i == l) * (j == o) + (i == o) * (j == l)
    return (
        h[i] * h[j] * h[l] * h[o] - it2 * pairs + it2 * it2 * partitions
    )


def deriv(k, x, x2, m, m2):
    """Mixed kernel derivative d^|m|/dx^m d^|m2|/dx2^m2 k(x, x2).

    Closed form up to total order |m| + |m2| <= 4; order 0 delegates to
    :func:`evaluate`.  Higher orders raise :class:`UnsupportedOrderError`
    rather than falling back to a lossy approximation.
    """
    x = _as_point(k, x, "x")
    x2 = _as_point(k, x2, "x2")
    m = _check_multi_index(k, m, "m")
    m2 = _check_multi_index(k, m2, "m2")
    t = total_order(m) + total_order(m2)
    if t > MAX_TOTAL_ORDER:
        raise UnsupportedOrderError(
            f"total derivative order {t} exceeds analytic coverage "
            f"({MAX_TOTAL_ORDER}); m={m}, m2={m2}"
        )
    base = k.sigma2 * np.exp(
        -float(np.dot(x - x2, x - x2)) / (2.0 * k.theta ** 2)
    )
    if t == 0:
        return base
    h = (x - x2) / k.theta ** 2
    idx = []
    for c in range(k.dim):
        idx.extend([c] * (m[c] + m2[c]))
    sign = -1.0 if total_order(m) % 2 else 1.0
    return sign * _bracket(idx, h, 1.0 / k.theta ** 2) * base


def deriv_fd(k, x, x2, m, m2, step=None):
    """Finite-difference approximation of the same mixed derivative.

    Built by nesting one two-point central stencil per unit of derivative
    order (2^(|m|+|m2|) kernel evaluations).  ``step`` defaults to
    1e-3 * theta.  The arithmetic runs in numpy's extended precision
    (longdouble) so that at total order 4 the subtractive cancellation of
    nearly equal kernel values stays below the truncation error; the
    returned value is a float.  Choosing a step small enough that
    cancellation dominates even then is the caller's problem.
    """
    x = _as_point(k, x, "x")
    x2 = _as_point(k, x2, "x2")
    m = _check_multi_index(k, m, "m")
    m2 = _check_multi_index(k, m2, "m2")
    if step is None:
        step = 1e-3 * k.theta
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    ld = np.longdouble
    step = ld(step)
    sigma2 = ld(k.sigma2)
    two_theta2 = ld(2.0) * ld(k.theta) ** 2
    units = []
    for c in range(k.dim):
        units.extend([(0, c)] * m[c])
        units.extend([(1, c)] * m2[c])

    def rec(xa, xb, rem):
        if not rem:
            d2 = np.dot(xa - xb, xa - xb)
            return sigma2 * np.exp(-d2 / two_theta2)
        arg, c = rem[0]
        rest = rem[1:]
        if arg == 0:
            xp = xa.copy()
            xp[c] += step
            xm = xa.copy()
            xm[c] -= step
            return (rec(xp, xb, rest) - rec(xm, xb, rest)) / (ld(2.0) * step)
        xp = xb.copy()
        xp[c] += step
        xm = xb.copy()
        xm[c] -= step
        return (rec(xa, xp, rest) - rec(xa, xm, rest)) / (ld(2.0) * step)

    return float(rec(x.astype(ld), x2.astype(ld), units))
