"""Matrix kernels, special functions and seeded sampling.

Dense linear algebra is delegated to numpy (LAPACK Hessenberg-QR for
eigenvalues, SVD for the 2-norm).  The incomplete gamma routines are
implemented here (series / Lentz continued fraction) so their accuracy is
under our control; the error function comes from the standard library.
"""
from __future__ import annotations

import math

import numpy as np

_EPS = 1e-16
_FPMIN = 1e-300
_MAX_ITER = 10_000


class RngStream:
    """Single-owner seeded random stream.

    Gaussian draws use numpy's PCG64 bit generator with the ziggurat normal
    sampler, which is platform independent for a given seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, mean=0.0, variance=0.0, size=None):
        variance = np.asarray(variance, dtype=float)
        if np.any(variance < 0):
            raise ValueError("negative variance")
        return self._gen.normal(mean, np.sqrt(variance), size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def spawn(self, key: int) -> "RngStream":
        """Derive an independent child stream (used for per-trial seeding)."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))


def kronecker(a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("kronecker of empty matrix")
    return np.kron(a, b)


def _square(m) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


def spectral_radius(m) -> float:
    m = _square(m)
    if m.size == 0:
        raise ValueError("empty matrix")
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def two_norm(m) -> float:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        raise ValueError("empty matrix")
    return float(np.linalg.norm(m, 2))


def erf(x: float) -> float:
    return math.erf(x)


def inv_erf(p: float) -> float:
    """Inverse error function by safeguarded Newton iteration on :func:`erf`."""
    if not -1.0 < p < 1.0:
        raise ValueError("inv_erf requires -1 < p < 1")
    if p == 0.0:
        return 0.0
    sign = 1.0 if p > 0 else -1.0
    p = abs(p)
    lo, hi = 0.0, 1.0
    while math.erf(hi) < p:
        lo, hi = hi, 2.0 * hi
        if hi > 40.0:
            break
    y = 0.5 * (lo + hi)
    for _ in range(200):
        f = math.erf(y) - p
        if f > 0:
            hi = y
        else:
            lo = y
        deriv = 2.0 / math.sqrt(math.pi) * math.exp(-y * y)
        step = f / deriv if deriv > 0 else math.inf
        y_new = y - step
        if not lo < y_new < hi:
            y_new = 0.5 * (lo + hi)
        if abs(y_new - y) <= 1e-15 * max(1.0, y):
            y = y_new
            break
        y = y_new
    return sign * y


def _gamma_series(a: float, x: float) -> float:
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise ArithmeticError("incomplete gamma series did not converge")
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a: float, x: float) -> float:
    # upper regularized Q(a, x) via modified Lentz
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise ArithmeticError("incomplete gamma continued fraction did not converge")
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def reg_lower_gamma(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if not a > 0:
        raise ValueError("reg_lower_gamma requires a > 0")
    if not x >= 0:
        raise ValueError("reg_lower_gamma requires x >= 0")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_cont_frac(a, x))


def reg_upper_gamma(a: float, x: float) -> float:
    """Q(a, x) = 1 - P(a, x), evaluated without cancellation in the tail."""
    if not a > 0:
        raise ValueError("reg_upper_gamma requires a > 0")
    if not x >= 0:
        raise ValueError("reg_upper_gamma requires x >= 0")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_series(a, x))
    return min(1.0, _gamma_cont_frac(a, x))


def inv_reg_lower_gamma(p: float, a: float) -> float:
    """x such that P(a, x) = p (bracketed Newton/bisection)."""
    if not 0.0 < p < 1.0:
        raise ValueError("inv_reg_lower_gamma requires 0 < p < 1")
    if not a > 0:
        raise ValueError("inv_reg_lower_gamma requires a > 0")
    lo, hi = 0.0, max(1.0, a)
    while reg_lower_gamma(a, hi) < p:
        lo, hi = hi, 2.0 * hi
    # work on whichever tail is smaller to keep relative accuracy
    upper = p > 0.5
    target = 1.0 - p if upper else p
    lga = math.lgamma(a)
    # small-x expansion P(a, x) ~ x^a / Gamma(a + 1) gives a good start in the lower tail
    x = math.exp((math.log(p) + math.lgamma(a + 1.0)) / a)
    if not lo < x < hi:
        x = 0.5 * (lo + hi)
    for _ in range(300):
        if upper:
            f = target - reg_upper_gamma(a, x)  # increasing in x
        else:
            f = reg_lower_gamma(a, x) - target
        if f > 0:
            hi = x
        else:
            lo = x
        dens = math.exp((a - 1.0) * math.log(x) - x - lga) if x > 0 else 0.0
        x_new = x - f / dens if dens > 0 else 0.5 * (lo + hi)
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 4e-16 * x_new or hi - lo <= 4e-16 * hi:
            return x_new
        x = x_new
    return x


def sample_gaussian(rng: RngStream, mean: float, variance: float) -> float:
    if variance < 0:
        raise ValueError("negative variance")
    if variance == 0:
        return float(mean)
    return float(rng.normal(mean, variance))
