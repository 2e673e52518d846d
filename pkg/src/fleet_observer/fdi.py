"""Stateless and stateful residual-based fault detection."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .matstat import erf, inv_erf, inv_reg_lower_gamma, reg_upper_gamma

H0 = "H0"
H1 = "H1"


def detection_probability(m: float) -> float:
    """kappa = erf(m / sqrt 2) for detection level m."""
    return erf(m / math.sqrt(2.0))


def detection_level(far: float) -> float:
    """Detection level m giving false-alarm rate ``far``."""
    if not 0.0 < far < 1.0:
        raise ValueError("false-alarm rate must lie in (0, 1)")
    return math.sqrt(2.0) * inv_erf(1.0 - far)


def stateless_threshold(m: float, Phi) -> np.ndarray | float:
    if not m > 0:
        raise ValueError("detection level must be positive")
    if np.any(np.asarray(Phi) < 0):
        raise ValueError("Phi must be non-negative")
    return m * Phi


def stateless_detect(r: float, threshold: float) -> str:
    return H1 if r >= threshold else H0


def _check_window(window, T: int | None, Phi: float) -> np.ndarray:
    w = np.asarray(window, dtype=float)
    if not Phi > 0:
        raise ValueError("Phi must be positive")
    if T is not None and w.shape[0] < T:
        raise ValueError(f"window holds {w.shape[0]} residuals, need {T}")
    return w if T is None else w[-T:]


def distance_measure(window, Phi: float, T: int | None = None) -> float:
    """Sum of squared residuals over the window, normalised by Phi."""
    w = _check_window(window, T, Phi)
    return float(np.sum(w ** 2) / Phi)


def weighted_distance_measure(window, lam: float, Phi: float, T: int | None = None) -> float:
    """Exponentially weighted distance; the newest residual (last entry) has weight 1."""
    if not 0.0 < lam <= 1.0:
        raise ValueError("weight factor must lie in (0, 1]")
    w = _check_window(window, T, Phi)
    weights = lam ** np.arange(w.shape[0] - 1, -1, -1, dtype=float)
    return float(np.sum(weights * w ** 2) / Phi)


def effective_shape(T: int, lam: float | None = None) -> float:
    """Gamma shape of the (weighted) chi-square statistic: T/2 or (1-lam^T)/(2-2lam)."""
    if T < 1:
        raise ValueError("window length must be at least 1")
    if lam is None or lam == 1.0:
        return T / 2.0
    if not 0.0 < lam < 1.0:
        raise ValueError("weight factor must lie in (0, 1)")
    return (1.0 - lam ** T) / (2.0 - 2.0 * lam)


def stateful_threshold(far: float, T: int) -> float:
    if not 0.0 < far < 1.0:
        raise ValueError("false-alarm rate must lie in (0, 1)")
    return 2.0 * inv_reg_lower_gamma(1.0 - far, effective_shape(T))


def weighted_stateful_threshold(far: float, T: int, lam: float) -> float:
    if lam == 1.0:
        raise ValueError("lam = 1 is the unweighted case; use stateful_threshold")
    if not 0.0 < far < 1.0:
        raise ValueError("false-alarm rate must lie in (0, 1)")
    return 2.0 * inv_reg_lower_gamma(1.0 - far, effective_shape(T, lam))


def far_of_statistic(psi: float, T: int, lam: float | None = None) -> float:
    """False-alarm rate implied by an observed statistic (upper chi-square tail)."""
    if psi < 0:
        raise ValueError("statistic must be non-negative")
    return reg_upper_gamma(effective_shape(T, lam), psi / 2.0)


def stateful_detect(statistic: float, threshold: float) -> str:
    return H1 if statistic >= threshold else H0


@dataclass(frozen=True)
class StatelessConfig:
    m: float = 2.0

    @classmethod
    def from_far(cls, far: float) -> "StatelessConfig":
        return cls(detection_level(far))

    @property
    def kappa(self) -> float:
        return detection_probability(self.m)


@dataclass(frozen=True)
class StatefulConfig:
    T: int
    far: float
    lam: float = 1.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("window length must be at least 1")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("weight factor must lie in (0, 1]")

    @property
    def weighted(self) -> bool:
        return self.lam < 1.0

    @property
    def mode(self) -> str:
        return "stateful_weighted" if self.weighted else "stateful"

    @property
    def threshold(self) -> float:
        if self.weighted:
            return weighted_stateful_threshold(self.far, self.T, self.lam)
        return stateful_threshold(self.far, self.T)

    @property
    def label(self) -> str:
        base = f"T{self.T}_far{self.far:g}"
        return base + (f"_lam{self.lam:g}" if self.weighted else "")


@dataclass(frozen=True)
class AlarmRecord:
    cav_id: int
    channel: int
    step: int
    mode: str
    statistic: float
    threshold: float
    implied_far: float
    hypothesis: str


class SlidingDetector:
    """Stateful detector for one CAV channel over a sliding window."""

    def __init__(self, config: StatefulConfig, Phi: float):
        if not Phi > 0:
            raise ValueError("Phi must be positive")
        self.config = config
        self.Phi = float(Phi)
        self.threshold = config.threshold
        self._buf: deque[float] = deque(maxlen=config.T)

    def update(self, r: float) -> tuple[float, str] | None:
        """Push a residual; returns (statistic, hypothesis) once the window is full."""
        self._buf.append(float(r))
        if len(self._buf) < self.config.T:
            return None
        w = np.fromiter(self._buf, float)
        if self.config.weighted:
            psi = weighted_distance_measure(w, self.config.lam, self.Phi)
        else:
            psi = distance_measure(w, self.Phi)
        return psi, stateful_detect(psi, self.threshold)


def sliding_statistics(residuals: np.ndarray, Phi, config: StatefulConfig) -> np.ndarray:
    """Vectorised sliding statistic over a residual trace.

    ``residuals`` has shape (steps, ...); ``Phi`` broadcasts against the
    trailing axes.  Entries before the first full window are NaN.
    """
    r2 = np.asarray(residuals, dtype=float) ** 2 / np.asarray(Phi, dtype=float)
    steps, T = r2.shape[0], config.T
    out = np.full(r2.shape, np.nan)
    if steps < T:
        return out
    weights = config.lam ** np.arange(T - 1, -1, -1, dtype=float)
    windows = np.lib.stride_tricks.sliding_window_view(r2, T, axis=0)
    out[T - 1:] = windows @ weights
    return out


def non_overlapping_alarm_rate(residuals: np.ndarray, Phi: float, config: StatefulConfig) -> float:
    """Alarm fraction over disjoint windows (independence assumed by the chi-square threshold)."""
    r = np.asarray(residuals, dtype=float).ravel()
    T = config.T
    n_win = r.size // T
    if n_win == 0:
        raise ValueError("not enough residuals for one window")
    blocks = (r[: n_win * T].reshape(n_win, T) ** 2) / Phi
    weights = config.lam ** np.arange(T - 1, -1, -1, dtype=float)
    psi = blocks @ weights
    return float(np.mean(psi >= config.threshold))
