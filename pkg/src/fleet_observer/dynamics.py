"""HDV truth models, the kinematic models CAVs assume, and sensor models."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag

from .matstat import RngStream


def ncv_block(sampling_dt: float) -> np.ndarray:
    if not sampling_dt > 0:
        raise ValueError("sampling_dt must be positive")
    return np.array([[1.0, sampling_dt], [0.0, 1.0]])


def nca_block(sampling_dt: float) -> np.ndarray:
    if not sampling_dt > 0:
        raise ValueError("sampling_dt must be positive")
    t = sampling_dt
    return np.array([[1.0, t, 0.5 * t * t], [0.0, 1.0, t], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class AssumedModel:
    """Block-diagonal kinematic model shared by every CAV."""

    kind: str
    sampling_dt: float
    n_hdv: int
    process_noise_cov: np.ndarray  # G, (N*m, N*m)

    @property
    def block(self) -> np.ndarray:
        return ncv_block(self.sampling_dt) if self.kind == "NCV" else nca_block(self.sampling_dt)

    @property
    def m(self) -> int:
        return 2 if self.kind == "NCV" else 3

    @property
    def A(self) -> np.ndarray:
        return block_diag(*([self.block] * self.n_hdv))

    @property
    def dim(self) -> int:
        return self.n_hdv * self.m


def assumed_model(kind: str, sampling_dt: float, n_hdv: int, process_var=None) -> AssumedModel:
    """Build the assumed model; ``process_var`` is the per-coordinate diagonal of one HDV block of G."""
    kind = kind.upper()
    if kind not in ("NCV", "NCA"):
        raise ValueError(f"unknown model kind {kind!r}")
    m = 2 if kind == "NCV" else 3
    if process_var is None:
        process_var = np.zeros(m)
    process_var = np.asarray(process_var, dtype=float)
    if process_var.shape != (m,):
        raise ValueError(f"process_var must have {m} entries")
    G = np.diag(np.tile(process_var, n_hdv))
    return AssumedModel(kind, float(sampling_dt), int(n_hdv), G)


@dataclass
class HdvModelParams:
    """Parameters of the free-flow / Helly car-following recursions.

    ``accel_scale`` multiplies the acceleration terms of both recursions.  The
    default (``None``) uses the sampling interval, i.e. the recursions are
    Euler steps of the continuous models; ``1.0`` applies them per step.
    """

    rho: float = 0.2
    tau: int = 10
    a1: float = 0.4
    a2: float = 0.1
    b1: float = 10.0
    b2: float = 0.5
    desired_speed_profile: Sequence[tuple[float, float]] = ((0.0, 30.0),)  # (start time s, v_d)
    process_noise_var: float = 0.0
    accel_scale: float | None = None

    def __post_init__(self):
        if int(self.tau) != self.tau or self.tau < 0:
            raise ValueError("tau must be a non-negative integer")
        self.tau = int(self.tau)
        if self.b1 < 0 or self.b2 < 0:
            raise ValueError("headway coefficients must be non-negative")
        if self.process_noise_var < 0:
            raise ValueError("process_noise_var must be non-negative")
        prof = sorted((float(t), float(v)) for t, v in self.desired_speed_profile)
        if not prof or prof[0][0] > 0:
            raise ValueError("desired speed profile must start at t <= 0")
        self.desired_speed_profile = tuple(prof)

    def desired_speed(self, t: float) -> float:
        v = self.desired_speed_profile[0][1]
        for start, speed in self.desired_speed_profile:
            if t >= start:
                v = speed
        return v

    def scale(self, sampling_dt: float) -> float:
        return sampling_dt if self.accel_scale is None else self.accel_scale


@dataclass
class TruthState:
    """Position/velocity history of one HDV; index -1 is the current step."""

    p: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def initial(cls, p0: float, v0: float, tau: int, sampling_dt: float) -> "TruthState":
        # constant-velocity hold for the pre-horizon history
        hist = range(-tau, 1)
        return cls([p0 + sampling_dt * v0 * h for h in hist], [v0] * (tau + 1))

    def delayed(self, tau: int) -> tuple[float, float]:
        if len(self.v) < tau + 1:
            raise ValueError("insufficient history for delay")
        return self.p[-1 - tau], self.v[-1 - tau]

    def push(self, p: float, v: float, keep: int):
        self.p.append(p)
        self.v.append(v)
        if len(self.v) > keep:
            del self.p[: len(self.p) - keep]
            del self.v[: len(self.v) - keep]


def step_free_flow(state: TruthState, params: HdvModelParams, k: int, rng: RngStream | None,
                   sampling_dt: float) -> float:
    """Velocity at k+1 under the free-flow model."""
    _, v_del = state.delayed(params.tau)
    v_d = params.desired_speed(k * sampling_dt)
    noise = 0.0
    if rng is not None and params.process_noise_var > 0:
        noise = float(rng.normal(0.0, params.process_noise_var))
    return state.v[-1] + params.scale(sampling_dt) * params.rho * (v_d - v_del) + noise


def step_car_following(state: TruthState, front: TruthState, params: HdvModelParams, k: int,
                       sampling_dt: float) -> float:
    """Velocity at k+1 under Helly's car-following model."""
    p_del, v_del = state.delayed(params.tau)
    pf_del, vf_del = front.delayed(params.tau)
    headway = params.b1 + params.b2 * v_del
    accel = params.a1 * (vf_del - v_del) + params.a2 * ((pf_del - p_del) - headway)
    return state.v[-1] + params.scale(sampling_dt) * accel


@dataclass(frozen=True)
class FaultProfile:
    onset: int
    mean: float
    variance: float
    active: bool = True

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("fault variance must be non-negative")
        if self.onset < 0:
            raise ValueError("fault onset must be non-negative")


@dataclass(frozen=True)
class SensorSpec:
    cav_id: int
    C: np.ndarray  # (l_i, N*m) 0/1 selector rows
    noise_var: np.ndarray  # (l_i,)
    fault: FaultProfile | None = None

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if np.any((C != 0) & (C != 1)) or np.any(C.sum(axis=1) != 1):
            raise ValueError(f"CAV {self.cav_id}: every selector row needs exactly one 1")
        object.__setattr__(self, "C", C)
        nv = np.broadcast_to(np.asarray(self.noise_var, dtype=float), (C.shape[0],)).copy()
        if np.any(nv < 0):
            raise ValueError("measurement noise variance must be non-negative")
        object.__setattr__(self, "noise_var", nv)

    @property
    def channels(self) -> int:
        return self.C.shape[0]

    def coordinates(self) -> list[int]:
        return [int(np.argmax(row)) for row in self.C]


def selector(coords: Sequence[int], dim: int) -> np.ndarray:
    C = np.zeros((len(coords), dim))
    for r, c in enumerate(coords):
        C[r, c] = 1.0
    return C


def draw_measurement_noise(spec: SensorSpec, k: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Noise and fault realizations for one sensor at step ``k``.

    The fault draw only consumes random numbers when the fault is active and
    past onset, so an inactive fault leaves the stream untouched.
    """
    mu = rng.normal(0.0, spec.noise_var)
    f = np.zeros(spec.channels)
    fault = spec.fault
    if fault is not None and fault.active and k >= fault.onset:
        f = rng.normal(fault.mean, np.full(spec.channels, fault.variance))
    return mu, f


def measure(spec: SensorSpec, x: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.C.shape[1],):
        raise ValueError(f"state dimension {x.shape} does not match selector width {spec.C.shape[1]}")
    mu, f = draw_measurement_noise(spec, k, rng)
    return spec.C @ x + mu + f
