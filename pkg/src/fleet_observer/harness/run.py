"""End-to-end simulation: truth, measurements, observers, detection and metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..dynamics import (
    AssumedModel, SensorSpec, TruthState, assumed_model, draw_measurement_noise, selector,
    step_car_following, step_free_flow,
)
from ..fdi import StatefulConfig, detection_probability, sliding_statistics
from ..gain import (
    BoundChain, GainDesign, SearchFamily, bound_chain, empirical_error_variance,
    fixed_gain, synthesize_gain,
)
from ..matstat import RngStream, spectral_radius
from ..observer import BaselineBank, ObserverBank, error_dynamics_check
from ..topology import (
    CavNetwork, build_shared_observation, check_distributed_observability, erdos_renyi, make_network,
)
from .scenario import Scenario

TRUTH_STREAM = 1
MEASUREMENT_STREAM = 2
NETWORK_STREAM = 3
INITIAL_STREAM = 4


class ObservabilityError(RuntimeError):
    pass


@dataclass
class Setup:
    """Everything fixed by the scenario before any noise is drawn."""

    scenario: Scenario
    network: CavNetwork
    model: AssumedModel
    sensors: list[SensorSpec]
    design: GainDesign
    bounds: BoundChain
    observability: dict
    channels: list[tuple[int, int, int]]  # flat sensor channel -> (cav, hdv, channel kind)

    @property
    def C_rows(self) -> list[np.ndarray]:
        return [s.C for s in self.sensors]

    @property
    def Phi_flat(self) -> np.ndarray:
        return np.concatenate([self.bounds.Phi[i] for i in range(self.network.n)])


def build_network(s: Scenario) -> CavNetwork:
    if s.network.adjacency is not None:
        return make_network(s.network.adjacency, s.consensus_rule)
    seed = s.network.er_seed if s.network.er_seed is not None else s.seed
    rng = RngStream(seed).spawn(NETWORK_STREAM)
    return erdos_renyi(s.n_cav, s.network.er_p, rng, s.network.require_strong, rule=s.consensus_rule)


def build_sensors(s: Scenario) -> tuple[list[SensorSpec], list[tuple[int, int, int]]]:
    sensors, channels = [], []
    for cav in s.cavs:
        coords = [h * s.m + ch for h, ch in cav.coords]
        sensors.append(SensorSpec(cav.id, selector(coords, s.dim), np.array(cav.noise_var), cav.fault))
        channels.extend((cav.id, h, ch) for h, ch in cav.coords)
    return sensors, channels


def prepare(s: Scenario, design: GainDesign | None = None) -> Setup:
    """Build network, sensors and gain; raises :class:`ObservabilityError` or ``GainSynthesisError``."""
    network = build_network(s)
    model = assumed_model(s.model_kind, s.sampling_dt, s.n_hdv, s.bound_process_var)
    sensors, channels = build_sensors(s)
    C_rows = [sp.C for sp in sensors]
    shared = build_shared_observation(C_rows, network.neighborhoods)
    obs = check_distributed_observability(network.W, model.A, shared.D_C)
    if not obs["observable"]:
        raise ObservabilityError(f"distributed observability fails: rank {obs['rank']} < {obs['dim']}")
    if design is None:
        if s.gain.fixed_gains is not None:
            design = fixed_gain(network.W, model.A, C_rows, network.neighborhoods, s.gain.fixed_gains,
                                s.gain.epsilon, m=s.m)
        else:
            design = synthesize_gain(network.W, model.A, C_rows, network.neighborhoods, s.gain.epsilon,
                                     SearchFamily.from_dict(s.gain.search), m=s.m, check_observability=False)
    if design.beta < 1.0:
        bounds = bound_chain(design, model.process_noise_cov, [sp.noise_var for sp in sensors], C_rows,
                             network.neighborhoods, c=s.gain.c)
    else:
        # the observer is still stable (rho < 1) but the 2-norm bound does not exist;
        # detectors then never alarm and the certificate reports Theta as null
        bounds = BoundChain(np.inf, np.nan, np.nan, np.nan, np.nan, np.inf,
                            [np.full(sp.channels, np.inf) for sp in sensors], s.gain.c)
    return Setup(s, network, model, sensors, design, bounds, obs, channels)


@dataclass
class Realization:
    truth: np.ndarray  # (H+1, dim), row 0 is the initial state
    measurements: np.ndarray  # (H, L), row k-1 holds y_k
    noise: np.ndarray  # (H, L) measurement noise plus fault
    seed: int


def simulate_truth(s: Scenario, rng: RngStream) -> np.ndarray:
    """HDV trajectories, with optional additive system noise on every state coordinate."""
    dt, m = s.sampling_dt, s.m
    keep = max(h.params.tau for h in s.hdvs) + 2
    states = [TruthState.initial(h.initial_position_m, h.initial_velocity_mps, h.params.tau, dt)
              for h in s.hdvs]
    sys_var = np.tile(np.asarray(s.system_var, dtype=float), s.n_hdv)
    truth = np.zeros((s.horizon + 1, s.dim))

    def pack(row, accel):
        for h, st in enumerate(states):
            row[h * m] = st.p[-1]
            row[h * m + 1] = st.v[-1]
            if m == 3:
                row[h * m + 2] = accel[h]

    pack(truth[0], np.zeros(s.n_hdv))
    for k in range(s.horizon):
        new_v = np.empty(s.n_hdv)
        for h, spec in enumerate(s.hdvs):
            if spec.model == "free_flow":
                new_v[h] = step_free_flow(states[h], spec.params, k, rng, dt)
            else:
                new_v[h] = step_car_following(states[h], states[spec.front], spec.params, k, dt)
        new_p = np.array([st.p[-1] + dt * st.v[-1] for st in states])
        accel = (new_v - np.array([st.v[-1] for st in states])) / dt
        if np.any(sys_var > 0):
            nu = rng.normal(0.0, sys_var).reshape(s.n_hdv, m)
            new_p += nu[:, 0]
            new_v += nu[:, 1]
            if m == 3:
                accel += nu[:, 2]
        for h, st in enumerate(states):
            st.push(float(new_p[h]), float(new_v[h]), keep)
        pack(truth[k + 1], accel)
    return truth


def simulate(setup: Setup, seed: int | None = None) -> Realization:
    s = setup.scenario
    seed = s.seed if seed is None else int(seed)
    root = RngStream(seed)
    truth = simulate_truth(s, root.spawn(TRUTH_STREAM))
    mrng = root.spawn(MEASUREMENT_STREAM)
    L = len(setup.channels)
    y = np.zeros((s.horizon, L))
    noise = np.zeros((s.horizon, L))
    for k in range(1, s.horizon + 1):
        col = 0
        for sp in setup.sensors:
            mu, f = draw_measurement_noise(sp, k, mrng)
            l_i = sp.channels
            noise[k - 1, col:col + l_i] = mu + f
            y[k - 1, col:col + l_i] = sp.C @ truth[k] + mu + f
            col += l_i
    return Realization(truth, y, noise, seed)


def split_measurements(setup: Setup, y_row: np.ndarray) -> list[np.ndarray]:
    out, col = [], 0
    for sp in setup.sensors:
        out.append(y_row[col:col + sp.channels])
        col += sp.channels
    return out


def initial_estimates(setup: Setup, truth0: np.ndarray, seed: int) -> np.ndarray:
    """Common initial estimate of all CAVs: zero, the true state, or the true state plus Gaussian error."""
    s = setup.scenario
    n = setup.network.n
    if s.initial_estimate == "truth":
        return np.tile(truth0, (n, 1))
    if s.initial_estimate == "perturbed_truth":
        rng = RngStream(seed).spawn(INITIAL_STREAM)
        return np.tile(truth0 + rng.normal(0.0, np.full(truth0.shape, s.initial_variance)), (n, 1))
    return np.zeros((n, setup.model.dim))


def run_proposed(setup: Setup, real: Realization) -> tuple[np.ndarray, np.ndarray, ObserverBank]:
    """Returns estimates (H+1, n, dim), residuals (H, L) and the observer."""
    s = setup.scenario
    bank = ObserverBank(setup.network, setup.model.A, setup.design.K_blocks, setup.C_rows,
                        initial_estimates(setup, real.truth[0], real.seed))
    est = np.zeros((s.horizon + 1, setup.network.n, setup.model.dim))
    est[0] = bank.estimates
    res = np.zeros((s.horizon, len(setup.channels)))
    for k in range(1, s.horizon + 1):
        ys = split_measurements(setup, real.measurements[k - 1])
        est[k] = bank.step(ys)
        res[k - 1] = np.concatenate(bank.residuals(ys))
    return est, res, bank


def run_baseline(setup: Setup, real: Realization, L: int) -> tuple[np.ndarray, BaselineBank]:
    s = setup.scenario
    bank = BaselineBank(setup.network, setup.model.A, setup.C_rows, setup.design.channel_gains, L,
                        m=s.m, x0=initial_estimates(setup, real.truth[0], real.seed))
    est = np.zeros((s.horizon + 1, setup.network.n, setup.model.dim))
    est[0] = bank.estimates
    for k in range(1, s.horizon + 1):
        est[k] = bank.step(split_measurements(setup, real.measurements[k - 1]))
    return est, bank


def mse_metrics(truth: np.ndarray, estimates: np.ndarray, window: slice | None = None) -> dict:
    """Per-CAV and CAV-averaged MSE, (1/|window|) sum ||x_hat^i - x||^2 / (N m).

    ``truth`` is (steps, dim) and ``estimates`` (steps, n, dim).
    """
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if window is not None:
        truth, estimates = truth[window], estimates[window]
    if truth.shape[0] == 0:
        raise ValueError("empty MSE window")
    per_step = mse_trace(truth, estimates)
    per_cav = per_step.mean(axis=0)
    return {"per_cav": per_cav.tolist(), "average": float(per_cav.mean())}


def mse_trace(truth: np.ndarray, estimates: np.ndarray) -> np.ndarray:
    """Per-step, per-CAV squared error normalised by the state dimension, shape (steps, n)."""
    err = np.asarray(estimates) - np.asarray(truth)[:, None, :]
    return np.sum(err ** 2, axis=2) / err.shape[2]


@dataclass
class Detector:
    label: str
    mode: str
    threshold: np.ndarray  # per flat channel
    statistic: np.ndarray  # (H, L); NaN before the first full window
    config: StatefulConfig | None = None
    m: float | None = None

    @cached_property
    def alarms(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.statistic >= self.threshold


def detectors_for(setup: Setup, residuals: np.ndarray) -> list[Detector]:
    s = setup.scenario
    Phi = setup.Phi_flat
    out = []
    for m in s.fdi.stateless_m:
        out.append(Detector(f"stateless_m{m:g}", "stateless", m * Phi, residuals.copy(), m=m))
    for cfg in s.fdi.stateful:
        thr = np.full(Phi.shape, cfg.threshold)
        out.append(Detector(f"{cfg.mode}_{cfg.label}", cfg.mode, thr, sliding_statistics(residuals, Phi, cfg),
                            config=cfg))
    return out


def cav_alarms(setup: Setup, det: Detector) -> np.ndarray:
    """(H, n) boolean: any channel of the CAV in alarm; NaN statistics count as no alarm."""
    a = det.alarms
    cav_of = np.array([c[0] for c in setup.channels])
    return np.stack([a[:, cav_of == i].any(axis=1) for i in range(setup.network.n)], axis=1)


def cav_defined(setup: Setup, det: Detector) -> np.ndarray:
    cav_of = np.array([c[0] for c in setup.channels])
    ok = ~np.isnan(det.statistic)
    return np.stack([ok[:, cav_of == i].all(axis=1) for i in range(setup.network.n)], axis=1)


def evaluation_start(s: Scenario) -> int:
    """First step k of the evaluation period: fault onset, or the steady window when fault free."""
    onset = s.fault_onset()
    return onset if onset is not None else s.steady_window.start + 1


def alarm_metrics(setup: Setup, det: Detector) -> dict:
    s = setup.scenario
    start = evaluation_start(s)
    alarms, defined = cav_alarms(setup, det), cav_defined(setup, det)
    steps = np.arange(1, s.horizon + 1)
    post = (steps >= start)[:, None] & defined
    pre = (steps < start)[:, None] & defined
    rate_post = [float(alarms[post[:, i], i].mean()) if post[:, i].any() else None for i in range(setup.network.n)]
    rate_pre = [float(alarms[pre[:, i], i].mean()) if pre[:, i].any() else None for i in range(setup.network.n)]
    delays = {}
    onset = s.fault_onset()
    for i in s.faulty_cavs():
        hits = np.flatnonzero(alarms[:, i] & (steps >= onset))
        delays[str(i)] = int(steps[hits[0]] - onset) if hits.size else None
    return {"mode": det.mode, "evaluation_start": start, "alarm_rate_post": rate_post,
            "alarm_rate_pre": rate_pre, "detection_delay": delays,
            "kappa": detection_probability(det.m) if det.m is not None else None}


@dataclass
class RunResult:
    setup: Setup
    realization: Realization
    estimates: np.ndarray
    residuals: np.ndarray
    detectors: list[Detector]
    metrics: dict
    certificates: dict
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def scenario(self) -> Scenario:
        return self.setup.scenario


def _finite(x) -> float | None:
    x = float(x)
    return x if np.isfinite(x) else None


def certificates_of(setup: Setup) -> dict:
    d, b = setup.design, setup.bounds
    return {
        "rho": d.rho, "beta": d.beta, "isolation_ratio": d.ratio, "epsilon": d.epsilon,
        "channel_gains": list(d.channel_gains),
        "Theta": _finite(b.Theta), "Phi": [[_finite(v) for v in p] for p in b.Phi],
        "alpha1": _finite(b.alpha1), "alpha2": _finite(b.alpha2), "Q_norm_bound": _finite(b.Q_norm_bound),
        "c": b.c, "bound_valid": bool(np.isfinite(b.Theta)),
        "observability_rank": setup.observability["rank"], "state_dim": setup.observability["dim"],
    }


def compute_metrics(setup: Setup, real: Realization, estimates: np.ndarray, detectors: list[Detector],
                    messages: dict) -> dict:
    s = setup.scenario
    win = s.steady_window
    errors = real.truth[1:, None, :] - estimates[1:]
    var = empirical_error_variance(errors, win)
    return {
        "mse": mse_metrics(real.truth[1:], estimates[1:], win),
        "steady_window": [win.start + 1, win.stop],
        "empirical_error_variance": var.tolist(),
        "detectors": {d.label: alarm_metrics(setup, d) for d in detectors},
        "messages": messages,
    }


def run_scenario(s: Scenario, setup: Setup | None = None, seed: int | None = None) -> RunResult:
    setup = setup or prepare(s)
    seed = s.seed if seed is None else int(seed)
    real = simulate(setup, seed)
    est, res, bank = run_proposed(setup, real)
    detectors = detectors_for(setup, res)
    messages = {"rounds": bank.counter.rounds, "messages": bank.counter.messages,
                "per_step": bank.counter.messages / s.horizon}
    metrics = compute_metrics(setup, real, est, detectors, messages)
    shared = build_shared_observation(setup.C_rows, setup.network.neighborhoods)
    metrics["error_dynamics_defect"] = error_dynamics_check(
        real.truth, est, setup.model.A, setup.design.A_hat, setup.design.K, shared.D_C, shared.Dbar_C,
        real.noise)
    return RunResult(setup, real, est, res, detectors, metrics, certificates_of(setup), seed)


def compare_baseline(s: Scenario, L_values, setup: Setup | None = None) -> dict:
    """Proposed observer against the L-sweep baseline on one shared measurement realization."""
    setup = setup or prepare(s)
    real = simulate(setup)
    est, _, bank = run_proposed(setup, real)
    truth = real.truth[1:]
    win = s.steady_window
    rows = [{"observer": "proposed", "L": 1, "messages": bank.counter.messages,
             "messages_per_step": bank.counter.messages / s.horizon, "message_ratio": 1.0,
             "rho": setup.design.rho, "mse_steady": mse_metrics(truth, est[1:], win)["average"]}]
    curves = {"proposed": mse_trace(truth, est[1:]).mean(axis=1)}
    for L in L_values:
        b_est, b_bank = run_baseline(setup, real, int(L))
        rows.append({"observer": "baseline", "L": int(L), "messages": b_bank.counter.messages,
                     "messages_per_step": b_bank.counter.messages / s.horizon,
                     "message_ratio": b_bank.counter.messages / bank.counter.messages,
                     "rho": spectral_radius(b_bank.closed_loop()),
                     "mse_steady": mse_metrics(truth, b_est[1:], win)["average"]})
        curves[f"baseline_L{int(L)}"] = mse_trace(truth, b_est[1:]).mean(axis=1)
    return {"table": rows, "curves": curves, "measurements": real.measurements, "sampling_dt": s.sampling_dt}
