"""End-to-end acceptance criteria, one test per criterion.

Tolerances, seed counts and runtime budgets are pinned here; measured values
are printed so a failing criterion shows how far off it is.
"""
import functools
import math
import time

import mpmath
import numpy as np
from scipy import stats

from fleet_observer.dynamics import assumed_model
from fleet_observer.fdi import StatefulConfig, far_of_statistic, non_overlapping_alarm_rate, stateful_threshold
from fleet_observer.harness import compare_baseline, load_preset, prepare, run_scenario, validate_scenario
from fleet_observer.harness.campaign import trial_seeds
from fleet_observer.harness.output import write_comparison, write_result
from fleet_observer.harness.run import build_network, build_sensors, mse_trace, run_baseline, simulate
from fleet_observer.harness.scenario import preset_document
from fleet_observer.matstat import erf, inv_erf, inv_reg_lower_gamma, reg_lower_gamma
from fleet_observer.topology import build_shared_observation, check_distributed_observability

mpmath.mp.dps = 40

FAULT_FREE_SEEDS = 20
FAULT_SEEDS = 20
LARGE_NOISE_SEEDS = 10


@functools.lru_cache(maxsize=None)
def setup_of(name):
    return prepare(load_preset(name))


@functools.lru_cache(maxsize=None)
def campaign(name, trials):
    """Runs of a preset over seeds seed, seed+1, ...; cached so later criteria reuse them."""
    setup = setup_of(name)
    s = setup.scenario
    return [run_scenario(s, setup, seed=seed) for seed in trial_seeds(s.seed, trials)]


def rates(runs, label):
    return np.array([r.metrics["detectors"][label]["alarm_rate_post"] for r in runs], dtype=float)


def test_criterion_01_observability_certificate():
    t0 = time.perf_counter()
    s = load_preset("fig1_4x4")
    net = build_network(s)
    sensors, _ = build_sensors(s)
    A = assumed_model(s.model_kind, s.sampling_dt, s.n_hdv).A
    C = [sp.C for sp in sensors]
    rep = check_distributed_observability(net.W, A, build_shared_observation(C, net.neighborhoods).D_C)
    # drop every measurement of the second HDV (index 1)
    stripped = []
    for Ci in C:
        Ci = Ci.copy()
        Ci[:, s.m * 1:s.m * 2] = 0.0
        stripped.append(Ci)
    rep_cut = check_distributed_observability(net.W, A, build_shared_observation(stripped, net.neighborhoods).D_C)
    elapsed = time.perf_counter() - t0
    print(f"rank {rep['rank']}/{rep['dim']}, without HDV 2: rank {rep_cut['rank']}, {elapsed:.3f} s")
    assert rep["observable"] and rep["rank"] == 32 == rep["dim"]
    assert not rep_cut["observable"] and rep_cut["rank"] < 32
    assert elapsed < 1.0


def test_criterion_02_stability_certificate():
    t0 = time.perf_counter()
    setup = prepare(load_preset("fig1_4x4"))
    d = setup.design
    # noise-free: no HDV noise, no sensor noise and a constant desired speed, so the
    # platoon starts and stays in equilibrium and the truth follows the NCV model exactly
    doc = preset_document("fig1_4x4")
    for h in doc["hdvs"]:
        h["velocity_noise_var"] = 0.0
        if "desired_speed_profile" in h:
            h["desired_speed_profile"] = h["desired_speed_profile"][:1]
    for c in doc["cavs"]:
        c["noise_var"] = 0.0
    quiet = validate_scenario(doc)
    res = run_scenario(quiet, prepare(quiet, d))
    err = np.linalg.norm((res.realization.truth[:, None, :] - res.estimates).reshape(quiet.horizon + 1, -1), axis=1)
    elapsed = time.perf_counter() - t0
    print(f"rho {d.rho:.6f}, ratio {d.ratio}, eps {d.epsilon}, error {err[0]:.3g} -> {err[-1]:.3g}, "
          f"{elapsed:.2f} s")
    assert d.rho < 1.0
    assert float(np.max(np.abs(np.linalg.eigvals(d.A_hat)))) < 1.0
    assert d.ratio == 0.0 and d.ratio <= d.epsilon == 0.5
    assert err[-1] < 1e-6
    assert elapsed < 5.0


def test_criterion_03_tracking_and_consensus():
    t0 = time.perf_counter()
    runs = campaign("fig1_4x4", FAULT_FREE_SEEDS)
    elapsed = time.perf_counter() - t0
    s = runs[0].scenario
    win = s.steady_window
    traces = np.array([mse_trace(r.realization.truth[1:], r.estimates[1:])[win] for r in runs])
    avg = traces.mean(axis=0)  # seed-averaged per-step MSE, (steps, n)
    n_blocks = 20
    blocks = avg.reshape(n_blocks, -1, s.n_cav).mean(axis=1)
    worst_p, worst_drift = 1.0, 0.0
    for i in range(s.n_cav):
        _, p = stats.kendalltau(np.arange(n_blocks), blocks[:, i])
        slope = np.polyfit(np.arange(avg.shape[0]), avg[:, i], 1)[0]
        worst_p = min(worst_p, p)
        worst_drift = max(worst_drift, abs(slope * avg.shape[0] / avg[:, i].mean()))
    ratios = []
    for r in runs:
        est = r.estimates[1:][win]
        floor = np.sqrt(np.array(r.metrics["mse"]["per_cav"]))
        worst = max(np.sqrt(np.mean((est[:, i] - est[:, j]) ** 2))
                    for i in range(s.n_cav) for j in range(i + 1, s.n_cav))
        ratios.append(worst / floor.min())
    print(f"trend test min p {worst_p:.3f}, max relative drift {worst_drift:.3f}, "
          f"max disagreement / noise floor {max(ratios):.3f}, {elapsed:.2f} s")
    assert worst_p >= 0.05
    assert worst_drift <= 0.2
    assert max(ratios) < 3.0
    assert elapsed < 30.0


def test_criterion_04_variance_bound():
    runs = campaign("fig1_4x4", FAULT_FREE_SEEDS)
    theta = runs[0].setup.bounds.Theta
    ok = [max(r.metrics["empirical_error_variance"]) <= theta for r in runs]
    worst = max(max(r.metrics["empirical_error_variance"]) for r in runs)
    print(f"Theta {theta:.4f}, largest empirical variance {worst:.4f}, valid in {sum(ok)}/{len(ok)} runs")
    assert math.isfinite(theta)
    assert sum(ok) >= 19


def test_criterion_05_stateless_detection():
    t0 = time.perf_counter()
    runs = campaign("fault_cav2", FAULT_SEEDS)
    clean = campaign("fig1_4x4", FAULT_FREE_SEEDS)
    elapsed = time.perf_counter() - t0
    faulty = runs[0].scenario.faulty_cavs()[0]
    r = rates(runs, "stateless_m2")
    others = np.delete(r, faulty, axis=1)
    fault_free = rates(clean, "stateless_m2")
    print(f"stateless m=2: faulty CAV post-onset alarm fraction min {r[:, faulty].min():.3f} "
          f"mean {r[:, faulty].mean():.3f}; other CAVs max {others.max():.3f}; "
          f"fault-free exceedance max {fault_free.max():.3f}; {elapsed:.2f} s")
    assert fault_free.max() <= 0.10
    assert others.max() <= 0.10
    assert r[:, faulty].min() >= 0.80
    assert elapsed < 60.0


def test_criterion_06_stateful_detection():
    runs = campaign("fault_cav2", FAULT_SEEDS)
    faulty = runs[0].scenario.faulty_cavs()[0]
    labels = ["stateful_T15_far0.003", "stateful_weighted_T15_far0.05_lam0.7",
              "stateful_weighted_T30_far0.003_lam0.8"]
    for label in labels:
        r = rates(runs, label)
        others = np.delete(r, faulty, axis=1)
        print(f"{label}: faulty min {r[:, faulty].min():.3f}, fault-free CAVs below threshold in "
              f"{1 - others.max():.3f} of windows at worst")
    for label in labels:
        r = rates(runs, label)
        assert r[:, faulty].min() >= 0.80, label
        assert 1.0 - np.delete(r, faulty, axis=1).max() >= 0.95, label


def test_criterion_07_chi_square_calibration():
    cfg = StatefulConfig(T=15, far=0.05)
    rng = np.random.default_rng(2024)
    Phi = 1.3
    r = np.abs(rng.normal(0.0, math.sqrt(Phi), size=cfg.T * 10_000))
    rate = non_overlapping_alarm_rate(r, Phi, cfg)
    trips = [abs(far_of_statistic(stateful_threshold(far, T), T) - far)
             for far in (0.003, 0.05, 0.32) for T in (2, 15, 20, 30)]
    print(f"alarm rate {rate:.4f} over 10000 windows (target 0.05), worst round-trip error {max(trips):.2e}")
    assert abs(rate - 0.05) <= 0.30 * 0.05
    assert max(trips) <= 1e-8


def test_criterion_08_special_function_oracles():
    xs = np.linspace(-5.0, 5.0, 100)
    erf_err = max(abs(erf(x) - float(mpmath.erf(x))) for x in xs)
    grid = [(a, x) for a in np.linspace(0.25, 40.0, 10) for x in np.linspace(0.0, 60.0, 10)]
    gam_err = max(abs(reg_lower_gamma(a, x) - float(mpmath.gammainc(a, 0, x, regularized=True))) for a, x in grid)
    ps = np.linspace(-0.999, 0.999, 100)
    inv_erf_err = max(abs(erf(inv_erf(p)) - p) for p in ps)
    qs = [(p, a) for p in np.linspace(0.001, 0.999, 10) for a in np.linspace(0.25, 40.0, 10)]
    inv_gam_err = max(abs(reg_lower_gamma(a, inv_reg_lower_gamma(p, a)) - p) for p, a in qs)
    print(f"erf {erf_err:.2e}, lower gamma {gam_err:.2e}, inv erf {inv_erf_err:.2e}, inv gamma {inv_gam_err:.2e}")
    assert max(erf_err, gam_err) <= 1e-8
    assert max(inv_erf_err, inv_gam_err) <= 1e-8


def test_criterion_09_large_noise_robustness():
    runs = campaign("fault_cav1_largenoise", LARGE_NOISE_SEEDS)
    faulty = runs[0].scenario.faulty_cavs()[0]
    r = rates(runs, "stateful_T20_far0.05")
    others = np.delete(r, faulty, axis=1)
    print(f"T=20, far 0.05: faulty CAV min {r[:, faulty].min():.3f}, other CAVs max {others.max():.3f}")
    assert r[:, faulty].min() >= 0.80
    assert others.max() <= 0.10


@functools.lru_cache(maxsize=None)
def largescale_comparison():
    t0 = time.perf_counter()
    setup = setup_of("largescale_25x25")
    comp = compare_baseline(setup.scenario, [7, 10, 15], setup)
    return comp, time.perf_counter() - t0


def test_criterion_10_baseline_cost_accounting():
    t0 = time.perf_counter()
    comp, _ = largescale_comparison()
    elapsed = time.perf_counter() - t0
    setup = setup_of("largescale_25x25")
    rows = {(r["observer"], r["L"]): r for r in comp["table"]}
    prop = rows[("proposed", 1)]
    for L in (7, 10, 15):
        row = rows[("baseline", L)]
        print(f"L={L}: messages/step {row['messages_per_step']:.0f} vs {prop['messages_per_step']:.0f}, "
              f"ratio {row['message_ratio']}, mse {row['mse_steady']:.4f} vs proposed {prop['mse_steady']:.4f}")
        assert row["message_ratio"] == L
        assert row["messages"] == L * prop["messages"]
        assert len(comp["curves"][f"baseline_L{L}"]) == setup.scenario.horizon
    assert len(comp["curves"]["proposed"]) == setup.scenario.horizon
    # the curves come from one recorded realization; replaying it reproduces the baseline curve
    real = simulate(setup)
    assert np.array_equal(real.measurements, comp["measurements"])
    b_est, _ = run_baseline(setup, real, 7)
    assert np.array_equal(mse_trace(real.truth[1:], b_est[1:]).mean(axis=1), comp["curves"]["baseline_L7"])
    print(f"{elapsed:.1f} s")
    assert elapsed < 300.0


def test_criterion_11_error_dynamics_identity():
    defects = {}
    for name, trials in (("fig1_4x4", FAULT_FREE_SEEDS), ("fault_cav2", FAULT_SEEDS),
                         ("fault_cav1_largenoise", LARGE_NOISE_SEEDS), ("largescale_25x25", 1)):
        defects[name] = max(r.metrics["error_dynamics_defect"] for r in campaign(name, trials))
    print(", ".join(f"{k} {v:.2e}" for k, v in defects.items()))
    assert max(defects.values()) < 1e-9


def test_criterion_12_determinism(tmp_path):
    for name, trials in (("fig1_4x4", FAULT_FREE_SEEDS), ("fault_cav2", FAULT_SEEDS),
                         ("fault_cav1_largenoise", LARGE_NOISE_SEEDS)):
        first = campaign(name, trials)[0]
        again = run_scenario(load_preset(name), prepare(load_preset(name)), seed=first.seed)
        write_result(first, tmp_path / name / "a")
        write_result(again, tmp_path / name / "b")
        for f in ("trace.csv", "alarm_log.csv", "cav_alarms.csv"):
            assert (tmp_path / name / "a" / f).read_bytes() == (tmp_path / name / "b" / f).read_bytes(), (name, f)
    comp, _ = largescale_comparison()
    s = load_preset("largescale_25x25")
    again = compare_baseline(s, [7, 10, 15], prepare(s))
    write_comparison(comp, tmp_path / "cmp" / "a")
    write_comparison(again, tmp_path / "cmp" / "b")
    for f in ("baseline_table.csv", "mse_curves.csv"):
        assert (tmp_path / "cmp" / "a" / f).read_bytes() == (tmp_path / "cmp" / "b" / f).read_bytes(), f
    print("identical CSV bytes for repeated seeded runs of every preset")
