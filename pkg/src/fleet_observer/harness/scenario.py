"""Scenario documents: parsing and validation.

A scenario is one JSON document.  Ids are 0-based.  Every problem found is
reported with its JSON path, all at once.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from ..dynamics import FaultProfile, HdvModelParams
from ..fdi import StatefulConfig

CHANNELS = {"position": 0, "velocity": 1, "acceleration": 2}
PRESETS = ("fig1_4x4", "largescale_25x25", "fault_cav2", "fault_cav1_largenoise")

_HDV_PARAM_KEYS = {
    "rho": "rho", "tau_steps": "tau", "a1": "a1", "a2": "a2", "b1_m": "b1", "b2_s": "b2",
    "accel_scale": "accel_scale",
}


class ScenarioError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.errors))


@dataclass
class HdvSpec:
    id: int
    model: str  # "free_flow" | "car_following"
    params: HdvModelParams
    initial_position_m: float
    initial_velocity_mps: float
    front: int | None = None


@dataclass
class CavSpec:
    id: int
    coords: list[tuple[int, int]]  # (hdv, channel index)
    noise_var: list[float]
    fault: FaultProfile | None = None


@dataclass
class NetworkSpec:
    adjacency: np.ndarray | None = None
    er_p: float | None = None
    er_seed: int | None = None
    require_strong: bool = True


@dataclass
class GainSpec:
    epsilon: float = 0.5
    search: dict | None = None
    fixed_gains: list[float] | None = None
    c: float = 1.0


@dataclass
class FdiSpec:
    stateless_m: list[float] = field(default_factory=lambda: [2.0])
    stateful: list[StatefulConfig] = field(default_factory=list)


@dataclass
class Scenario:
    name: str
    seed: int
    horizon: int
    sampling_dt: float
    model_kind: str
    hdvs: list[HdvSpec]
    cavs: list[CavSpec]
    network: NetworkSpec
    consensus_rule: str
    system_var: list[float]
    bound_process_var: list[float]
    gain: GainSpec
    fdi: FdiSpec
    steady_fraction: float = 0.4
    baseline_L: list[int] = field(default_factory=lambda: [7, 10, 15])
    initial_estimate: str = "zero"
    initial_variance: float = 0.0
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def m(self) -> int:
        return 2 if self.model_kind == "NCV" else 3

    @property
    def n_hdv(self) -> int:
        return len(self.hdvs)

    @property
    def n_cav(self) -> int:
        return len(self.cavs)

    @property
    def dim(self) -> int:
        return self.n_hdv * self.m

    @property
    def steady_window(self) -> slice:
        start = int(round(self.horizon * (1.0 - self.steady_fraction)))
        return slice(start, self.horizon)

    def with_seed(self, seed: int) -> "Scenario":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return validate_scenario(raw)

    def fault_onset(self) -> int | None:
        onsets = [c.fault.onset for c in self.cavs if c.fault is not None and c.fault.active]
        return min(onsets) if onsets else None

    def faulty_cavs(self) -> list[int]:
        return [c.id for c in self.cavs if c.fault is not None and c.fault.active]


def _num(doc, key, path, errors, *, required=True, default=None, positive=False, nonneg=False,
         integer=False):
    if key not in doc:
        if required:
            errors.append(f"{path}.{key}: missing required field")
        return default
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        errors.append(f"{path}.{key}: expected a number, got {val!r}")
        return default
    if integer and int(val) != val:
        errors.append(f"{path}.{key}: expected an integer")
        return default
    if positive and not val > 0:
        errors.append(f"{path}.{key}: must be positive")
    if nonneg and not val >= 0:
        errors.append(f"{path}.{key}: must be non-negative")
    return int(val) if integer else float(val)


def _hdv_params(doc: dict, path: str, errors: list[str], base: dict) -> HdvModelParams | None:
    kw: dict[str, Any] = dict(base)
    for key, attr in _HDV_PARAM_KEYS.items():
        if key in doc:
            kw[attr] = doc[key]
    if "desired_speed_profile" in doc:
        kw["desired_speed_profile"] = [tuple(p) for p in doc["desired_speed_profile"]]
    if "velocity_noise_var" in doc:
        kw["process_noise_var"] = doc["velocity_noise_var"]
    try:
        return HdvModelParams(**kw)
    except (TypeError, ValueError) as exc:
        errors.append(f"{path}: {exc}")
        return None


def _parse_network(doc, n_cav, errors) -> NetworkSpec:
    path = "$.network"
    if not isinstance(doc, dict):
        errors.append(f"{path}: missing or not an object")
        return NetworkSpec()
    if "cycle" in doc:
        from ..topology import cycle_adjacency

        bidir = bool(doc["cycle"].get("bidirectional", True))
        return NetworkSpec(adjacency=cycle_adjacency(n_cav, bidir))
    if "out_neighbors" in doc:
        adj = np.eye(n_cav, dtype=int)
        for j, outs in doc["out_neighbors"].items():
            for i in outs:
                if not (0 <= int(j) < n_cav and 0 <= int(i) < n_cav):
                    errors.append(f"{path}.out_neighbors.{j}: CAV id {i} does not exist")
                    continue
                adj[int(i), int(j)] = 1
        return NetworkSpec(adjacency=adj)
    if "erdos_renyi" in doc:
        er = doc["erdos_renyi"]
        p = _num(er, "p", f"{path}.erdos_renyi", errors)
        if p is not None and not 0 <= p <= 1:
            errors.append(f"{path}.erdos_renyi.p: must lie in [0, 1]")
        seed = _num(er, "seed", f"{path}.erdos_renyi", errors, required=False, integer=True)
        return NetworkSpec(er_p=p, er_seed=seed, require_strong=bool(er.get("require_strong", True)))
    errors.append(f"{path}: expected one of 'cycle', 'out_neighbors', 'erdos_renyi'")
    return NetworkSpec()


def validate_scenario(raw: dict) -> Scenario:
    """Parse and check a scenario document; raises :class:`ScenarioError` listing every problem."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ScenarioError(["$: scenario must be a JSON object"])
    seed = _num(raw, "seed", "$", errors, integer=True)
    horizon = _num(raw, "horizon_steps", "$", errors, positive=True, integer=True)
    dt = _num(raw, "sampling_dt_s", "$", errors, positive=True)
    kind = str(raw.get("model_kind", "NCV")).upper()
    if kind not in ("NCV", "NCA"):
        errors.append(f"$.model_kind: unknown model kind {kind!r}")
        kind = "NCV"
    m = 2 if kind == "NCV" else 3
    base_params: dict[str, Any] = {}
    if "hdv_params" in raw:
        for key, attr in _HDV_PARAM_KEYS.items():
            if key in raw["hdv_params"]:
                base_params[attr] = raw["hdv_params"][key]

    hdvs: list[HdvSpec] = []
    hdv_docs = raw.get("hdvs")
    if not isinstance(hdv_docs, list) or not hdv_docs:
        errors.append("$.hdvs: missing or empty")
        hdv_docs = []
    for idx, h in enumerate(hdv_docs):
        path = f"$.hdvs[{idx}]"
        hid = _num(h, "id", path, errors, integer=True)
        if hid is not None and hid != idx:
            errors.append(f"{path}.id: ids must be 0..N-1 in order (expected {idx})")
        model = h.get("model")
        if model not in ("free_flow", "car_following"):
            errors.append(f"{path}.model: expected 'free_flow' or 'car_following'")
        front = h.get("front")
        if model == "car_following":
            if front is None:
                errors.append(f"{path}.front: car-following HDV needs a front vehicle")
            elif not (isinstance(front, int) and 0 <= front < len(hdv_docs)) or front == idx:
                errors.append(f"{path}.front: HDV {front!r} does not exist")
        params = _hdv_params(h, path, errors, base_params)
        p0 = _num(h, "initial_position_m", path, errors)
        v0 = _num(h, "initial_velocity_mps", path, errors)
        if params is not None and None not in (hid, p0, v0):
            hdvs.append(HdvSpec(hid, model, params, p0, v0, front))
    n_hdv = len(hdv_docs)

    cavs: list[CavSpec] = []
    cav_docs = raw.get("cavs")
    if not isinstance(cav_docs, list) or not cav_docs:
        errors.append("$.cavs: missing or empty")
        cav_docs = []
    measured: set[tuple[int, int]] = set()
    for idx, c in enumerate(cav_docs):
        path = f"$.cavs[{idx}]"
        cid = _num(c, "id", path, errors, integer=True)
        if cid is not None and cid != idx:
            errors.append(f"{path}.id: ids must be 0..n-1 in order (expected {idx})")
        coords = []
        for r, meas in enumerate(c.get("measures", [])):
            mp = f"{path}.measures[{r}]"
            hdv = meas.get("hdv")
            ch = CHANNELS.get(meas.get("channel"))
            if not isinstance(hdv, int) or not 0 <= hdv < n_hdv:
                errors.append(f"{mp}.hdv: HDV {hdv!r} does not exist")
                continue
            if ch is None or ch >= m:
                errors.append(f"{mp}.channel: {meas.get('channel')!r} not available under {kind}")
                continue
            coords.append((hdv, ch))
            measured.add((hdv, ch))
        if not coords:
            errors.append(f"{path}.measures: CAV takes no measurement")
        nv = c.get("noise_var", 0.0)
        nv = list(nv) if isinstance(nv, list) else [nv] * len(coords)
        if len(nv) != len(coords) or any(not isinstance(v, (int, float)) or v < 0 for v in nv):
            errors.append(f"{path}.noise_var: need one non-negative variance per measured channel")
        fault = None
        if c.get("fault"):
            fd = c["fault"]
            fp = f"{path}.fault"
            onset = _num(fd, "onset_step", fp, errors, integer=True, nonneg=True)
            mean = _num(fd, "mean", fp, errors)
            var = _num(fd, "variance", fp, errors, nonneg=True)
            if onset is not None and horizon is not None and onset >= horizon:
                errors.append(f"{fp}.onset_step: onset beyond horizon")
            if None not in (onset, mean, var) and var >= 0 and onset >= 0:
                fault = FaultProfile(onset, mean, var, bool(fd.get("active", True)))
        cavs.append(CavSpec(idx, coords, [float(v) for v in nv] if len(nv) == len(coords) else [], fault))

    for h in range(n_hdv):
        if not any((h, ch) in measured for ch in range(m)):
            errors.append(f"$.hdvs[{h}]: HDV measured by no CAV; the observability necessary condition "
                          "(every HDV measured by at least one CAV) is violated")

    network = _parse_network(raw.get("network"), len(cav_docs), errors)
    rule = raw.get("consensus_rule", "uniform")
    if rule not in ("uniform", "metropolis_hastings"):
        errors.append(f"$.consensus_rule: unknown rule {rule!r}")

    noise = raw.get("noise", {})
    system_var = list(noise.get("system_var", [0.0] * m))
    if len(system_var) != m or any(v < 0 for v in system_var):
        errors.append(f"$.noise.system_var: need {m} non-negative variances")
    if "bound_process_var" in noise:
        bound_var = list(noise["bound_process_var"])
    else:
        sig = max((h.params.process_noise_var for h in hdvs if h.model == "free_flow"), default=0.0)
        bound_var = list(system_var)
        if len(bound_var) == m:
            bound_var[1] += sig
    if len(bound_var) != m or any(v < 0 for v in bound_var):
        errors.append(f"$.noise.bound_process_var: need {m} non-negative variances")

    gdoc = raw.get("gain", {})
    eps = _num(gdoc, "epsilon", "$.gain", errors, required=False, default=0.5)
    if eps is not None and not 0 < eps < 1:
        errors.append("$.gain.epsilon: must lie in (0, 1)")
    fixed = gdoc.get("fixed_gains")
    if fixed is not None and len(fixed) != m:
        errors.append(f"$.gain.fixed_gains: need {m} gains")
    gain = GainSpec(eps, gdoc.get("search"), fixed, float(gdoc.get("c", 1.0)))

    fdoc = raw.get("fdi", {})
    stateful = []
    for r, s in enumerate(fdoc.get("stateful", [])):
        try:
            stateful.append(StatefulConfig(int(s["T"]), float(s["far"]), float(s.get("lambda", 1.0))))
            if horizon is not None and int(s["T"]) >= horizon:
                errors.append(f"$.fdi.stateful[{r}].T: window longer than horizon")
            if not 0 < float(s["far"]) < 1:
                errors.append(f"$.fdi.stateful[{r}].far: must lie in (0, 1)")
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"$.fdi.stateful[{r}]: {exc}")
    fdi = FdiSpec([float(v) for v in fdoc.get("stateless_m", [2.0])], stateful)
    if any(v <= 0 for v in fdi.stateless_m):
        errors.append("$.fdi.stateless_m: detection levels must be positive")

    steady = float(raw.get("steady_fraction", 0.4))
    if not 0 < steady <= 1:
        errors.append("$.steady_fraction: must lie in (0, 1]")

    init = raw.get("initial_estimate", "zero")
    init_var = 0.0
    if isinstance(init, dict):
        init_var = _num(init, "variance", "$.initial_estimate", errors, required=False, default=0.0, nonneg=True)
        init = init.get("mode")
    if init not in ("zero", "truth", "perturbed_truth"):
        errors.append(f"$.initial_estimate: expected 'zero', 'truth' or 'perturbed_truth', got {init!r}")

    if errors:
        raise ScenarioError(errors)
    return Scenario(
        name=str(raw.get("name", "scenario")), seed=seed, horizon=horizon, sampling_dt=dt,
        model_kind=kind, hdvs=hdvs, cavs=cavs, network=network, consensus_rule=rule,
        system_var=[float(v) for v in system_var], bound_process_var=[float(v) for v in bound_var],
        gain=gain, fdi=fdi, steady_fraction=steady,
        baseline_L=[int(v) for v in raw.get("baseline_L", [7, 10, 15])], initial_estimate=init,
        initial_variance=float(init_var or 0.0), raw=copy.deepcopy(raw),
    )


def load_scenario(path_or_name: str | Path) -> Scenario:
    """Load a scenario file, or a bundled preset by name."""
    p = Path(path_or_name)
    if p.suffix != ".json" and str(path_or_name) in PRESETS:
        return validate_scenario(preset_document(str(path_or_name)))
    return validate_scenario(json.loads(p.read_text()))


def preset_document(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("fleet_observer.presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def load_preset(name: str, **overrides) -> Scenario:
    doc = preset_document(name)
    doc.update(overrides)
    return validate_scenario(doc)
