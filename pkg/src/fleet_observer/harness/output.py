"""CSV / JSON writers for run results and the plot manifest.

Floats are written in shortest round-trip form so traces read back exactly and
repeated runs with the same seed give byte-identical files.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from ..fdi import H0, H1, far_of_statistic
from ..matstat import erf
from .run import RunResult, cav_alarms

CHANNEL_NAMES = ("position", "velocity", "acceleration")
TRACE_COLUMNS = ["step", "time_s", "cav_id", "hdv_id", "channel", "truth", "estimate", "residual"]
ALARM_COLUMNS = ["step", "time_s", "cav_id", "hdv_id", "channel", "detector", "mode", "statistic",
                 "threshold", "implied_far", "hypothesis"]


def fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def json_safe(obj):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_trace(result: RunResult, path: Path):
    """Long format: one row per (step, CAV, HDV coordinate); residual and detector columns
    are filled on the coordinates that CAV measures itself."""
    s = result.scenario
    setup = result.setup
    m = s.m
    own = {(cav, h * m + ch): idx for idx, (cav, h, ch) in enumerate(setup.channels)}
    det_cols = [f"stat_{d.label}" for d in result.detectors] + [f"alarm_{d.label}" for d in result.detectors]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS + det_cols)
        truth, est, res = result.realization.truth, result.estimates, result.residuals
        for k in range(1, s.horizon + 1):
            t = fmt(k * s.sampling_dt)
            for i in range(setup.network.n):
                for c in range(s.dim):
                    idx = own.get((i, c))
                    row = [k, t, i, c // m, CHANNEL_NAMES[c % m], fmt(truth[k, c]), fmt(est[k, i, c])]
                    if idx is None:
                        row += [""] * (1 + len(det_cols))
                    else:
                        row.append(fmt(res[k - 1, idx]))
                        stats = [fmt(d.statistic[k - 1, idx]) for d in result.detectors]
                        flags = [int(bool(d.alarms[k - 1, idx])) for d in result.detectors]
                        row += stats + flags
                    w.writerow(row)


def implied_far(det, value: float, idx: int) -> float:
    """False-alarm rate at which ``value`` would just reach the threshold."""
    if det.mode == "stateless":
        phi = det.threshold[idx] / det.m
        return 1.0 - erf(value / (phi * math.sqrt(2.0)))
    cfg = det.config
    return far_of_statistic(value, cfg.T, cfg.lam if cfg.weighted else None)


def write_alarm_log(result: RunResult, path: Path):
    """Every H1 decision, one row per detector, CAV channel and step."""
    s = result.scenario
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ALARM_COLUMNS)
        for k in range(1, s.horizon + 1):
            for idx, (cav, h, ch) in enumerate(result.setup.channels):
                for d in result.detectors:
                    if not d.alarms[k - 1, idx]:
                        continue
                    stat = d.statistic[k - 1, idx]
                    thr = d.threshold[idx]
                    w.writerow([k, fmt(k * s.sampling_dt), cav, h, CHANNEL_NAMES[ch], d.label, d.mode, fmt(stat),
                                fmt(thr), fmt(implied_far(d, stat, idx)), H1])


def write_cav_alarms(result: RunResult, path: Path):
    """Per-step CAV-level hypotheses (any channel in alarm) for every detector."""
    s = result.scenario
    cols = [cav_alarms(result.setup, d) for d in result.detectors]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time_s", "cav_id"] + [d.label for d in result.detectors])
        for k in range(1, s.horizon + 1):
            for i in range(result.setup.network.n):
                w.writerow([k, fmt(k * s.sampling_dt), i] + [H1 if c[k - 1, i] else H0 for c in cols])


def write_result(result: RunResult, out: Path, fmt_kind: str = "csv") -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt_kind == "csv":
        for name, fn in (("trace.csv", write_trace), ("alarm_log.csv", write_alarm_log),
                         ("cav_alarms.csv", write_cav_alarms)):
            write_path = out / name
            fn(result, write_path)
            written.append(write_path)
    else:
        doc = {
            "truth": result.realization.truth.tolist(),
            "estimates": result.estimates.tolist(),
            "residuals": result.residuals.tolist(),
            "channels": [list(c) for c in result.setup.channels],
            "detectors": {d.label: {"statistic": d.statistic.tolist(), "threshold": d.threshold.tolist()}
                          for d in result.detectors},
        }
        write_path = out / "trace.json"
        dump_json(json_safe(doc), write_path)
        written.append(write_path)
    for name, obj in (("metrics.json", result.metrics), ("certificates.json", result.certificates),
                      ("scenario.json", result.scenario.raw | {"seed": result.seed})):
        dump_json(json_safe(obj), out / name)
        written.append(out / name)
    return written


def write_comparison(comp: dict, out: Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "baseline_table.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["observer", "L", "messages", "messages_per_step", "message_ratio", "rho", "mse_steady"]
        w.writerow(cols)
        for row in comp["table"]:
            w.writerow([row[c] if isinstance(row[c], (str, int)) else fmt(row[c]) for c in cols])
    curves = out / "mse_curves.csv"
    with curves.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time_s", "observer", "mse"])
        for name, curve in comp["curves"].items():
            for k, v in enumerate(curve, start=1):
                w.writerow([k, fmt(k * comp["sampling_dt"]), name, fmt(v)])
    return [table, curves]


def emit_plots(result_dir: Path) -> Path:
    """Describe the figures reproducible from a result directory in ``plots.json``."""
    result_dir = Path(result_dir)
    figures = []
    if (result_dir / "trace.csv").exists():
        trace = "trace.csv"
        figures += [
            {"id": "positions", "file": trace, "x": "time_s", "y": ["truth", "estimate"],
             "filter": {"channel": "position"}, "group_by": ["hdv_id", "cav_id"],
             "title": "HDV positions and per-CAV estimates"},
            {"id": "velocities", "file": trace, "x": "time_s", "y": ["truth", "estimate"],
             "filter": {"channel": "velocity"}, "group_by": ["hdv_id", "cav_id"],
             "title": "HDV velocities and per-CAV estimates"},
            {"id": "residuals", "file": trace, "x": "time_s", "y": ["residual"], "group_by": ["cav_id", "channel"],
             "title": "Residuals at each CAV"},
        ]
        header = (result_dir / trace).open().readline().strip().split(",")
        for col in header:
            if col.startswith("stat_"):
                figures.append({"id": col[5:], "file": trace, "x": "time_s", "y": [col],
                                "group_by": ["cav_id", "channel"], "title": f"Detector statistic {col[5:]}"})
    if (result_dir / "mse_curves.csv").exists():
        figures.append({"id": "mse_comparison", "file": "mse_curves.csv", "x": "time_s", "y": ["mse"],
                        "group_by": ["observer"], "log_y": True,
                        "title": "CAV-averaged MSE, proposed observer against the L-sweep baseline"})
    if not figures:
        raise FileNotFoundError(f"no trace.csv or mse_curves.csv in {result_dir}")
    path = result_dir / "plots.json"
    dump_json({"figures": figures}, path)
    return path
