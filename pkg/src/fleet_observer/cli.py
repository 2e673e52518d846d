"""Command-line entry point: ``fleet-observer <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dynamics import assumed_model
from .gain import GainSynthesisError
from .harness.campaign import monte_carlo
from .harness.output import json_safe, dump_json, emit_plots, write_comparison, write_result
from .harness.run import (
    ObservabilityError, build_network, build_sensors, certificates_of, compare_baseline, prepare, run_scenario,
)
from .harness.scenario import ScenarioError, load_scenario
from .topology import build_shared_observation, check_distributed_observability

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CERTIFICATE = 3


def _load(args):
    s = load_scenario(args.scenario)
    if args.seed is not None:
        s = s.with_seed(args.seed)
    return s


def _emit(doc, args, name: str):
    doc = json_safe(doc)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dump_json(doc, out / name)
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_simulate(args) -> int:
    s = _load(args)
    result = run_scenario(s)
    if args.out:
        write_result(result, Path(args.out), args.format)
    summary = {"scenario": s.name, "seed": result.seed, "mse": result.metrics["mse"],
               "certificates": result.certificates,
               "alarm_rate_post": {k: v["alarm_rate_post"] for k, v in result.metrics["detectors"].items()},
               "error_dynamics_defect": result.metrics["error_dynamics_defect"]}
    print(json.dumps(json_safe(summary), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gain_synth(args) -> int:
    s = _load(args)
    setup = prepare(s)
    doc = {"gain": json.loads(setup.design.to_json()), "certificates": certificates_of(setup)}
    _emit(doc, args, "gain.json")
    return EXIT_OK


def cmd_check_observability(args) -> int:
    s = _load(args)
    network = build_network(s)
    sensors, _ = build_sensors(s)
    shared = build_shared_observation([sp.C for sp in sensors], network.neighborhoods)
    A = assumed_model(s.model_kind, s.sampling_dt, s.n_hdv).A
    report = check_distributed_observability(network.W, A, shared.D_C)
    _emit(report, args, "observability.json")
    return EXIT_OK if report["observable"] else EXIT_CERTIFICATE


def cmd_montecarlo(args) -> int:
    s = _load(args)
    seeds = [int(v) for v in args.seeds.split(",")] if args.seeds else None
    camp = monte_carlo(s, args.trials, seeds)
    doc = {k: camp[k] for k in ("trials", "seeds", "aggregate", "per_trial")}
    _emit(doc, args, "montecarlo.json")
    return EXIT_OK


def cmd_compare_baseline(args) -> int:
    s = _load(args)
    L_values = [int(v) for v in args.L.split(",")] if args.L else s.baseline_L
    comp = compare_baseline(s, L_values)
    if args.out:
        write_comparison(comp, Path(args.out))
    print(json.dumps(json_safe(comp["table"]), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_emit_plots(args) -> int:
    path = emit_plots(Path(args.result_dir))
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fleet-observer",
                                description="Distributed HDV tracking and fault detection over a CAV network.")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_cmd(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("scenario", help="scenario JSON file or bundled preset name")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.set_defaults(func=fn)
        return sp

    scenario_cmd("simulate", cmd_simulate, "run one scenario end to end")
    scenario_cmd("gain-synth", cmd_gain_synth, "synthesize and certify the observer gain")
    scenario_cmd("check-observability", cmd_check_observability, "rank test of (W kron A, D_C)")
    mc = scenario_cmd("montecarlo", cmd_montecarlo, "independent-seed campaign with confidence intervals")
    mc.add_argument("--trials", type=int, default=20)
    mc.add_argument("--seeds", default=None, help="comma-separated seeds (default: seed, seed+1, ...)")
    cb = scenario_cmd("compare-baseline", cmd_compare_baseline, "compare against the L-sweep baseline")
    cb.add_argument("--L", default=None, help="comma-separated inner-loop lengths, e.g. 7,10,15")
    ep = sub.add_parser("emit-plots", help="write a plot manifest for a result directory")
    ep.add_argument("result_dir")
    ep.set_defaults(func=cmd_emit_plots)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except (json.JSONDecodeError, FileNotFoundError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ObservabilityError, GainSynthesisError) as exc:
        print(f"certificate failure: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE


if __name__ == "__main__":
    sys.exit(main())
