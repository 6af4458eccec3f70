"""Command-line entry point.

Subcommands: generate, train-gcn, sample, offload, simulate, bounds, report.
Exit code 0 on success; failures print one machine-readable JSON error line
to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .gcn import GcnModel
from .harness import (SCHEME_NAMES, ExperimentConfig, ExperimentResult,
                      default_config, fleet_bound_rows, report,
                      run_convex_fleet, run_experiment, select_devices,
                      train_smart_sampler)
from .network import generate_scenario, save_scenario
from .offload import OffloadPlan, check_feasible


def _load_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.from_file(args.config)
    else:
        config = default_config()
    if getattr(args, "seed", None) is not None:
        config.scenario = replace(config.scenario, rng_seed=args.seed)
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    net = generate_scenario(config.scenario)
    config.to_file(out / "config.json")
    save_scenario(net, out / "scenario.json")
    print(f"wrote {out / 'scenario.json'}")
    return 0


def cmd_train_gcn(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    model = train_smart_sampler(config, realizations=args.realizations)
    model.save(out / "gcn.json")
    print(f"wrote {out / 'gcn.json'}")
    return 0


def _scheme(args):
    if args.scheme not in SCHEME_NAMES:
        raise ValueError(
            f"unknown scheme {args.scheme!r}; choose from "
            f"{sorted(SCHEME_NAMES)}")
    return SCHEME_NAMES[args.scheme]


def _maybe_gcn(args, config, scheme) -> GcnModel | None:
    if scheme.sampling_kind != "smart":
        return None
    if args.gcn:
        return GcnModel.load(args.gcn)
    return train_smart_sampler(config)


def cmd_sample(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    scheme = _scheme(args)
    net = generate_scenario(config.scenario)
    gcn_model = _maybe_gcn(args, config, scheme)
    sampling = select_devices(config, scheme, net, gcn_model)
    payload = {"schema_version": 1, "kind": "fedoff-sampling",
               "scheme": scheme.name, "ids": sampling.ids,
               "budget": sampling.budget}
    (out / "sampling.json").write_text(json.dumps(payload, sort_keys=True))
    print(f"wrote {out / 'sampling.json'}")
    return 0


def _run_scheme(config, scheme, gcn_model):
    return run_experiment(config, scheme, gcn_model=gcn_model,
                          keep_traces=True)


def cmd_offload(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    scheme = _scheme(args)
    gcn_model = _maybe_gcn(args, config, scheme)
    result = _run_scheme(config, scheme, gcn_model)
    trace = result.traces[0]
    net = generate_scenario(config.scenario)
    sampling = select_devices(config, scheme, net, gcn_model)
    plan = OffloadPlan(
        phis=[phi for phi in trace.phis[1:]],
        objective_value=float("nan"),
        feasibility=[check_feasible(trace.phis[t], trace.states[t - 1], sampling)
                     for t in range(1, trace.steps + 1)],
    )
    plan.save(out / "plan.json")
    print(f"wrote {out / 'plan.json'} (feasible={plan.feasible()})")
    return 0


def cmd_simulate(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    schemes = ([_scheme(args)] if args.scheme
               else [SCHEME_NAMES[name] for name in sorted(SCHEME_NAMES)])
    needs_gcn = any(s.sampling_kind == "smart" for s in schemes)
    gcn_model = None
    if needs_gcn:
        gcn_model = GcnModel.load(args.gcn) if args.gcn \
            else train_smart_sampler(config)
    results = []
    for scheme in schemes:
        result = run_experiment(config, scheme, gcn_model=gcn_model)
        results.append(result)
        (out / f"result_{scheme.name}.json").write_text(
            json.dumps(result.to_dict(), sort_keys=True))
    report(results, out, threshold_fraction=config.threshold_fraction)
    print(f"wrote {len(results)} result files and reports to {out}")
    return 0


def cmd_bounds(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    runs = run_convex_fleet(n_runs=args.runs,
                            base_seed=config.scenario.rng_seed)
    rows = fleet_bound_rows(runs)
    from .bounds import write_bound_report
    write_bound_report(rows, out / "bounds.csv")
    violations = {
        "theorem1": sum(r.evaluation.theorem_violations for r in runs),
        "proposition1": sum(r.evaluation.prop1_violations for r in runs),
        "corollary1": sum(r.evaluation.corollary_violations for r in runs),
        "max_required_gamma": max(r.required_gamma for r in runs),
    }
    (out / "bounds_summary.json").write_text(
        json.dumps({"schema_version": 1, "kind": "fedoff-bounds-summary",
                    "runs": len(runs), **violations}, sort_keys=True))
    print(f"wrote {out / 'bounds.csv'}: {violations}")
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    results = []
    for path in sorted(Path(args.results).glob("result_*.json")):
        results.append(ExperimentResult.from_dict(json.loads(path.read_text())))
    if not results:
        raise ValueError(f"no result_*.json files under {args.results}")
    written = report(results, out)
    print(f"wrote {[str(p) for p in written]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedoff",
        description="Smart device sampling with D2D data offloading for "
                    "federated learning (desk-scale simulator)")
    parser.add_argument("--verbose", action="store_true",
                        help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scheme=False, gcn=False):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override scenario seed")
        p.add_argument("--out", default="out", help="output directory")
        if scheme:
            p.add_argument("--scheme", help="scheme name "
                           f"({', '.join(sorted(SCHEME_NAMES))})")
        if gcn:
            p.add_argument("--gcn", help="trained GCN weights file")

    p = sub.add_parser("generate", help="write a scenario snapshot")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-gcn", help="build corpus and train the sampler")
    common(p)
    p.add_argument("--realizations", type=int, default=None)
    p.set_defaults(func=cmd_train_gcn)

    p = sub.add_parser("sample", help="emit the sampled device set")
    common(p, scheme=True, gcn=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("offload", help="emit an offloading plan")
    common(p, scheme=True, gcn=True)
    p.set_defaults(func=cmd_offload)

    p = sub.add_parser("simulate", help="full run: sample, offload, train, report")
    common(p, scheme=True, gcn=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bounds", help="run the convex fleet and bound report")
    common(p)
    p.add_argument("--runs", type=int, default=50)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("report", help="aggregate result files into reports")
    p.add_argument("--results", default="out", help="directory of result files")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except Exception as exc:  # surface a machine-readable error line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
