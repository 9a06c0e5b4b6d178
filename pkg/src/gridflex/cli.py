"""Command line entry point: ``gridflex run|sweep|opf``."""

from __future__ import annotations

import argparse
import sys
import time

from .runner import StageError, load_config, read_polygons_json, run_scenario, write_outputs

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_INPUT = 3
EXIT_SOLVER = 4

_KIND_EXIT = {"input": EXIT_INPUT, "infeasible": EXIT_INFEASIBLE, "solver": EXIT_SOLVER}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridflex", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="scenario JSON file")
    common.add_argument("--alpha", type=float, help="uncertainty level")
    common.add_argument("--gamma", type=float, help="uncertainty budget")
    common.add_argument("--directions", type=int, help="number of search directions")
    common.add_argument("--future-load-kw", type=float, help="extra uncontrolled load per LV grid")
    common.add_argument("--horizon-hours", type=float, help="loss accumulation horizon")
    common.add_argument("--label", help="scenario label")
    common.add_argument("--out", default="out", help="output directory")
    sub.add_parser("run", parents=[common], help="flexibility sweep then robust MV OPF")
    sub.add_parser("sweep", parents=[common], help="flexibility sweep only")
    opf = sub.add_parser("opf", parents=[common], help="robust MV OPF on precomputed polygons")
    opf.add_argument("--polygons", required=True, help="polygons.json from a previous sweep")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = load_config(
            args.config,
            alpha=args.alpha,
            gamma=args.gamma,
            directions=args.directions,
            future_load_kw=args.future_load_kw,
            horizon_hours=args.horizon_hours,
            label=args.label,
        )
        if args.command == "opf":
            report = run_scenario(cfg, "opf", read_polygons_json(args.polygons))
        else:
            report = run_scenario(cfg, "flex" if args.command == "sweep" else "all")
        write_outputs(report, args.out, started)
    except StageError as exc:
        status = f" (solver status: {exc.status})" if exc.status else ""
        print(f"gridflex: {exc}{status}", file=sys.stderr)
        return _KIND_EXIT[exc.kind]
    except OSError as exc:
        print(f"gridflex: [io] {exc}", file=sys.stderr)
        return EXIT_INPUT
    summary = report.doc.get("summary", {})
    for name, row in summary.items():
        print(f"{name:>8}: losses {row['losses_kwh']:.3f} kWh, violation cost {row['violation_cost_chf']:.3f} CHF")
    print(f"report written to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
