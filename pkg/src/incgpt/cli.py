"""Command-line interface.

Subcommands: ingest (corpus prep), run (one training regime from a config
file), compare (equal-compute reports), plot, cost (closed-form cost
quantities for a given L/S/T). Exit codes: 0 success, 1 runtime/data
error, 2 usage or configuration error.
"""

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from incgpt import costs, data, harness, plots
from incgpt.config import load_train_config
from incgpt.errors import ConfigError, IncgptError


def _cmd_ingest(args):
    train, val = data.ingest_to_dir(args.paths, args.out, args.val_fraction,
                                    args.seed, args.doc_sep)
    print(f"train: {len(train)} tokens from {train.n_docs} docs "
          f"(digest {train.source_digest[:12]})")
    print(f"val:   {len(val)} tokens from {val.n_docs} docs "
          f"(digest {val.source_digest[:12]})")
    print(f"cached under {args.out}")
    return 0


def _cmd_run(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.precision is not None:
        overrides["precision"] = args.precision
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.data is not None:
        overrides["data_dir"] = args.data
    cfg = load_train_config(args.config, overrides)
    trace = harness.run(cfg, log_every=args.log_every)
    out_dir = harness.resolve_out_dir(cfg.out_dir)
    print(f"run complete: {len(trace.rows)} steps, trace at {out_dir / 'trace.csv'}")
    return 0


def _load_traces(paths):
    return [harness.RunTrace.load(p) for p in paths]


def _cmd_compare(args):
    baseline = harness.RunTrace.load(args.baseline)
    incrementals = _load_traces(args.incremental)
    report = harness.compare(baseline, incrementals, args.baseline_steps)
    print(report.to_text())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        print(f"report written to {args.json}")
    return 0


def _cmd_plot(args):
    traces = {}
    for spec in args.traces:
        label, _, path = spec.rpartition("=")
        if not label:
            path = spec
            label = Path(path).parent.name or Path(path).stem
        traces[label] = harness.RunTrace.load(path)
    markers = []
    if args.markers:
        payload = json.loads(Path(args.markers).read_text())
        for row in payload.get("rows", []):
            if row.get("equal_step") is not None:
                label = row.get("label", "")
                if label in traces:
                    markers.append((label, row["equal_step"]))
    manifest = plots.emit_plots(traces, markers, args.out)
    print(json.dumps(manifest, indent=2))
    return 0


def _cmd_cost(args):
    params = costs.make_params(
        args.layers, args.stages,
        steps_baseline=args.baseline_steps,
        steps_incremental=args.inc_steps,
        unit_cost=Fraction(args.unit_cost),
        backward_ratio=Fraction(args.rho),
    )
    scale = args.tokens_per_step
    f = costs.format_fraction
    c_base = costs.baseline_cost(params) * scale
    c_inc = costs.incremental_cost_brute_force(params) * scale
    print(f"C_baseline    = {f(c_base)} units")
    print(f"C_incremental = {f(c_inc)} units")
    if params.backward_ratio == 1:
        closed = costs.incremental_cost_closed_form(params) * scale
        print(f"  closed form = {f(closed)} units (T*c*L*(3S+5)/(4S))")
    t_cont, equal_step = costs.continual_tokens_to_match(params)
    print(f"T_cont        = {f(t_cont)} steps")
    print(f"equal-compute step = {equal_step}")
    if args.table:
        print(costs.report_text(params))
    if args.csv:
        costs.report_csv(params, args.csv)
        print(f"per-stage breakdown written to {args.csv}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="incgpt",
        description="Incremental layer-wise GPT training at desk scale.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    pi = sub.add_parser("ingest", help="tokenize text files into a corpus cache")
    pi.add_argument("paths", nargs="+", help="plain-text / newline-delimited files")
    pi.add_argument("--out", required=True, help="cache directory")
    pi.add_argument("--val-fraction", type=float, default=0.1)
    pi.add_argument("--seed", type=int, default=0)
    pi.add_argument("--doc-sep", choices=["blank", "line"], default="blank",
                    help="document boundary: blank lines, or one doc per line")
    pi.set_defaults(func=_cmd_ingest)

    pr = sub.add_parser("run", help="execute one training run from a config file")
    pr.add_argument("--config", required=True)
    pr.add_argument("--seed", type=int, default=None,
                    help="override run seed and model init seed")
    pr.add_argument("--precision", choices=["verify64", "fast32"], default=None)
    pr.add_argument("--out", default=None, help="override output directory")
    pr.add_argument("--data", default=None, help="override corpus cache directory")
    pr.add_argument("--log-every", type=int, default=100)
    pr.set_defaults(func=_cmd_run)

    pc = sub.add_parser("compare", help="equal-compute comparison of traces")
    pc.add_argument("--baseline", required=True, help="baseline trace.csv")
    pc.add_argument("--incremental", nargs="+", required=True,
                    help="incremental trace.csv files")
    pc.add_argument("--baseline-steps", type=int, default=None)
    pc.add_argument("--json", default=None, help="also write the report as JSON")
    pc.set_defaults(func=_cmd_compare)

    pp = sub.add_parser("plot", help="loss curves with equal-compute markers")
    pp.add_argument("traces", nargs="+", help="label=trace.csv (label optional)")
    pp.add_argument("--out", required=True, help="output SVG path")
    pp.add_argument("--markers", default=None,
                    help="JSON report from `incgpt compare --json`")
    pp.set_defaults(func=_cmd_plot)

    pk = sub.add_parser("cost", help="print the cost-model quantities")
    pk.add_argument("--layers", type=int, required=True)
    pk.add_argument("--stages", type=int, required=True)
    pk.add_argument("--baseline-steps", type=int, required=True)
    pk.add_argument("--inc-steps", type=int, default=None,
                    help="incremental budget (default: baseline steps)")
    pk.add_argument("--rho", default="1",
                    help="backward/forward cost ratio (fraction, e.g. 3/2)")
    pk.add_argument("--unit-cost", default="1")
    pk.add_argument("--tokens-per-step", type=int, default=1)
    pk.add_argument("--table", action="store_true",
                    help="print the per-stage/phase cost breakdown")
    pk.add_argument("--csv", default=None,
                    help="write the breakdown as CSV")
    pk.set_defaults(func=_cmd_cost)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IncgptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
