"""Command line entry point: ``elastiq run|layers|analyze|render``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from . import experiment, qcore, rqa, topology
from .errors import AnalyticError, ElastiqError, TopologyError, ValidationError, WorkloadError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
ANALYZE_SCHEMA = "elastiq-analyze/1"

log = logging.getLogger("elastiq")


def _plot_series(path: str, series: Dict[str, Sequence[float]], xlabel: str, ylabel: str, x=None):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # plotting is optional
        raise ValidationError("--plot needs matplotlib (pip install 'artifact[plot]')") from exc
    fig, ax = plt.subplots(figsize=(8, 4))
    for label, ys in series.items():
        xs = x if x is not None else list(range(1, len(ys) + 1))
        ax.plot(xs, ys, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- run / layers ------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = experiment.load_config(args.config)
    out = args.out or cfg.output
    reports = experiment.run_paired(cfg, parallel=not args.sequential)
    files = experiment.write_outputs(out, cfg, reports)
    rows = experiment.summary_rows(reports)
    if args.plot:
        svg = os.path.join(out, "completed.svg")
        _plot_series(svg, {"with": [r[1] for r in rows], "without": [r[2] for r in rows]},
                     "window", "completed requests")
        files.append(svg)
    sys.stdout.write(experiment.render_table(rows))
    for f in files:
        log.info("wrote %s", f)
    return EXIT_OK


def cmd_layers(args) -> int:
    try:
        depths = [int(x) for x in args.depths.split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad --depths {args.depths!r}") from exc
    if not depths:
        raise ValidationError("--depths is empty")
    base = None if args.config == "builtin" else experiment.load_config(args.config)
    rows = experiment.layers_rows(depths, base, parallel=not args.sequential)
    text = experiment.layers_csv(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "layers.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        if args.plot:
            series = {}
            for depth, mode, ttc, _ in rows:
                series.setdefault(mode, []).append(ttc or 0.0)
            _plot_series(os.path.join(args.out, "layers.svg"), series, "depth", "time to capacity (s)",
                         x=sorted(set(depths)))
    sys.stdout.write(text)
    return EXIT_OK


# -- analyze -------------------------------------------------------------------

def _per_class(value, topo, what) -> Dict:
    if value is None:
        return {}
    if isinstance(value, (int, float)):
        return {k: float(value) for k in topo.class_specs}
    out = {}
    for key, v in value.items():
        node, _, cls = key.partition("/")
        if (node, cls) not in topo.class_specs:
            raise ValidationError(f"{what}: unknown class {key!r} (use node/class)")
        out[(node, cls)] = float(v)
    return out


def analyze(topo: topology.AppTopology, spec: dict):
    """Per-node analytics rows for the rates document ``spec``."""
    demands = topo.demands()
    demands.update(_per_class(spec.get("demand"), topo, "demand"))
    deadlines = topo.deadlines()
    deadlines.update(_per_class(spec.get("deadline"), topo, "deadline"))
    external = {}
    for key, lam in (spec.get("external") or {}).items():
        if key in topo.chains:
            external[topo.chains[key].entry.key] = float(lam)
        else:
            node, _, cls = key.partition("/")
            external[(node, cls)] = float(lam)
    if not external:
        raise ValidationError("rates file has no external rates")
    table = qcore.propagate_rates(qcore.RateTable(external, {}, demands), topo.routing)
    fixed = spec.get("servers") or {}
    rows = []
    for node in sorted(topo.nodes):
        lams = table.at_node(node)
        lam = sum(lams.values())
        load = qcore.offered_load(table, node)
        need = qcore.required_servers(table, deadlines, node)
        servers = int(fixed.get(node, need))
        util = qcore.utilization(table, servers, node)
        thr = lam * min(1.0, servers / load) if load > 0 else 0.0
        rho = qcore.load_factors(lams, {c: demands[(node, c)] for c in lams}, servers)
        p_empty = qcore.stationary_probability({}, rho) if lam > 0 else 1.0
        rows.append({"node": node, "lambda": lam, "offered_load": load, "required_servers": need,
                     "servers": servers, "utilization": util, "throughput": thr, "p_empty": p_empty})
    return rows, table, demands


def cmd_analyze(args) -> int:
    topo = topology.load(args.topology)
    problems = topology.validate(topo)
    if problems:
        raise ValidationError("invalid topology: " + "; ".join(problems))
    with open(args.rates, encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"rates file is not valid JSON: {exc}") from exc
    rows, table, demands = analyze(topo, spec)
    out = sys.stdout
    out.write(f"# {ANALYZE_SCHEMA}\n")
    w = csv.writer(out, lineterminator="\n")
    cols = ["node", "lambda", "offered_load", "required_servers", "servers", "utilization", "throughput", "p_empty"]
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], (str, int)) else f"{r[c]:.6f}" for c in cols])
    if args.sojourn:
        k, n, horizon = args.sojourn
        node = args.node or topo.root_nodes()[0]
        row = next((r for r in rows if r["node"] == node), None)
        if row is None:
            raise ValidationError(f"unknown node {node}")
        lam = row["lambda"]
        mean = row["offered_load"] / lam if lam > 0 else min(demands[(node, c)] for c in topo.classes_at(node))
        quantum = args.quantum or min(mean / 10.0, 0.5 / lam if lam > 0 else mean)
        params = rqa.RqaParams(lam, mean, quantum, row["servers"])
        dist = rqa.sojourn_distribution(k, n, params, horizon)
        out.write(f"# sojourn node={node} k={k} N={n} quantum={quantum:.6g}\n")
        w.writerow(["m", "probability"])
        for m in sorted(dist):
            w.writerow([m, f"{dist[m]:.10g}"])
        if args.plot:
            _plot_series(args.plot, {f"P(k={k}, m, N={n})": [dist[m] for m in sorted(dist)]},
                         "extra quanta m", "probability", x=sorted(dist))
    return EXIT_OK


# -- render --------------------------------------------------------------------

def cmd_render(args) -> int:
    if args.from_paper:
        text = experiment.reference_summary_csv()
    elif args.summary:
        with open(args.summary, encoding="utf-8") as fh:
            text = fh.read()
    else:
        raise ValidationError("render needs --from-paper or a summary file")
    rows = experiment.read_summary(text)
    if args.csv:
        sys.stdout.write(text)
    else:
        sys.stdout.write(experiment.render_table(rows))
    if args.plot:
        _plot_series(args.plot, {"with": [r[1] for r in rows], "without": [r[2] for r in rows]},
                     "window", "completed requests", x=[r[0] for r in rows])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastiq", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="paired run of both scaler modes")
    r.add_argument("config")
    r.add_argument("--out")
    r.add_argument("--sequential", action="store_true", help="run the two modes one after the other")
    r.add_argument("--plot", action="store_true")
    r.set_defaults(func=cmd_run)

    l = sub.add_parser("layers", help="step overload on linear chains of several depths")
    l.add_argument("config", help="experiment config, or 'builtin'")
    l.add_argument("--depths", default="4,5,6")
    l.add_argument("--out")
    l.add_argument("--sequential", action="store_true")
    l.add_argument("--plot", action="store_true")
    l.set_defaults(func=cmd_layers)

    a = sub.add_parser("analyze", help="steady-state analytics for given external rates")
    a.add_argument("topology", help="topology JSON or builtin:fig4")
    a.add_argument("rates", help="JSON with external rates and optional demand/deadline/servers")
    a.add_argument("--sojourn", nargs=3, type=int, metavar=("K", "N", "HORIZON"))
    a.add_argument("--node")
    a.add_argument("--quantum", type=float)
    a.add_argument("--plot", metavar="SVG")
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("render", help="show a summary table")
    d.add_argument("summary", nargs="?")
    d.add_argument("--from-paper", action="store_true", help="the published reference table")
    d.add_argument("--csv", action="store_true")
    d.add_argument("--plot", metavar="SVG")
    d.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, TopologyError, WorkloadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except AnalyticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ElastiqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
