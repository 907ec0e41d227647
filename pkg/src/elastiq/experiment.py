"""Paired experiments: the same workload run with each scaler mode."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from . import qcore, topology as topo_mod, workload
from .autoscaler import Autoscaler, ScalerConfig
from .errors import ValidationError
from .simulator import SimConfig, SimReport, run as simulate

CONFIG_SCHEMA = "elastiq-experiment/1"
SUMMARY_SCHEMA = "elastiq-summary/1"
LAYERS_SCHEMA = "elastiq-layers/1"
MODES = ("independent", "dependency_aware")

# Completed requests per hour, (hour, with model, without model).
TABLE_III = (
    (1, 26000, 23790), (2, 52000, 42409), (3, 48600, 46495), (4, 43100, 43100),
    (5, 48700, 46796), (6, 40700, 40700), (7, 51300, 47696), (8, 36900, 36900),
    (9, 35700, 35700), (10, 30800, 30800), (11, 29500, 29500), (12, 31700, 30952),
    (13, 30700, 30700), (14, 24900, 24900), (15, 20000, 20000), (16, 28700, 25742),
    (17, 26300, 26110), (18, 36200, 32769), (19, 48600, 43218), (20, 56800, 52182),
    (21, 45700, 45700), (22, 47200, 46690), (23, 51100, 49601), (24, 67900, 61678),
)


@dataclass
class ExperimentConfig:
    topology: object = "builtin:fig4"
    topology_params: Dict = field(default_factory=dict)
    workload: Dict = field(default_factory=lambda: {"kind": "hourly", "profile": "clarknet", "peak": 8.0})
    sim: Dict = field(default_factory=dict)
    scaler: Dict = field(default_factory=dict)
    seed: int = 1
    output: str = "out"

    def sim_config(self) -> SimConfig:
        opts = dict(self.sim)
        opts.setdefault("seed", self.seed)
        return SimConfig(**opts)

    def scaler_config(self, mode: str) -> ScalerConfig:
        opts = dict(self.scaler)
        opts.setdefault("provisioning_delay", self.sim_config().provisioning_delay)
        return ScalerConfig(mode=mode, **opts)


def load_config(source, env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Read a JSON config (path, text or dict) and apply ``ELASTIQ_*`` overrides."""
    if isinstance(source, Mapping):
        doc = dict(source)
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            with open(text, encoding="utf-8") as fh:
                text = fh.read()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
    schema = doc.pop("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ValidationError(f"config schema {schema!r} is not {CONFIG_SCHEMA!r}")
    known = set(ExperimentConfig.__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise ValidationError(f"unknown config keys: {sorted(extra)}")
    cfg = ExperimentConfig(**doc)
    env = os.environ if env is None else env
    sim = dict(cfg.sim)
    if env.get("ELASTIQ_SEED"):
        cfg.seed = int(env["ELASTIQ_SEED"])
        sim.pop("seed", None)
    if env.get("ELASTIQ_DURATION"):
        sim["duration"] = float(env["ELASTIQ_DURATION"])
    if env.get("ELASTIQ_OUTPUT"):
        cfg.output = env["ELASTIQ_OUTPUT"]
    cfg.sim = sim
    try:
        cfg.sim_config().check()
        for mode in MODES:
            cfg.scaler_config(mode)
    except TypeError as exc:
        raise ValidationError(f"bad config field: {exc}") from exc
    return cfg


def build_topology(cfg: ExperimentConfig) -> topo_mod.AppTopology:
    spec = cfg.topology
    params = dict(cfg.topology_params)
    if isinstance(spec, Mapping):
        if "linear" in spec:
            return topo_mod.linear_chain(**{**params, **spec["linear"]})
        return topo_mod.from_dict(dict(spec))
    if spec == "builtin:fig4":
        return topo_mod.fig4_fixture(**params)
    return topo_mod.load(spec)


def build_workload(cfg: ExperimentConfig, topo: topo_mod.AppTopology) -> workload.Arrivals:
    spec = dict(cfg.workload)
    kind = spec.pop("kind")
    duration = cfg.sim_config().duration
    mix = spec.pop("mix", None) or {c: 1.0 for c in sorted(topo.chains)}
    if kind == "trace":
        records = workload.parse_trace_file(spec["path"])
        rules = [workload.ChainMixRule(**r) for r in spec.get("rules", [])] or \
            [workload.ChainMixRule(".", c) for c in sorted(topo.chains)[:1]]
        return workload.replay(records, rules, float(spec.get("time_scale", 1.0)))
    if kind == "hourly" and spec.get("profile") == "clarknet":
        spec["profile"] = workload.clarknet_profile(float(spec.pop("peak", 8.0)))
    return workload.synth(kind, spec, mix, cfg.seed, duration)


def run_mode(cfg: ExperimentConfig, mode: str) -> SimReport:
    topo = build_topology(cfg)
    arrivals = build_workload(cfg, topo)
    scaler = None if mode == "static" else Autoscaler(topo, cfg.scaler_config(mode))
    return simulate(topo, arrivals, scaler, cfg.sim_config())


def _run_job(args):
    cfg, mode = args
    return run_mode(cfg, mode)


def run_paired(cfg: ExperimentConfig, parallel: bool = True) -> Dict[str, SimReport]:
    jobs = [(cfg, m) for m in MODES]
    if parallel:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            reports = list(pool.map(_run_job, jobs))
    else:
        reports = [_run_job(j) for j in jobs]
    return dict(zip(MODES, reports))


def summary_rows(reports: Mapping[str, SimReport]) -> List[Tuple[int, int, int]]:
    with_, without = reports["dependency_aware"], reports["independent"]
    return [(i + 1, a.completed, b.completed) for i, (a, b) in enumerate(zip(with_.windows, without.windows))]


def summary_csv(rows: Sequence[Tuple[int, int, int]]) -> str:
    buf = io.StringIO()
    buf.write(f"# {SUMMARY_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["window", "completed_with", "completed_without"])
    w.writerows(rows)
    return buf.getvalue()


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def write_outputs(outdir: str, cfg: ExperimentConfig, reports: Mapping[str, SimReport]) -> List[str]:
    """Write every file into a scratch directory, then move it into place."""
    parent = os.path.dirname(os.path.abspath(outdir)) or "."
    os.makedirs(parent, exist_ok=True)
    scratch = tempfile.mkdtemp(prefix=".elastiq-", dir=parent)
    try:
        for mode, rep in reports.items():
            sub = os.path.join(scratch, mode)
            os.makedirs(sub)
            _write(os.path.join(sub, "report.csv"), rep.to_csv())
            _write(os.path.join(sub, "sojourn.csv"), rep.sojourn_csv())
            _write(os.path.join(sub, "decisions.csv"), rep.decisions_csv())
            _write(os.path.join(sub, "arrivals.csv"), rep.arrivals_csv())
        if all(m in reports for m in MODES):
            _write(os.path.join(scratch, "summary.csv"), summary_csv(summary_rows(reports)))
        if os.path.exists(outdir):
            shutil.rmtree(outdir)
        os.replace(scratch, outdir)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    files = []
    for root, _, names in os.walk(outdir):
        files += [os.path.join(root, n) for n in names]
    return sorted(files)


# -- scaling lag -------------------------------------------------------------

def capacity_targets(topo: topo_mod.AppTopology, external: Mapping[str, float]) -> Dict[str, int]:
    """VMs each node needs to carry the given per-chain root rates (load below 1 per VM)."""
    ext = {}
    for cid, lam in external.items():
        ext[topo.chains[cid].entry.key] = float(lam)
    table = qcore.propagate_rates(qcore.RateTable(ext, {}, topo.demands()), topo.routing)
    out = {}
    for node in topo.nodes:
        load = qcore.offered_load(table, node)
        if load > 0:
            out[node] = int(math.floor(load)) + 1
    return out


def time_to_capacity(report: SimReport, targets: Mapping[str, int], since: float = 0.0) -> Optional[float]:
    """Seconds from the first scaling action at or after ``since`` until every
    target node runs at least its target VM count; None if never."""
    starts = [d[0] for d in report.decisions if d[0] >= since and d[3] > 0]
    if not starts:
        return None
    t0 = min(starts)
    times = sorted({t0} | {t for n in targets for t, _ in report.timelines[n] if t >= t0})
    for t in times:
        if all(report.vms_at(n, t) >= k for n, k in targets.items()):
            return t - t0
    return None


def layers_config(depth: int, provisioning_delay: float = 600.0, seed: int = 1) -> ExperimentConfig:
    """Step-overload run on a linear chain of the given depth."""
    t_step = 1000.0
    tick = 70.0
    duration = t_step + (depth + 1) * (provisioning_delay + tick) + 600.0
    return ExperimentConfig(
        topology={"linear": {"depth": depth}},
        topology_params={"demand": 0.2, "return_demand": 0.02, "class_deadline": 0.5, "chain_deadline": 3.0},
        workload={"kind": "step", "rate1": 1.0, "rate2": 10.0, "t_step": t_step},
        sim={"duration": duration, "provisioning_delay": provisioning_delay, "window": 600.0,
             "service_dist": "deterministic"},
        scaler={"tick_interval": tick, "rate_window": 30.0},
        seed=seed,
    )


def layers_rows(depths: Sequence[int], base: Optional[ExperimentConfig] = None,
                parallel: bool = True) -> List[Tuple[int, str, Optional[float], int]]:
    if any(d < 2 for d in depths):
        raise ValidationError("depths must be >= 2")
    cfgs = []
    for d in depths:
        if base is None:
            cfg = layers_config(d)
        else:
            linear = dict(base.topology.get("linear", {})) if isinstance(base.topology, Mapping) else {}
            linear["depth"] = d
            cfg = replace(base, topology={"linear": linear})
        cfgs.append(cfg)
    jobs = [(cfg, m) for cfg in cfgs for m in MODES]
    if parallel:
        with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as pool:
            reports = list(pool.map(_run_job, jobs))
    else:
        reports = [_run_job(j) for j in jobs]
    rows = []
    for (cfg, mode), rep in zip(jobs, reports):
        topo = build_topology(cfg)
        wl = cfg.workload
        targets = capacity_targets(topo, {c: wl.get("rate2", wl.get("rate", 0.0)) for c in topo.chains})
        ttc = time_to_capacity(rep, targets, float(wl.get("t_step", 0.0)))
        rows.append((topo_depth(topo), mode, ttc, rep.completed))
    return rows


def topo_depth(topo: topo_mod.AppTopology) -> int:
    return max(n.layer for n in topo.nodes.values())


def layers_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(f"# {LAYERS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["depth", "mode", "time_to_capacity", "completed"])
    for depth, mode, ttc, done in rows:
        w.writerow([depth, mode, "" if ttc is None else f"{ttc:.3f}", done])
    return buf.getvalue()


# -- rendering ---------------------------------------------------------------

def reference_summary_csv() -> str:
    return summary_csv(TABLE_III)


def read_summary(text: str) -> List[Tuple[int, int, int]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {SUMMARY_SCHEMA}":
        found = lines[0].strip() if lines else "<empty>"
        raise ValidationError(f"summary schema mismatch: expected '# {SUMMARY_SCHEMA}', found {found!r}")
    rows = list(csv.reader(lines[1:]))
    if not rows or rows[0] != ["window", "completed_with", "completed_without"]:
        raise ValidationError("summary header row is malformed")
    return [(int(a), int(b), int(c)) for a, b, c in rows[1:]]


def render_table(rows: Sequence[Tuple[int, int, int]]) -> str:
    out = [f"{'window':>6}  {'with':>10}  {'without':>10}  {'gain':>8}"]
    for w, a, b in rows:
        out.append(f"{w:>6}  {a:>10}  {b:>10}  {a - b:>8}")
    strict = sum(1 for _, a, b in rows if a > b)
    out.append(f"windows with strict improvement: {strict} of {len(rows)}")
    return "\n".join(out) + "\n"


def config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["schema"] = CONFIG_SCHEMA
    return d
