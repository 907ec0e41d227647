"""Discrete-event simulation of a service graph of processor-sharing VM pools.

Each node pools its running VMs: with S VMs and N resident requests every
request progresses at ``min(1, S/N)`` seconds of work per second. Progress is
tracked with a per-node virtual clock V (service received by any one
resident), so a request with demand x entering at V0 leaves when V reaches
``V0 + x`` and nothing has to be touched per resident between events.
"""

from __future__ import annotations

import bisect
import csv
import heapq
import io
import logging
import math
import zlib
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import SimulationError, ValidationError
from .topology import AppTopology, validate

log = logging.getLogger(__name__)

REPORT_SCHEMA = "elastiq-report/1"

# event priorities at equal timestamps
VM_READY, DEADLINE, COMPLETION, ARRIVAL, FORK, JOIN, SCALER_TICK, WINDOW = range(8)

_M64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def stream_key(seed: int, *parts: str) -> int:
    """Key of an independent counter-based random stream."""
    label = "\x1f".join(parts).encode()
    return _mix64((seed & _M64) ^ _mix64(zlib.crc32(label) | (len(label) << 32)))


def stream_uniform(key: int, counter: int) -> float:
    """Uniform draw in [0, 1) number ``counter`` of stream ``key``."""
    return (_mix64(key ^ _mix64(counter)) >> 11) * (1.0 / (1 << 53))


@dataclass
class SimConfig:
    duration: float = 3600.0
    seed: int = 0
    provisioning_delay: float = 600.0
    tick: float = 1.0
    window: float = 3600.0
    deadline_mode: str = "end_to_end"
    service_dist: str = "exponential"
    max_vms: Optional[int] = None

    def check(self):
        if self.duration < 0:
            raise ValidationError("duration must be >= 0")
        if self.provisioning_delay < 0:
            raise ValidationError("provisioning_delay must be >= 0")
        if not self.tick > 0:
            raise ValidationError("tick must be positive")
        if not self.window > 0:
            raise ValidationError("window must be positive")
        if self.deadline_mode not in ("end_to_end", "per_class", "none"):
            raise ValidationError(f"unknown deadline_mode {self.deadline_mode!r}")
        if self.service_dist not in ("exponential", "deterministic"):
            raise ValidationError(f"unknown service_dist {self.service_dist!r}")


class RootRequest:
    """One admitted request; owns the deadline and every live part of itself."""

    __slots__ = ("rid", "chain", "t0", "deadline", "window", "state", "parts", "where")

    def __init__(self, rid, chain, t0, deadline, window):
        self.rid = rid
        self.chain = chain
        self.t0 = t0
        self.deadline = deadline
        self.window = window
        self.state = 0  # 0 active, 1 completed, 2 expired
        self.parts = set()
        self.where = None


class SimRequest:
    __slots__ = ("root", "key", "tag", "t_in", "c0", "alive", "group", "hop", "uid")

    def __init__(self, root, uid, group=None):
        self.root = root
        self.uid = uid
        self.key = None
        self.tag = 0.0
        self.t_in = 0.0
        self.c0 = 0.0
        self.alive = True
        self.group = group
        self.hop = 0


class JoinGroup:
    __slots__ = ("parent", "spec", "waiting")

    def __init__(self, parent, spec):
        self.parent = parent
        self.spec = spec
        self.waiting = len(spec.branches)


class NodeRuntime:
    """Mutable state of one service node during a run."""

    def __init__(self, node_id: str, vms: int, tick: float, log_size: int = 4096):
        self.node_id = node_id
        self.running = vms
        self.draining = 0
        self.pending: List[list] = []
        self.n = 0
        self.v = 0.0
        self.last = 0.0
        self.heap: list = []
        self.version = 0
        self.tick = tick
        self.obs_acc = 0.0
        self.observation_log: deque = deque(maxlen=log_size)
        self.delivered = 0.0
        self.vm_seconds = 0.0
        self.arrivals: deque = deque()
        self.samples: deque = deque()
        self.timeline: List[Tuple[float, int]] = [(0.0, vms)]
        self.expired = 0
        self.completions = 0
        self.win_delivered = 0.0
        self.win_vm_seconds = 0.0
        # cumulative (time, delivered, vm_seconds) at each scaler tick
        self.work_log: deque = deque([(0.0, 0.0, 0.0)])

    @property
    def pending_total(self) -> int:
        return sum(b[1] for b in self.pending)

    def rate(self) -> float:
        return min(1.0, self.running / self.n) if self.n else 0.0

    def advance(self, now: float):
        dt = now - self.last
        if dt < 0:
            raise SimulationError(f"time regression at node {self.node_id}: {now} < {self.last}")
        if dt == 0:
            return
        s = self.running
        self.vm_seconds += s * dt
        self.win_vm_seconds += s * dt
        n = self.n
        if n:
            r = s / n if s < n else 1.0
            self.v += r * dt
            work = (s if s < n else n) * dt
            self.delivered += work
            self.win_delivered += work
            tick = self.tick
            grid = math.ceil(now / tick) - math.ceil(self.last / tick)
            if grid:
                self.obs_acc += grid * tick * r
        self.last = now

    def observe(self, now):
        self.observation_log.append((now, self.running, self.n))

    def live_min(self):
        heap = self.heap
        while heap and not heap[0][2].alive:
            heapq.heappop(heap)
        return heap[0] if heap else None

    def settle_drain(self):
        if self.draining:
            idle = self.running - self.n
            if idle > 0:
                r = min(self.draining, idle, self.running - 1)
                if r > 0:
                    self.running -= r
                    self.draining -= r
                    self.timeline.append((self.last, self.running))


@dataclass
class WindowStats:
    start: float
    admitted: int = 0
    completed: int = 0
    expired: int = 0
    node_vms_end: Dict[str, int] = field(default_factory=dict)
    node_vms_mean: Dict[str, float] = field(default_factory=dict)
    node_utilization: Dict[str, float] = field(default_factory=dict)
    node_expired: Dict[str, int] = field(default_factory=dict)
    node_completions: Dict[str, int] = field(default_factory=dict)
    class_sojourn: Dict[Tuple[str, str], Tuple[float, int]] = field(default_factory=dict)


@dataclass
class SimReport:
    windows: List[WindowStats]
    admitted: int
    completed: int
    expired: int
    in_flight: int
    chain_counts: Dict[str, Dict[str, int]]
    class_arrivals: Dict[Tuple[str, str], int]
    delivered: Dict[str, float]
    vm_seconds: Dict[str, float]
    timelines: Dict[str, List[Tuple[float, int]]]
    decisions: List[Tuple[float, str, str, int, str]]
    late_service: int
    duration: float
    mode: str = ""
    arrival_log: List[Tuple[float, str, float]] = field(default_factory=list)

    def vms_at(self, node: str, t: float) -> int:
        tl = self.timelines[node]
        i = bisect.bisect_right([x[0] for x in tl], t) - 1
        return tl[max(i, 0)][1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {REPORT_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["window_start", "node", "admitted", "completed", "expired", "vms_end", "vms_mean", "utilization"])
        for win in self.windows:
            for node in sorted(win.node_vms_end):
                w.writerow([_fmt(win.start), node, "", win.node_completions.get(node, 0),
                            win.node_expired.get(node, 0), win.node_vms_end[node],
                            _fmt(win.node_vms_mean[node]), _fmt(win.node_utilization[node])])
            w.writerow([_fmt(win.start), "*", win.admitted, win.completed, win.expired,
                        sum(win.node_vms_end.values()), _fmt(sum(win.node_vms_mean.values())), ""])
        w.writerow(["total", "*", self.admitted, self.completed, self.expired, "", "", ""])
        return buf.getvalue()

    def sojourn_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {REPORT_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["window_start", "node", "class", "departures", "mean_sojourn"])
        for win in self.windows:
            for (node, cls), (total, count) in sorted(win.class_sojourn.items()):
                w.writerow([_fmt(win.start), node, cls, count, _fmt(total / count if count else 0.0)])
        return buf.getvalue()

    def arrivals_csv(self) -> str:
        """Admitted root arrivals with the entry-hop service demand drawn for each."""
        buf = io.StringIO()
        buf.write(f"# {REPORT_SCHEMA}\n")
        buf.write("time,chain,entry_demand\n")
        for t, c, x in self.arrival_log:
            buf.write(f"{t:.9f},{c},{x:.9f}\n")
        return buf.getvalue()

    def decisions_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {REPORT_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "mode", "node", "delta", "reason"])
        for row in self.decisions:
            w.writerow([_fmt(row[0]), row[1], row[2], row[3], row[4]])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.6f}"


class Simulation:
    """One deterministic run. Use :func:`run` unless you need the internals."""

    def __init__(self, topo: AppTopology, arrivals, scaler=None, config: Optional[SimConfig] = None):
        self.config = config or SimConfig()
        self.config.check()
        problems = validate(topo)
        if problems:
            raise ValidationError("invalid topology: " + "; ".join(problems))
        self.topo = topo
        self.arrivals = arrivals
        self.scaler = scaler
        cfg = self.config
        self.nodes: Dict[str, NodeRuntime] = {
            n: NodeRuntime(n, spec.initial_vms, cfg.tick) for n, spec in topo.nodes.items()
        }
        self.now = 0.0
        self.events: list = []
        self.seq = 0
        self.uid = 0
        self.n_windows = int(math.ceil(cfg.duration / cfg.window)) if cfg.duration > 0 else 0
        self.windows = [WindowStats(i * cfg.window) for i in range(self.n_windows)]
        self.admitted = self.completed = self.expired = 0
        self.chain_counts = defaultdict(lambda: {"admitted": 0, "completed": 0, "expired": 0})
        self.class_arrivals: Dict[Tuple[str, str], int] = defaultdict(int)
        self.decisions: List[Tuple[float, str, str, int, str]] = []
        self.late_service = 0
        self.arrival_log: List[Tuple[float, str, float]] = []
        self.demand = topo.demands()
        self.class_deadline = topo.deadlines()
        self.forks = topo.forks
        self.joins = topo.joins
        self.routes = self._route_table()
        self.demand_keys = {k: stream_key(cfg.seed, k[0], k[1], "demand") for k in topo.class_specs}
        self.route_keys = {k: stream_key(cfg.seed, k[0], k[1], "route") for k in topo.class_specs}
        self.entry = {cid: ch.entry.key for cid, ch in topo.chains.items()}
        self.chain_deadline = {cid: ch.deadline for cid, ch in topo.chains.items()}

    # -- helpers -----------------------------------------------------------

    def _route_table(self):
        table = {}
        join_points = set(self.topo.joins)
        for key, outs in self.topo.routing.entries.items():
            live = [(n, c, p) for n, c, p in outs if p > 0]
            if key in self.topo.forks:
                table[key] = ("fork", self.topo.forks[key])
            elif live and all((n, c) in join_points for n, c, _ in live):
                table[key] = ("join", (live[0][0], live[0][1]))
            else:
                cum, acc = [], 0.0
                for n, c, p in live:
                    acc += p
                    cum.append((acc, (n, c)))
                table[key] = ("route", cum)
        return table

    def _push(self, t, prio, kind, a=None, b=None):
        self.seq += 1
        heapq.heappush(self.events, (t, prio, self.seq, kind, a, b))

    def _schedule(self, node: NodeRuntime):
        node.version += 1
        top = node.live_min()
        if top is None:
            return
        rate = node.rate()
        if rate <= 0:
            return
        t = node.last + max(0.0, top[0] - node.v) / rate
        self._push(t, COMPLETION, "completion", node, node.version)

    def _draw_demand(self, key, uid):
        mean = self.demand[key]
        if self.config.service_dist == "deterministic":
            return mean
        u = stream_uniform(self.demand_keys[key], uid)
        return -mean * math.log1p(-u)

    # -- request movement --------------------------------------------------

    def _arrive(self, req: SimRequest, key, now):
        node = self.nodes[key[0]]
        node.advance(now)
        req.key = key
        req.alive = True
        req.hop += 1
        req.t_in = now
        req.c0 = node.obs_acc
        req.tag = node.v + self._draw_demand(key, req.uid)
        heapq.heappush(node.heap, (req.tag, req.uid, req))
        node.n += 1
        req.root.parts.add(req)
        self.class_arrivals[key] += 1
        node.arrivals.append((now, key[1]))
        node.observe(now)
        if self.config.deadline_mode == "per_class":
            self._push(now + self.class_deadline[key], DEADLINE, "class_deadline", req, req.hop)
        self._schedule(node)

    def _new_part(self, root, group=None):
        self.uid += 1
        return SimRequest(root, self.uid, group)

    def _depart(self, node: NodeRuntime, req: SimRequest, now):
        """Request finished its demand at ``node``; move it on."""
        root = req.root
        root.parts.discard(req)
        req.alive = False
        node.completions += 1
        est = node.obs_acc - req.c0
        node.samples.append((now, req.key[1], est))
        if now > root.deadline + 1e-9:
            self.late_service += 1
        w = self._window_of(now)
        if w is not None:
            tot, cnt = self.windows[w].class_sojourn.get(req.key, (0.0, 0))
            self.windows[w].class_sojourn[req.key] = (tot + now - req.t_in, cnt + 1)
        kind, data = self.routes.get(req.key, ("route", []))
        if kind == "fork":
            group = JoinGroup(req, data)
            for branch in data.branches:
                part = self._new_part(root, group)
                self._arrive(part, branch[0].key, now)
            root.where = data.join_point
            return
        if kind == "join":
            group = req.group
            if group is None:
                raise SimulationError(f"request without fork group reached join {data}")
            group.waiting -= 1
            if group.waiting == 0:
                parent = group.parent
                parent.alive = True
                parent.group = None
                self._arrive(parent, group.spec.join_point, now)
            return
        nxt = None
        if data:
            total = data[-1][0]
            if len(data) == 1 and total >= 1.0:
                nxt = data[0][1]
            else:
                u = stream_uniform(self.route_keys[req.key], req.uid * 1_000_003 + req.hop)
                for acc, dest in data:
                    if u < acc:
                        nxt = dest
                        break
        if nxt is not None:
            self._arrive(req, nxt, now)
            return
        if req.group is not None:
            # branch left the graph before its join
            group = req.group
            group.waiting -= 1
            if group.waiting == 0:
                parent = group.parent
                parent.alive = True
                parent.group = None
                self._arrive(parent, group.spec.join_point, now)
            return
        self._finish(root, now)

    def _finish(self, root: RootRequest, now):
        root.state = 1
        self.completed += 1
        self.chain_counts[root.chain]["completed"] += 1
        if root.window is not None:
            self.windows[root.window].completed += 1

    def _expire(self, root: RootRequest, now):
        if root.state != 0:
            return
        root.state = 2
        where = None
        for part in list(root.parts):
            node = self.nodes[part.key[0]]
            node.advance(now)
            part.alive = False
            node.n -= 1
            node.observe(now)
            node.settle_drain()
            self._schedule(node)
            if where is None:
                where = node
        root.parts.clear()
        if where is None:
            where = self.nodes[root.where[0]] if root.where else None
        if where is not None:
            where.expired += 1
        self.expired += 1
        self.chain_counts[root.chain]["expired"] += 1
        if root.window is not None:
            self.windows[root.window].expired += 1

    def _window_of(self, t):
        if not self.n_windows:
            return None
        i = int(t // self.config.window)
        return i if i < self.n_windows else None

    # -- provisioning ------------------------------------------------------

    def provision(self, node_id: str, delta: int, now: float) -> int:
        """Apply a scaling action; returns the delta actually applied."""
        if delta == 0:
            raise ValidationError("delta must be nonzero")
        node = self.nodes[node_id]
        node.advance(now)
        if delta > 0:
            if self.config.max_vms is not None:
                room = self.config.max_vms - (node.running - node.draining + node.pending_total)
                delta = min(delta, max(0, room))
                if delta == 0:
                    return 0
            batch = [now + self.config.provisioning_delay, delta]
            node.pending.append(batch)
            self._push(batch[0], VM_READY, "vm_ready", node, batch)
            return delta
        want = -delta
        capacity = node.running - node.draining + node.pending_total
        allowed = min(want, capacity - 1)
        if allowed < want:
            log.info("t=%.1f %s: scale-down by %d clipped to %d (floor of 1 VM)", now, node_id, want, allowed)
        left = allowed
        while left and node.pending:
            batch = node.pending[-1]
            take = min(left, batch[1])
            batch[1] -= take
            left -= take
            if batch[1] == 0:
                node.pending.pop()
        if left:
            idle = max(0, node.running - node.draining - node.n)
            cut = min(left, idle, node.running - node.draining - 1)
            if cut > 0:
                node.running -= cut
                left -= cut
            if left:
                node.draining += min(left, node.running - node.draining - 1)
            node.timeline.append((now, node.running))
            node.observe(now)
            self._schedule(node)
        return -allowed

    def _vm_ready(self, node: NodeRuntime, batch, now):
        if batch not in node.pending:
            return
        node.pending.remove(batch)
        if batch[1] <= 0:
            return
        node.advance(now)
        node.running += batch[1]
        node.timeline.append((now, node.running))
        node.observe(now)
        self._schedule(node)

    # -- scaler ------------------------------------------------------------

    def metrics_window(self, now: float, length: float):
        from .autoscaler import MetricsWindow, NodeWindow
        cutoff = now - length
        out = {}
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            while node.arrivals and node.arrivals[0][0] <= cutoff:
                node.arrivals.popleft()
            while node.samples and node.samples[0][0] <= cutoff:
                node.samples.popleft()
            counts: Dict[str, int] = defaultdict(int)
            for _, cls in node.arrivals:
                counts[cls] += 1
            node.advance(now)
            node.work_log.append((now, node.delivered, node.vm_seconds))
            while len(node.work_log) > 2 and node.work_log[1][0] <= cutoff:
                node.work_log.popleft()
            _, d0, v0 = node.work_log[0]
            busy = (node.delivered - d0) / (node.vm_seconds - v0) if node.vm_seconds > v0 else 0.0
            sums: Dict[str, float] = defaultdict(float)
            nums: Dict[str, int] = defaultdict(int)
            for _, cls, est in node.samples:
                sums[cls] += est
                nums[cls] += 1
            out[nid] = NodeWindow(nid, node.running - node.draining, node.pending_total, node.n,
                                  dict(counts), dict(sums), dict(nums), busy)
        return MetricsWindow(now, length, out)

    def _scaler_tick(self, now):
        sc = self.scaler
        window = self.metrics_window(now, sc.config.rate_window)
        plan = sc.decide(window)
        for node_id, delta, reason in plan.actions:
            applied = self.provision(node_id, delta, now)
            if applied:
                self.decisions.append((now, sc.config.mode, node_id, applied, reason))
        self._push(now + sc.config.tick_interval, SCALER_TICK, "scaler_tick")

    def _close_window(self, i, now):
        win = self.windows[i]
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            node.advance(now)
            win.node_vms_end[nid] = node.running
            span = min(now, self.config.duration) - win.start
            win.node_vms_mean[nid] = node.win_vm_seconds / span if span > 0 else float(node.running)
            win.node_utilization[nid] = node.win_delivered / node.win_vm_seconds if node.win_vm_seconds else 0.0
            win.node_expired[nid] = node.expired
            win.node_completions[nid] = node.completions
            node.win_vm_seconds = node.win_delivered = 0.0
            node.expired = node.completions = 0

    # -- main loop ---------------------------------------------------------

    def run(self) -> SimReport:
        cfg = self.config
        times, chains = self.arrivals.times, self.arrivals.chains
        n_arr = len(chains)
        ai = 0
        if n_arr:
            if any(times[i] > times[i + 1] for i in range(min(n_arr - 1, 1_000_000))):
                raise ValidationError("arrival times must be nondecreasing")
        for i in range(1, self.n_windows + 1):
            self._push(min(i * cfg.window, cfg.duration), WINDOW, "window", i - 1)
        if self.scaler is not None and cfg.duration > 0:
            self._push(self.scaler.config.tick_interval, SCALER_TICK, "scaler_tick")
        events = self.events
        times_list = times.tolist() if hasattr(times, "tolist") else list(times)
        e2e = cfg.deadline_mode == "end_to_end"
        while True:
            next_arr = times_list[ai] if ai < n_arr else math.inf
            if events and (events[0][0], events[0][1]) < (next_arr, ARRIVAL):
                t, prio, _, kind, a, b = heapq.heappop(events)
                if t < self.now - 1e-9:
                    raise SimulationError(f"event queue went back in time: {t} < {self.now}")
                if t > cfg.duration:
                    break
                self.now = t
                if kind == "completion":
                    if b != a.version:
                        continue
                    a.advance(t)
                    top = a.live_min()
                    if top is None:
                        continue
                    eps = 1e-9 * max(1.0, abs(a.v))
                    done = []
                    while True:
                        top = a.live_min()
                        if top is None or (top[0] > a.v + eps and done):
                            break
                        heapq.heappop(a.heap)
                        done.append(top[2])
                    a.n -= len(done)
                    a.observe(t)
                    a.settle_drain()
                    self._schedule(a)
                    for req in done:
                        self._depart(a, req, t)
                elif kind == "deadline":
                    self._expire(a, t)
                elif kind == "class_deadline":
                    if a.alive and a.hop == b and a.root.state == 0:
                        a.root.where = a.key
                        self._expire(a.root, t)
                elif kind == "vm_ready":
                    self._vm_ready(a, b, t)
                elif kind == "scaler_tick":
                    self._scaler_tick(t)
                elif kind == "window":
                    self._close_window(a, t)
                continue
            if next_arr >= cfg.duration:
                break
            t = next_arr
            self.now = t
            chain = chains[ai]
            ai += 1
            w = self._window_of(t)
            deadline = t + self.chain_deadline[chain] if e2e else math.inf
            root = RootRequest(ai, chain, t, deadline, w)
            self.admitted += 1
            self.chain_counts[chain]["admitted"] += 1
            if w is not None:
                self.windows[w].admitted += 1
            req = self._new_part(root)
            self.arrival_log.append((t, chain, self._draw_demand(self.entry[chain], req.uid)))
            if e2e:
                self._push(deadline, DEADLINE, "deadline", root)
            self._arrive(req, self.entry[chain], t)
        for i in range(self.n_windows):
            if not self.windows[i].node_vms_end:
                self._close_window(i, cfg.duration)
        for node in self.nodes.values():
            node.advance(max(node.last, min(self.now, cfg.duration)))
        return SimReport(
            windows=self.windows,
            admitted=self.admitted,
            completed=self.completed,
            expired=self.expired,
            in_flight=self.admitted - self.completed - self.expired,
            chain_counts={k: dict(v) for k, v in sorted(self.chain_counts.items())},
            class_arrivals=dict(self.class_arrivals),
            delivered={n: x.delivered for n, x in self.nodes.items()},
            vm_seconds={n: x.vm_seconds for n, x in self.nodes.items()},
            timelines={n: list(x.timeline) for n, x in self.nodes.items()},
            decisions=self.decisions,
            late_service=self.late_service,
            duration=cfg.duration,
            mode=getattr(getattr(self.scaler, "config", None), "mode", "static"),
            arrival_log=self.arrival_log,
        )


def run(topology: AppTopology, workload, scaler=None, config: Optional[SimConfig] = None) -> SimReport:
    """Simulate ``workload`` (an :class:`~elastiq.workload.Arrivals`) on ``topology``."""
    return Simulation(topology, workload, scaler, config).run()


def advance_ps(demands: Sequence[float], servers: int, dt: float) -> Tuple[List[float], List[int]]:
    """Standalone PS step for a fixed population: remaining demands and the
    indices that complete within ``dt`` (membership frozen over the step)."""
    if not dt > 0:
        raise ValidationError("dt must be positive")
    n = len(demands)
    if n == 0:
        return [], []
    rate = min(1.0, servers / n)
    left = [max(0.0, d - rate * dt) for d in demands]
    done = [i for i, d in enumerate(left) if d <= 1e-12]
    return left, done
