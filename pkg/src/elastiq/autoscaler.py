"""Threshold autoscalers: per-node (independent) and dependency-aware.

Both read the same sliding-window metrics. The independent scaler reacts to
each node's own utilization. The dependency-aware one, when a node trips a
threshold, pushes the node's measured class rates through the routing matrix
and resizes every downstream node at once.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from . import qcore
from .errors import ValidationError
from .topology import AppTopology, class_closure

log = logging.getLogger(__name__)

MODES = ("independent", "dependency_aware")


@dataclass
class ScalerConfig:
    mode: str = "dependency_aware"
    tick_interval: float = 60.0
    rate_window: float = 60.0
    up_threshold: float = 0.7
    down_threshold: float = 0.3
    cooldown: Optional[float] = None
    provisioning_delay: float = 600.0
    max_step_down: int = 1
    saturation: float = 0.95  # busy fraction above which a window's completions are not used for μ
    prior_weight: int = 32  # configured demand counts as this many samples

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown scaler mode {self.mode!r}; expected one of {MODES}")
        if not self.tick_interval > 0 or not self.rate_window > 0:
            raise ValidationError("tick_interval and rate_window must be positive")
        if not 0 <= self.down_threshold < self.up_threshold:
            raise ValidationError("need 0 <= down_threshold < up_threshold")
        if not 0 < self.saturation <= 1:
            raise ValidationError("saturation must lie in (0, 1]")
        if self.prior_weight < 0:
            raise ValidationError("prior_weight must be >= 0")

    @property
    def effective_cooldown(self) -> float:
        return self.provisioning_delay if self.cooldown is None else self.cooldown


@dataclass
class NodeWindow:
    node_id: str
    vms: int
    pending: int
    in_flight: int
    arrivals: Dict[str, int]
    demand_sum: Dict[str, float]
    demand_count: Dict[str, int]
    busy: float = 0.0  # fraction of VM time spent serving over the window

    @property
    def current(self) -> int:
        return self.vms + self.pending


@dataclass
class MetricsWindow:
    now: float
    length: float
    nodes: Dict[str, NodeWindow]


@dataclass
class ScalingPlan:
    actions: List[Tuple[str, int, str]] = field(default_factory=list)

    def deltas(self) -> Dict[str, int]:
        return {n: d for n, d, _ in self.actions}


class Autoscaler:
    """Stateful decision maker; ``decide`` is called once per tick."""

    def __init__(self, topo: AppTopology, config: Optional[ScalerConfig] = None):
        self.topo = topo
        self.config = config or ScalerConfig()
        self.demand_est: Dict[Tuple[str, str], Tuple[float, int]] = {}
        self.last_action: Dict[str, float] = {}
        self.armed: Dict[str, float] = {}
        self.busy_since: Dict[str, float] = {}
        self.deadlines = topo.deadlines()
        self.priors = topo.demands()

    # -- measurements ------------------------------------------------------

    def _update_demands(self, window: MetricsWindow):
        # cumulative mean over all windows so one overloaded window cannot skew it;
        # a saturated node finishes its short requests first, so its samples are skipped
        for nid, nw in window.nodes.items():
            if nw.busy > self.config.saturation:
                continue
            for cls, cnt in nw.demand_count.items():
                if cnt:
                    s, c = self.demand_est.get((nid, cls), (0.0, 0))
                    self.demand_est[(nid, cls)] = (s + nw.demand_sum[cls], c + cnt)

    def demand(self, key) -> float:
        # samples on the observation grid are coarse, so a few of them must not
        # override the configured demand
        s, c = self.demand_est.get(key, (0.0, 0))
        w = self.config.prior_weight
        return (s + w * self.priors[key]) / (c + w) if c + w else self.priors[key]

    def rates(self, window: MetricsWindow) -> Dict[Tuple[str, str], float]:
        out = {}
        for nid, nw in window.nodes.items():
            for cls in self.topo.classes_at(nid):
                out[(nid, cls)] = nw.arrivals.get(cls, 0) / window.length
        return out

    def utilization(self, rates, node, servers) -> float:
        load = sum(lam * self.demand((n, c)) for (n, c), lam in rates.items() if n == node)
        return load / max(servers, 1)

    def required(self, rates, node) -> int:
        load = sum(lam * self.demand((n, c)) for (n, c), lam in rates.items() if n == node)
        d = min(self.deadlines[k] for k in self.deadlines if k[0] == node)
        return qcore.servers_for_load(load, d)

    # -- decisions ---------------------------------------------------------

    def decide(self, window: MetricsWindow) -> ScalingPlan:
        self._update_demands(window)
        if self.config.mode == "independent":
            return self.decide_independent(window)
        return self.decide_dependency_aware(window)

    def _quiet(self, node, now) -> bool:
        """True once the node has stayed below the down threshold for a full cooldown."""
        t = max(self.busy_since.get(node, 0.0), self.last_action.get(node, -math.inf))
        return now - t >= self.config.effective_cooldown

    def _triggers(self, window: MetricsWindow, rates):
        """Fresh up triggers, nodes still armed by an earlier up trigger, and down triggers.

        Utilization is taken against committed capacity: booting VMs already
        answer a need. An up trigger stays armed for one cooldown so its plan
        is re-sized with each fresh window while VMs boot. A node may shrink
        only after a full cooldown spent below the down threshold.
        """
        cfg = self.config
        now = window.now
        ups, armed, downs = [], [], []
        for nid in sorted(window.nodes):
            nw = window.nodes[nid]
            u = self.utilization(rates, nid, nw.current)
            if u >= cfg.down_threshold:
                self.busy_since[nid] = now
            since = self.armed.get(nid)
            if u > cfg.up_threshold:
                ups.append((nid, u))
                self.armed[nid] = now
            elif since is not None and now - since < cfg.effective_cooldown:
                armed.append((nid, u))
            elif nw.current > 1 and self._quiet(nid, now):
                downs.append((nid, u))
        return ups, armed, downs

    def _down_delta(self, rates, window, nid) -> int:
        delta = self.required(rates, nid) - window.nodes[nid].current
        return max(delta, -self.config.max_step_down) if delta < 0 else 0

    def decide_independent(self, window: MetricsWindow) -> ScalingPlan:
        rates = self.rates(window)
        ups, armed, downs = self._triggers(window, rates)
        plan = ScalingPlan()
        for nid, u in ups:
            delta = max(self.required(rates, nid) - window.nodes[nid].current, 1)
            plan.actions.append((nid, delta, f"utilization {u:.3f} above {self.config.up_threshold}"))
            self.last_action[nid] = window.now
        for nid, u in armed:
            delta = self.required(rates, nid) - window.nodes[nid].current
            if delta > 0:
                plan.actions.append((nid, delta, f"armed, utilization {u:.3f}"))
                self.last_action[nid] = window.now
        for nid, u in downs:
            delta = self._down_delta(rates, window, nid)
            if delta:
                plan.actions.append((nid, delta, f"utilization {u:.3f} below {self.config.down_threshold}"))
                self.last_action[nid] = window.now
        return plan

    def propagated_rates(self, trigger: str, rates) -> Dict[Tuple[str, str], float]:
        """Rates implied downstream of ``trigger`` by its measured entry flow.

        Seeds are the trigger's classes that no other of its classes feeds, so
        a request passing through twice is not counted twice.
        """
        own = [(n, c) for (n, c) in rates if n == trigger]
        fed: Set[Tuple[str, str]] = set()
        for key in own:
            fed |= class_closure(self.topo, [key]) - {key}
        seeds = [k for k in own if k not in fed]
        flow = {k: 0.0 for k in class_closure(self.topo, seeds)}
        for k in seeds:
            flow[k] = rates[k]
        order = qcore._topological_order(list(flow), self.topo.routing)
        for key in order:
            lam = flow.get(key, 0.0)
            if not lam:
                continue
            for n, c, p in self.topo.routing.outgoing(key):
                if (n, c) in flow and (n, c) not in seeds:
                    flow[(n, c)] += lam * p
        return flow

    def plan_for(self, trigger: str, window: MetricsWindow, rates, fresh: bool = True,
                 direction: int = 1) -> Dict[str, int]:
        """Deltas for ``trigger`` and every node its flow reaches.

        Classes reached from the trigger take the propagated rate; other
        classes keep their measured rate. Scale-up plans only add VMs and
        scale-down plans only remove them, at most ``max_step_down`` per node.
        """
        flow = self.propagated_rates(trigger, rates)
        active = {n for (n, c), lam in flow.items() if lam > 0} | {trigger}
        out = {}
        for nid in sorted(active):
            merged = dict(rates)
            for key, lam in flow.items():
                if key[0] == nid:
                    merged[key] = max(lam, rates.get(key, 0.0)) if direction > 0 else lam
            delta = self.required(merged, nid) - window.nodes[nid].current
            if direction > 0 and delta > 0:
                out[nid] = delta
            elif direction < 0 and delta < 0:
                out[nid] = max(delta, -self.config.max_step_down)
        if fresh and direction > 0:
            out.setdefault(trigger, 1)
        return out

    def decide_dependency_aware(self, window: MetricsWindow) -> ScalingPlan:
        rates = self.rates(window)
        ups, armed, downs = self._triggers(window, rates)
        now = window.now
        up_plan: Dict[str, int] = {}
        reasons: Dict[str, str] = {}
        for (nid, u), fresh in [(x, True) for x in ups] + [(x, False) for x in armed]:
            for target, delta in self.plan_for(nid, window, rates, fresh).items():
                if delta > up_plan.get(target, 0):
                    up_plan[target] = delta
                    why = f"above {self.config.up_threshold}" if fresh else "armed"
                    reasons[target] = f"{nid} utilization {u:.3f} {why}"
        down_plan: Dict[str, int] = {}
        eligible = {nid for nid, _ in downs}
        for nid, u in downs:
            for target, delta in self.plan_for(nid, window, rates, direction=-1).items():
                if target in up_plan or target not in eligible:
                    continue
                if delta < down_plan.get(target, 0):
                    down_plan[target] = delta
                    reasons[target] = f"{nid} utilization {u:.3f} below {self.config.down_threshold}"
        plan = ScalingPlan()
        for nid in sorted(up_plan):
            plan.actions.append((nid, up_plan[nid], reasons[nid]))
            self.last_action[nid] = now
        for nid in sorted(down_plan):
            plan.actions.append((nid, down_plan[nid], reasons[nid]))
            self.last_action[nid] = now
        return plan
