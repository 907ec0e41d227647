"""Multi-class M/M/m processor-sharing analytics for one service node.

Units used throughout:

* arrival rates are requests/second,
* ``service_time`` (mu) is the mean service *demand* of a request in seconds,
* deadlines are seconds.

Keys for (node, class) pairs are plain tuples ``(node_id, class_id)``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import AnalyticError, EstimationError, TopologyError, ValidationError

NodeClass = Tuple[str, str]

DEFAULT_TRUNCATION = 200


@dataclass(frozen=True)
class RequestClassSpec:
    class_id: str
    chain_id: str
    node_id: str
    deadline: float
    demand: float = 1.0

    def __post_init__(self):
        if not self.deadline > 0:
            raise ValidationError(f"class {self.class_id}: deadline must be > 0, got {self.deadline}")
        if not self.demand > 0:
            raise ValidationError(f"class {self.class_id}: demand must be > 0, got {self.demand}")


@dataclass
class RoutingMatrix:
    """Sparse routing probabilities between (node, class) pairs.

    ``fork_sources`` lists sources whose outgoing entries are parallel copies
    (each branch receives the full flow) rather than a probability split.
    """

    entries: Dict[NodeClass, List[Tuple[str, str, float]]] = field(default_factory=dict)
    classes: frozenset = frozenset()
    fork_sources: frozenset = frozenset()

    def outgoing(self, key: NodeClass) -> List[Tuple[str, str, float]]:
        return self.entries.get(key, [])

    def known(self, key: NodeClass) -> bool:
        return not self.classes or key in self.classes

    def check(self) -> List[str]:
        problems = []
        for src, outs in self.entries.items():
            if not self.known(src):
                problems.append(f"undefined source class {src}")
            total = 0.0
            for node, cls, p in outs:
                if not 0.0 <= p <= 1.0:
                    problems.append(f"probability {p} out of range on {src}->{(node, cls)}")
                if not self.known((node, cls)):
                    problems.append(f"undefined destination class {(node, cls)}")
                total += p
            if src not in self.fork_sources and total > 1.0 + 1e-12:
                problems.append(f"outgoing probabilities of {src} sum to {total} > 1")
        return problems


@dataclass
class RateTable:
    external: Dict[NodeClass, float] = field(default_factory=dict)
    effective: Dict[NodeClass, float] = field(default_factory=dict)
    service_time: Dict[NodeClass, float] = field(default_factory=dict)

    def at_node(self, node: str) -> Dict[str, float]:
        """Effective per-class rates for the classes hosted at ``node``."""
        return {c: lam for (n, c), lam in self.effective.items() if n == node}

    def nodes(self) -> List[str]:
        return sorted({n for n, _ in self.effective} | {n for n, _ in self.service_time})


@dataclass
class OccupancyVector:
    counts: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return total_occupancy(self.counts)


@dataclass
class NodeState:
    """Instantaneous view of one node: running servers and residents per class."""

    node_id: str
    servers: int
    counts: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return total_occupancy(self.counts)


@dataclass
class NodeLoadSummary:
    node_id: str
    servers: int
    offered_load: float
    utilization: float
    per_class_rate: Dict[str, float]
    per_class_throughput: Dict[str, float]
    total_throughput: float


def total_occupancy(counts: Mapping[str, int]) -> int:
    total = 0
    for cls, n in counts.items():
        if n < 0:
            raise ValidationError(f"negative occupancy {n} for class {cls}")
        total += n
    return total


def _topological_order(keys: Iterable[NodeClass], routing: RoutingMatrix) -> List[NodeClass]:
    nodes = set(keys)
    for src, outs in routing.entries.items():
        nodes.add(src)
        for n, c, _ in outs:
            nodes.add((n, c))
    indeg = {k: 0 for k in nodes}
    for src, outs in routing.entries.items():
        for n, c, p in outs:
            if p > 0:
                indeg[(n, c)] += 1
    ready = sorted(k for k, d in indeg.items() if d == 0)
    order = []
    while ready:
        key = ready.pop(0)
        order.append(key)
        fresh = []
        for n, c, p in routing.outgoing(key):
            if p > 0:
                indeg[(n, c)] -= 1
                if indeg[(n, c)] == 0:
                    fresh.append((n, c))
        if fresh:
            ready = sorted(ready + fresh)
    if len(order) != len(nodes):
        stuck = sorted(k for k, d in indeg.items() if d > 0)
        raise TopologyError(f"routing contains a class-level cycle through {stuck[:4]}")
    return order


def propagate_rates(external: RateTable, routing: RoutingMatrix) -> RateTable:
    """Solve the traffic equations by pushing flow through the class DAG.

    ``lambda[i,r] = external[i,r] + sum_{j,s} lambda[j,s] * p[j,s;i,r]``.
    Class-level cycles are rejected.
    """
    problems = routing.check()
    if problems:
        raise ValidationError("; ".join(problems))
    for key, lam in external.external.items():
        if not routing.known(key):
            raise ValidationError(f"external rate given for undefined class {key}")
        if lam < 0:
            raise ValidationError(f"negative external rate {lam} for {key}")

    order = _topological_order(list(external.external) + sorted(routing.classes), routing)
    lam: Dict[NodeClass, float] = defaultdict(float)
    for key, value in external.external.items():
        lam[key] += value
    for key in order:
        flow = lam.get(key, 0.0)
        if flow == 0.0:
            continue
        for n, c, p in routing.outgoing(key):
            lam[(n, c)] += flow * p
    effective = {k: lam.get(k, 0.0) for k in order}
    return RateTable(dict(external.external), effective, dict(external.service_time))


def _node_load(lams: Mapping[str, float], mus: Mapping[str, float], node: str) -> float:
    load = 0.0
    for cls, lam in lams.items():
        if lam < 0:
            raise ValidationError(f"negative rate for class {cls} at {node}")
        if lam == 0:
            continue
        mu = mus.get(cls)
        if mu is None:
            raise ValidationError(f"no service time for active class {cls} at {node}")
        load += lam * mu
    return load


def offered_load(rates: RateTable, node: str) -> float:
    """Total work arriving per second at ``node`` (erlangs)."""
    mus = {c: mu for (n, c), mu in rates.service_time.items() if n == node}
    return _node_load(rates.at_node(node), mus, node)


def estimate_service_time(samples: Sequence[Tuple[float, float]], tick: float = 1.0) -> float:
    """Processing a tagged request actually received while resident.

    ``samples`` are ``(servers_running, occupancy)`` pairs observed once per
    ``tick`` between the request's arrival and departure. A task never runs
    on more than one server, so each sample contributes at most one tick.
    """
    if not samples:
        raise EstimationError("empty observation window")
    if tick <= 0:
        raise ValidationError("tick must be positive")
    acc = 0.0
    for servers, occupancy in samples:
        if occupancy < 1:
            raise ValidationError("occupancy must be >= 1 while the tagged request is resident")
        acc += min(1.0, servers / occupancy)
    return tick * acc


def servers_for_load(load: float, min_deadline: float) -> int:
    """Smallest integer server count strictly above ``load / min_deadline``, at least 1."""
    if not min_deadline > 0:
        raise ValidationError(f"deadline must be positive, got {min_deadline}")
    if load < 0:
        raise ValidationError("offered load must be nonnegative")
    return max(1, math.floor(load / min_deadline) + 1)


def required_servers(rates: RateTable, deadlines: Mapping[NodeClass, float], node: str) -> int:
    at_node = [d for (n, _), d in deadlines.items() if n == node]
    if not at_node:
        raise ValidationError(f"no request classes with deadlines at node {node}")
    for d in at_node:
        if not d > 0:
            raise ValidationError(f"deadline must be positive, got {d}")
    return servers_for_load(offered_load(rates, node), min(at_node))


def service_rate(state: NodeState, cls: str, service_time: float, literal: bool = False) -> float:
    """Rate at which ``state`` delivers completions to class ``cls``.

    With the demand reading of mu, each of the N residents receives s/N of the
    pooled capacity, so class ``cls`` completes at ``s * n_r / (mu * N)``.
    ``literal=True`` returns the printed form ``s * n_r * mu / N`` instead.
    """
    n_total = state.total
    if n_total == 0:
        return 0.0
    n_r = state.counts.get(cls, 0)
    if literal:
        return state.servers * n_r * service_time / n_total
    if not service_time > 0:
        raise ValidationError("service time must be positive")
    return state.servers * n_r / (service_time * n_total)


def utilization(rates: RateTable, servers: int, node: str) -> float:
    if servers < 1:
        raise ValidationError(f"servers must be >= 1, got {servers}")
    return offered_load(rates, node) / servers


def throughput(state: NodeState, rates: RateTable, literal: bool = False) -> Tuple[Dict[str, float], float]:
    """Per-class and total completion rate of a node in ``state``.

    Class throughput is the class service rate times the fraction of time the
    servers are busy. The busy fraction is capped at 1 so the node can never
    complete more than its pooled capacity allows.
    """
    node = state.node_id
    if state.total == 0:
        return {c: 0.0 for c in state.counts}, 0.0
    load = offered_load(rates, node)
    busy = load / state.servers
    if not literal:
        busy = min(1.0, busy)
    per_class = {}
    for cls, n_r in state.counts.items():
        if n_r == 0:
            per_class[cls] = 0.0
            continue
        mu = rates.service_time.get((node, cls))
        if mu is None:
            raise ValidationError(f"no service time for class {cls} at {node}")
        per_class[cls] = service_rate(state, cls, mu, literal=literal) * busy
    return per_class, sum(per_class.values())


def summarize_node(state: NodeState, rates: RateTable) -> NodeLoadSummary:
    per_class_rate = {}
    for cls in state.counts:
        mu = rates.service_time.get((state.node_id, cls))
        per_class_rate[cls] = service_rate(state, cls, mu) if mu else 0.0
    per_class, total = throughput(state, rates)
    return NodeLoadSummary(
        node_id=state.node_id,
        servers=state.servers,
        offered_load=offered_load(rates, state.node_id),
        utilization=utilization(rates, state.servers, state.node_id),
        per_class_rate=per_class_rate,
        per_class_throughput=per_class,
        total_throughput=total,
    )


def load_factors(lams: Mapping[str, float], mus: Mapping[str, float], servers: int) -> Dict[str, float]:
    """Dimensionless per-class load ``lambda * mu / s``."""
    if servers < 1:
        raise ValidationError("servers must be >= 1")
    return {c: lams[c] * mus[c] / servers for c in lams}


def _check_stable(rho: Mapping[str, float]) -> float:
    for cls, r in rho.items():
        if r < 0:
            raise ValidationError(f"negative load factor for class {cls}")
    total = sum(rho.values())
    if total >= 1.0:
        raise AnalyticError(f"no steady state: total load {total:.6g} >= 1")
    return total


def _log_normalizer(rho_total: float, truncation: int) -> float:
    # Multinomial theorem: sum over |n| = N of N! prod rho^n / n! = rho_total^N.
    if rho_total == 0.0:
        return 0.0
    # log of sum_{N=0}^{T} x^N = log((1 - x^{T+1}) / (1 - x))
    return math.log1p(-rho_total ** (truncation + 1)) - math.log1p(-rho_total)


def stationary_probability(occupancy: OccupancyVector | Mapping[str, int], rho: Mapping[str, float],
                           truncation: int = DEFAULT_TRUNCATION) -> float:
    """Product-form probability of an occupancy vector, normalized over the
    states whose total population is at most ``truncation``."""
    counts = occupancy.counts if isinstance(occupancy, OccupancyVector) else dict(occupancy)
    rho_total = _check_stable(rho)
    n_total = total_occupancy(counts)
    if n_total > truncation:
        raise ValidationError(f"state with {n_total} requests exceeds truncation {truncation}")
    for cls in counts:
        if cls not in rho:
            raise ValidationError(f"no load factor for class {cls}")
    log_p = math.lgamma(n_total + 1)
    for cls, n in counts.items():
        if n == 0:
            continue
        r = rho[cls]
        if r == 0.0:
            return 0.0
        log_p += n * math.log(r) - math.lgamma(n + 1)
    return math.exp(log_p - _log_normalizer(rho_total, truncation))


def enumerate_states(classes: Sequence[str], truncation: int):
    """All occupancy vectors over ``classes`` with total <= ``truncation``."""
    def rec(i, left):
        if i == len(classes):
            yield ()
            return
        for n in range(left + 1):
            for rest in rec(i + 1, left - n):
                yield (n,) + rest
    for combo in rec(0, truncation):
        yield dict(zip(classes, combo))


def stationary_distribution(rho: Mapping[str, float], truncation: int = DEFAULT_TRUNCATION) -> Dict[tuple, float]:
    classes = sorted(rho)
    return {
        tuple(state[c] for c in classes): stationary_probability(state, rho, truncation)
        for state in enumerate_states(classes, truncation)
    }


def service_capacity(state: NodeState, service_times: Mapping[str, float], deadlines: Mapping[str, float],
                     mix: Optional[Mapping[str, int]] = None) -> int:
    """Largest multiple k of ``mix`` the node can still accept.

    Admissible iff ``sum_r (n_r + k * mix_r) * mu_r <= s * min_r d_r``.
    Without ``mix`` every hosted class counts once (one request of each).
    """
    if not deadlines:
        raise ValidationError("at least one deadline is required")
    if any(d <= 0 for d in deadlines.values()):
        raise ValidationError("deadlines must be positive")
    budget = state.servers * min(deadlines.values())
    load = 0.0
    for cls, n in state.counts.items():
        if n:
            load += n * service_times[cls]
    if mix is None:
        mix = {c: 1 for c in service_times}
    unit = sum(k * service_times[c] for c, k in mix.items())
    if unit <= 0:
        raise ValidationError("request mix must contain positive work")
    spare = budget - load
    if spare < 0:
        return 0
    k = math.floor(spare / unit + 1e-9)
    # guard the float tolerance in both directions
    while k > 0 and load + k * unit > budget * (1 + 1e-12):
        k -= 1
    while load + (k + 1) * unit <= budget:
        k += 1
    return k
