"""Application model: layered services, request chains and fork/join groups.

Chains are the source of truth. The routing matrix is derived from them when
a topology is built, then patched with any explicit ``routing_overrides``.

Topology file layout (JSON)::

    {
      "schema": "elastiq-topology/1",
      "services": [{"id": "s1", "layer": 1, "initial_vms": 1, "vm_capacity": 1.0}, ...],
      "chains": [
        {"id": "c1", "deadline": 3.0,
         "hops": [{"node": "s1", "class": "r1", "demand": 0.2, "deadline": 0.5},
                  {"fork": {"branches": [[hop, ...], [hop, ...]],
                            "join": hop}},
                  ...]}
      ],
      "routing_overrides": [{"from": ["s1", "r1"], "to": ["s2", "r2"], "p": 0.4}]
    }

``demand`` (mean service seconds) and per-class ``deadline`` are optional on
each hop; a hop without a deadline inherits the chain deadline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from .errors import ValidationError
from .qcore import NodeClass, RequestClassSpec, RoutingMatrix

SCHEMA = "elastiq-topology/1"
DEFAULT_DEMAND = 0.2
DEFAULT_CHAIN_DEADLINE = 3.0


@dataclass(frozen=True)
class ServiceNode:
    node_id: str
    layer: int
    initial_vms: int = 1
    vm_capacity: float = 1.0


@dataclass(frozen=True)
class Hop:
    node: str
    cls: str
    demand: Optional[float] = None
    deadline: Optional[float] = None

    @property
    def key(self) -> NodeClass:
        return (self.node, self.cls)


@dataclass(frozen=True)
class ForkJoinSpec:
    """Parallel sub-requests leaving ``fork_point`` and recombined at ``join_point``."""

    fork_point: NodeClass
    branches: Tuple[Tuple[Hop, ...], ...]
    join: Hop

    @property
    def join_point(self) -> NodeClass:
        return self.join.key


@dataclass(frozen=True)
class Fork:
    branches: Tuple[Tuple[Hop, ...], ...]
    join: Hop


Element = Union[Hop, Fork]


@dataclass(frozen=True)
class Chain:
    chain_id: str
    hops: Tuple[Element, ...]
    deadline: float = DEFAULT_CHAIN_DEADLINE

    def flat_hops(self) -> List[Hop]:
        out = []
        for el in self.hops:
            if isinstance(el, Fork):
                for br in el.branches:
                    out.extend(br)
                out.append(el.join)
            else:
                out.append(el)
        return out

    @property
    def entry(self) -> Hop:
        return self.hops[0]

    def main_path(self) -> List[Hop]:
        """Hops a request visits outside fork branches, in order."""
        return [el.join if isinstance(el, Fork) else el for el in self.hops]


@dataclass
class AppTopology:
    nodes: Dict[str, ServiceNode]
    chains: Dict[str, Chain]
    routing: RoutingMatrix = field(default_factory=RoutingMatrix)
    class_specs: Dict[NodeClass, RequestClassSpec] = field(default_factory=dict)
    overrides: List[Tuple[NodeClass, NodeClass, float]] = field(default_factory=list)
    forks: Dict[NodeClass, ForkJoinSpec] = field(default_factory=dict)
    build_problems: List[str] = field(default_factory=list)

    @property
    def joins(self) -> Dict[NodeClass, ForkJoinSpec]:
        return {spec.join_point: spec for spec in self.forks.values()}

    def root_nodes(self) -> List[str]:
        return sorted(n for n, s in self.nodes.items() if s.layer == 1)

    def classes_at(self, node: str) -> List[str]:
        return sorted(c for (n, c) in self.class_specs if n == node)

    def demands(self) -> Dict[NodeClass, float]:
        return {k: s.demand for k, s in self.class_specs.items()}

    def deadlines(self) -> Dict[NodeClass, float]:
        return {k: s.deadline for k, s in self.class_specs.items()}

    def chain_of(self, key: NodeClass) -> str:
        return self.class_specs[key].chain_id

    def entry_classes(self) -> Dict[str, NodeClass]:
        return {cid: ch.entry.key for cid, ch in self.chains.items()}


def _hop_pairs(chain: Chain):
    """Consecutive (source, destination, fork?) pairs along a chain."""
    prev: Optional[Hop] = None
    for el in chain.hops:
        if isinstance(el, Fork):
            for br in el.branches:
                if prev is not None and br:
                    yield prev, br[0], True
                for a, b in zip(br, br[1:]):
                    yield a, b, False
                if br:
                    yield br[-1], el.join, "join"
            prev = el.join
        else:
            if prev is not None:
                yield prev, el, False
            prev = el


def build(nodes: Iterable[ServiceNode], chains: Iterable[Chain],
          overrides: Sequence[Tuple[NodeClass, NodeClass, float]] = ()) -> AppTopology:
    """Assemble a topology, deriving class specs and the routing matrix."""
    nodes = {n.node_id: n for n in nodes}
    chains = {c.chain_id: c for c in chains}
    specs: Dict[NodeClass, RequestClassSpec] = {}
    problems: List[str] = []
    owners: Dict[str, Set[Tuple[str, str]]] = {}
    for ch in chains.values():
        for hop in ch.flat_hops():
            owners.setdefault(hop.cls, set()).add((hop.node, ch.chain_id))
            if hop.key in specs:
                continue
            specs[hop.key] = RequestClassSpec(
                class_id=hop.cls,
                chain_id=ch.chain_id,
                node_id=hop.node,
                deadline=hop.deadline if hop.deadline is not None else ch.deadline,
                demand=hop.demand if hop.demand is not None else DEFAULT_DEMAND,
            )
    for cls, homes in sorted(owners.items()):
        hosts = sorted({n for n, _ in homes})
        owning = sorted({c for _, c in homes})
        if len(hosts) > 1:
            problems.append(f"class multi-homed: {cls} on services {hosts}")
        if len(owning) > 1:
            problems.append(f"class in several chains: {cls} in {owning}")

    entries: Dict[NodeClass, List[Tuple[str, str, float]]] = {}
    fork_sources = set()
    forks: Dict[NodeClass, ForkJoinSpec] = {}
    for ch in chains.values():
        prev = None
        for el in ch.hops:
            if isinstance(el, Fork) and prev is not None:
                forks[prev.key] = ForkJoinSpec(prev.key, el.branches, el.join)
            prev = el.join if isinstance(el, Fork) else el
        for a, b, kind in _hop_pairs(ch):
            if kind == "join":
                fork = next(el for el in ch.hops if isinstance(el, Fork) and el.join == b)
                p = 1.0 / len(fork.branches)
            else:
                p = 1.0
                if kind is True:
                    fork_sources.add(a.key)
            entries.setdefault(a.key, []).append((b.node, b.cls, p))
    for src, dst, p in overrides:
        outs = [e for e in entries.get(src, []) if (e[0], e[1]) != dst]
        if p > 0:
            outs.append((dst[0], dst[1], p))
        entries[src] = outs
    for src in entries:
        entries[src].sort()
    routing = RoutingMatrix(entries=entries, classes=frozenset(specs), fork_sources=frozenset(fork_sources))
    return AppTopology(nodes, chains, routing, specs, list(overrides), forks, problems)


def validate(topo: AppTopology) -> List[str]:
    """Return every rule violation found; an empty list means valid."""
    out = list(topo.build_problems)
    for key, spec in topo.class_specs.items():
        if spec.node_id not in topo.nodes:
            out.append(f"unknown service: class {key[1]} hosted on undefined {key[0]}")
    for node in topo.nodes.values():
        if node.layer < 1:
            out.append(f"bad layer: {node.node_id} has layer {node.layer}")
        if node.initial_vms < 1:
            out.append(f"bad initial_vms: {node.node_id} starts with {node.initial_vms}")
    for ch in topo.chains.values():
        if not ch.hops:
            out.append(f"empty chain: {ch.chain_id}")
            continue
        main = ch.main_path()
        if isinstance(ch.hops[0], Fork):
            out.append(f"fork without fork point: chain {ch.chain_id} starts with a fork")
        for end, hop in (("first", main[0]), ("last", main[-1])):
            node = topo.nodes.get(hop.node)
            if node is not None and node.layer != 1:
                out.append(f"chain not rooted: {end} hop of {ch.chain_id} is on {hop.node} (layer {node.layer})")
        for el in ch.hops:
            if isinstance(el, Fork):
                if len(el.branches) < 2:
                    out.append(f"degenerate fork: chain {ch.chain_id} fork has {len(el.branches)} branch(es)")
                if any(len(br) == 0 for br in el.branches):
                    out.append(f"empty branch: chain {ch.chain_id}")
        for a, b, _ in _hop_pairs(ch):
            na, nb = topo.nodes.get(a.node), topo.nodes.get(b.node)
            if na and nb and abs(na.layer - nb.layer) > 1:
                out.append(f"layer skip: {a.key}->{b.key} crosses layers {na.layer}->{nb.layer}")
    out.extend(f"routing: {p}" for p in topo.routing.check())
    on_chain = set()
    for ch in topo.chains.values():
        on_chain.update((a.key, b.key) for a, b, _ in _hop_pairs(ch))
    for src, outs in topo.routing.entries.items():
        for n, c, p in outs:
            if p > 0 and (src, (n, c)) not in on_chain:
                out.append(f"off-chain routing: {src}->{(n, c)} is not a consecutive chain hop")
    try:
        from .qcore import _topological_order
        _topological_order(topo.class_specs, topo.routing)
    except Exception as exc:  # TopologyError
        out.append(f"cycle: {exc}")
    return out


def downstream_closure(topo: AppTopology, node: str) -> Set[str]:
    """Services reachable from ``node`` along nonzero routing entries (excluding ``node``)."""
    if node not in topo.nodes:
        raise ValidationError(f"unknown node {node}")
    start = [k for k in topo.routing.classes if k[0] == node]
    seen_cls = set(start)
    stack = list(start)
    while stack:
        key = stack.pop()
        for n, c, p in topo.routing.outgoing(key):
            if p > 0 and (n, c) not in seen_cls:
                seen_cls.add((n, c))
                stack.append((n, c))
    return {n for n, _ in seen_cls if n != node}


def class_closure(topo: AppTopology, seeds: Iterable[NodeClass]) -> Set[NodeClass]:
    """Classes reachable from ``seeds`` (seeds included)."""
    seen = set(seeds)
    stack = list(seen)
    while stack:
        key = stack.pop()
        for n, c, p in topo.routing.outgoing(key):
            if p > 0 and (n, c) not in seen:
                seen.add((n, c))
                stack.append((n, c))
    return seen


# -- serialization ---------------------------------------------------------

def _hop_to_dict(h: Hop) -> dict:
    d = {"node": h.node, "class": h.cls}
    if h.demand is not None:
        d["demand"] = h.demand
    if h.deadline is not None:
        d["deadline"] = h.deadline
    return d


def _hop_from_dict(d: dict) -> Hop:
    try:
        return Hop(str(d["node"]), str(d["class"]), d.get("demand"), d.get("deadline"))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed hop {d!r}") from exc


def to_dict(topo: AppTopology) -> dict:
    chains = []
    for ch in topo.chains.values():
        hops = []
        for el in ch.hops:
            if isinstance(el, Fork):
                hops.append({"fork": {"branches": [[_hop_to_dict(h) for h in br] for br in el.branches],
                                      "join": _hop_to_dict(el.join)}})
            else:
                hops.append(_hop_to_dict(el))
        chains.append({"id": ch.chain_id, "deadline": ch.deadline, "hops": hops})
    return {
        "schema": SCHEMA,
        "services": [{"id": n.node_id, "layer": n.layer, "initial_vms": n.initial_vms,
                      "vm_capacity": n.vm_capacity} for n in topo.nodes.values()],
        "chains": chains,
        "routing_overrides": [{"from": list(s), "to": list(d), "p": p} for s, d, p in topo.overrides],
    }


def dumps(topo: AppTopology) -> str:
    return json.dumps(to_dict(topo), indent=2) + "\n"


def from_dict(doc: dict) -> AppTopology:
    if doc.get("schema", SCHEMA) != SCHEMA:
        raise ValidationError(f"unsupported topology schema {doc.get('schema')!r}")
    try:
        nodes = [ServiceNode(str(s["id"]), int(s["layer"]), int(s.get("initial_vms", 1)),
                             float(s.get("vm_capacity", 1.0))) for s in doc["services"]]
        chains = []
        for c in doc["chains"]:
            hops: List[Element] = []
            for h in c["hops"]:
                if "fork" in h:
                    f = h["fork"]
                    hops.append(Fork(tuple(tuple(_hop_from_dict(x) for x in br) for br in f["branches"]),
                                     _hop_from_dict(f["join"])))
                else:
                    hops.append(_hop_from_dict(h))
            chains.append(Chain(str(c["id"]), tuple(hops), float(c.get("deadline", DEFAULT_CHAIN_DEADLINE))))
        overrides = [((str(o["from"][0]), str(o["from"][1])), (str(o["to"][0]), str(o["to"][1])), float(o["p"]))
                     for o in doc.get("routing_overrides", [])]
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"malformed topology document: {exc}") from exc
    return build(nodes, chains, overrides)


def loads(text: str) -> AppTopology:
    try:
        return from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"topology is not valid JSON: {exc}") from exc


def load(path) -> AppTopology:
    if str(path) == "builtin:fig4":
        return fig4_fixture()
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


# -- fixtures --------------------------------------------------------------

FIG4_CHAINS = {
    "c1": [("s1", "r1"), ("s2", "r2"), ("s4", "r3"), ("s2", "r4"), ("s1", "r5")],
    "c2": [("s1", "r6"), ("s2", "r7"), ("s5", "r8"), ("s2", "r9"), ("s1", "r10")],
    "c3": [("s1", "r11"), ("s2", "r12"), ("s4", "r13"), ("s2", "r14"), ("s5", "r15"), ("s2", "r16"), ("s1", "r17")],
    "c4": [("s1", "r18"), ("s3", "r19"), ("s5", "r20"), ("s3", "r21"), ("s1", "r22")],
    "c5": [("s1", "r23"), ("s3", "r24"), ("s6", "r25"), ("s3", "r26"), ("s1", "r27")],
    "c6": [("s1", "r28"), ("s3", "r29"), ("s5", "r30"), ("s3", "r31"), ("s6", "r32"), ("s3", "r33"), ("s1", "r34")],
}
FIG4_LAYERS = {"s1": 1, "s2": 2, "s3": 2, "s4": 3, "s5": 3, "s6": 3}


def fig4_fixture(demand: Optional[float] = None, class_deadline: Optional[float] = None,
                 chain_deadline: float = DEFAULT_CHAIN_DEADLINE, initial_vms: int = 1) -> AppTopology:
    """Six services in three layers with the six chains c1..c6."""
    nodes = [ServiceNode(n, layer, initial_vms) for n, layer in FIG4_LAYERS.items()]
    chains = [Chain(cid, tuple(Hop(n, c, demand, class_deadline) for n, c in hops), chain_deadline)
              for cid, hops in FIG4_CHAINS.items()]
    return build(nodes, chains)


def linear_chain(depth: int, demand: float = 0.2, return_demand: float = 0.02,
                 class_deadline: Optional[float] = None, chain_deadline: float = DEFAULT_CHAIN_DEADLINE,
                 initial_vms: int = 1) -> AppTopology:
    """One chain going down ``depth`` layers and back up: n1 -> ... -> nD -> ... -> n1."""
    if depth < 1:
        raise ValidationError("depth must be >= 1")
    nodes = [ServiceNode(f"n{i}", i, initial_vms) for i in range(1, depth + 1)]
    hops = [Hop(f"n{i}", f"d{i}", demand, class_deadline) for i in range(1, depth + 1)]
    hops += [Hop(f"n{i}", f"u{i}", return_demand, class_deadline) for i in range(depth - 1, 0, -1)]
    return build(nodes, [Chain("c1", tuple(hops), chain_deadline)])


def bundled_path(name: str) -> str:
    return str(resources.files("elastiq").joinpath("data", name))
