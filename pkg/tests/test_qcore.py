import pytest
from hypothesis import given, strategies as st

from elastiq import qcore, topology
from elastiq.errors import AnalyticError, EstimationError, TopologyError, ValidationError
from elastiq.qcore import NodeState, RateTable, RoutingMatrix

from oracles import ctmc_stationary, total_variation


def table(node_rates, node_demands, node="s1"):
    eff = {(node, c): lam for c, lam in node_rates.items()}
    mus = {(node, c): mu for c, mu in node_demands.items()}
    return RateTable(dict(eff), eff, mus)


# -- occupancy and traffic equations -----------------------------------------

@pytest.mark.parametrize("counts,total", [({"a": 3, "b": 2}, 5), ({}, 0), ({"a": 0, "b": 0, "c": 7}, 7)])
def test_total_occupancy(counts, total):
    assert qcore.total_occupancy(counts) == total


def test_total_occupancy_rejects_negative():
    with pytest.raises(ValidationError):
        qcore.total_occupancy({"a": -1})


def test_unit_probability_pass_through():
    routing = RoutingMatrix({("s1", "r1"): [("s2", "r2", 1.0)]}, frozenset({("s1", "r1"), ("s2", "r2")}))
    out = qcore.propagate_rates(RateTable({("s1", "r1"): 10.0}), routing)
    assert out.effective == {("s1", "r1"): 10.0, ("s2", "r2"): 10.0}


def test_fractional_probability():
    routing = RoutingMatrix({("s1", "r1"): [("s2", "r2", 0.4)]}, frozenset({("s1", "r1"), ("s2", "r2")}))
    out = qcore.propagate_rates(RateTable({("s1", "r1"): 10.0}), routing)
    assert out.effective[("s2", "r2")] == pytest.approx(4.0)


def test_fig4_every_class_carries_one_request_per_second():
    topo = topology.fig4_fixture()
    external = {chain.entry.key: 1.0 for chain in topo.chains.values()}
    out = qcore.propagate_rates(RateTable(external), topo.routing)
    assert len(out.effective) == 34
    for key, lam in out.effective.items():
        assert lam == pytest.approx(1.0), key


def test_cycle_rejected():
    routing = RoutingMatrix({("a", "x"): [("b", "y", 1.0)], ("b", "y"): [("a", "x", 0.5)]})
    with pytest.raises(TopologyError, match="cycle"):
        qcore.propagate_rates(RateTable({("a", "x"): 1.0}), routing)


def test_probability_sum_above_one_rejected():
    routing = RoutingMatrix({("a", "x"): [("b", "y", 0.7), ("c", "z", 0.7)]})
    with pytest.raises(ValidationError, match="sum"):
        qcore.propagate_rates(RateTable({("a", "x"): 1.0}), routing)


def test_negative_external_rate_rejected():
    routing = RoutingMatrix({("a", "x"): [("b", "y", 1.0)]})
    with pytest.raises(ValidationError):
        qcore.propagate_rates(RateTable({("a", "x"): -1.0}), routing)


@st.composite
def random_dag(draw):
    """Class-level DAG: class i may route only to classes with a larger index."""
    n = draw(st.integers(2, 9))
    keys = [(f"s{draw(st.integers(1, 4))}", f"r{i}") for i in range(n)]
    entries = {}
    for i in range(n - 1):
        targets = draw(st.lists(st.integers(i + 1, n - 1), unique=True, max_size=3))
        if not targets:
            continue
        weights = draw(st.lists(st.floats(0.0, 1.0), min_size=len(targets), max_size=len(targets)))
        scale = max(1.0, sum(weights))
        entries[keys[i]] = [(*keys[j], w / scale) for j, w in zip(targets, weights)]
    external = {keys[i]: draw(st.floats(0.0, 100.0)) for i in draw(st.lists(st.integers(0, n - 1), min_size=1, unique=True))}
    return RoutingMatrix(entries, frozenset(keys)), external


@given(random_dag())
def test_propagation_is_linear(case):
    routing, external = case
    once = qcore.propagate_rates(RateTable(external), routing).effective
    twice = qcore.propagate_rates(RateTable({k: 2 * v for k, v in external.items()}), routing).effective
    for key in once:
        assert twice[key] == pytest.approx(2 * once[key], rel=1e-12, abs=1e-12)


@given(random_dag())
def test_unit_hops_conserve_flow(case):
    routing, external = case
    lam = qcore.propagate_rates(RateTable(external), routing).effective
    for src, outs in routing.entries.items():
        if len(outs) == 1 and outs[0][2] == 1.0:
            dst = outs[0][:2]
            assert lam[dst] >= lam[src] * (1 - 1e-12)


# -- load, estimator and sizing -----------------------------------------------

@pytest.mark.parametrize("rates,demands,load", [
    ({"r1": 2.0}, {"r1": 0.5}, 1.0),
    ({}, {}, 0.0),
    ({"r1": 2.0, "r2": 4.0}, {"r1": 0.5, "r2": 0.25}, 2.0),
])
def test_offered_load(rates, demands, load):
    assert qcore.offered_load(table(rates, demands), "s1") == pytest.approx(load)


def test_offered_load_needs_demand_for_active_class():
    with pytest.raises(ValidationError):
        qcore.offered_load(table({"r1": 1.0}, {}), "s1")


@pytest.mark.parametrize("samples,expected", [([(2, 4), (2, 4)], 1.0), ([(4, 2)], 1.0), ([(1, 1), (3, 6)], 1.5)])
def test_estimate_service_time(samples, expected):
    assert qcore.estimate_service_time(samples, tick=1.0) == pytest.approx(expected)


def test_estimate_service_time_errors():
    with pytest.raises(EstimationError):
        qcore.estimate_service_time([])
    with pytest.raises(ValidationError):
        qcore.estimate_service_time([(1, 0)])


@pytest.mark.parametrize("load,d,servers", [(0.0, 1.0, 1), (5.0, 0.5, 11), (2.0, 1.0, 3), (1.99, 1.0, 2)])
def test_servers_for_load(load, d, servers):
    assert qcore.servers_for_load(load, d) == servers


def test_required_servers_uses_minimum_deadline():
    rates = table({"a": 2.0, "b": 1.0}, {"a": 0.5, "b": 1.0})
    deadlines = {("s1", "a"): 2.0, ("s1", "b"): 0.5}
    assert qcore.required_servers(rates, deadlines, "s1") == 5


def test_required_servers_needs_a_class():
    with pytest.raises(ValidationError):
        qcore.required_servers(table({}, {}), {}, "s1")


rates_st = st.dictionaries(st.sampled_from(["a", "b", "c"]), st.floats(0.0, 50.0), min_size=1)
demand_st = st.floats(0.01, 5.0)


@given(rates_st, demand_st, st.floats(0.05, 10.0), st.sampled_from(["a", "b", "c"]), st.floats(0.0, 20.0),
       st.floats(0.0, 2.0), st.floats(0.0, 5.0))
def test_required_servers_monotone(rates, mu, d, cls, extra_lam, extra_mu, extra_d):
    demands = {c: mu for c in rates}
    deadlines = {("s1", c): d for c in rates}
    base = qcore.required_servers(table(rates, demands), deadlines, "s1")
    more = dict(rates)
    more[cls] = more.get(cls, 0.0) + extra_lam
    assert qcore.required_servers(table(more, {c: mu for c in more}), {("s1", c): d for c in more}, "s1") >= base
    slower = {c: mu + extra_mu for c in rates}
    assert qcore.required_servers(table(rates, slower), deadlines, "s1") >= base
    looser = {k: v + extra_d for k, v in deadlines.items()}
    assert qcore.required_servers(table(rates, demands), looser, "s1") <= base


@given(rates_st, demand_st, st.floats(0.05, 10.0))
def test_required_servers_is_strictly_sufficient(rates, mu, d):
    rt = table(rates, {c: mu for c in rates})
    servers = qcore.required_servers(rt, {("s1", c): d for c in rates}, "s1")
    assert qcore.utilization(rt, servers, "s1") < d
    if servers > 1:
        assert qcore.offered_load(rt, "s1") / d >= servers - 1


# -- service rate, utilization, throughput ------------------------------------

def test_service_rate_examples():
    assert qcore.service_rate(NodeState("s", 2, {"r": 1, "o": 1}), "r", 0.5, literal=True) == pytest.approx(0.5)
    assert qcore.service_rate(NodeState("s", 2, {"r": 1, "o": 1}), "r", 0.5) == pytest.approx(2.0)
    assert qcore.service_rate(NodeState("s", 2, {}), "r", 0.5) == 0.0
    assert qcore.service_rate(NodeState("s", 4, {"r": 4}), "r", 1.0) == pytest.approx(4.0)
    assert qcore.service_rate(NodeState("s", 4, {"r": 4}), "r", 1.0, literal=True) == pytest.approx(4.0)


@pytest.mark.parametrize("rates,demands,servers,u", [
    ({"r": 1.5}, {"r": 1.0}, 2, 0.75),
    ({}, {}, 5, 0.0),
    ({"r": 3.0}, {"r": 1.0}, 2, 1.5),
])
def test_utilization(rates, demands, servers, u):
    assert qcore.utilization(table(rates, demands), servers, "s1") == pytest.approx(u)


def test_utilization_needs_a_server():
    with pytest.raises(ValidationError):
        qcore.utilization(table({}, {}), 0, "s1")


def test_throughput_examples():
    assert qcore.throughput(NodeState("s1", 2, {"r": 0}), table({"r": 1.0}, {"r": 1.0}))[1] == 0.0
    per, total = qcore.throughput(NodeState("s1", 1, {"r": 2}), table({"r": 1.0}, {"r": 1.0}))
    assert total == pytest.approx(1.0)
    assert per == {"r": pytest.approx(1.0)}


@given(st.integers(1, 8), st.dictionaries(st.sampled_from(["a", "b", "c"]), st.integers(0, 20), min_size=1),
       st.dictionaries(st.sampled_from(["a", "b", "c"]), st.floats(0.01, 10.0), min_size=3),
       st.dictionaries(st.sampled_from(["a", "b", "c"]), st.floats(0.0, 100.0), min_size=3))
def test_throughput_bounded_by_capacity(servers, counts, demands, rates):
    rt = table(rates, demands)
    _, total = qcore.throughput(NodeState("s1", servers, counts), rt)
    assert total <= servers / min(demands.values()) * (1 + 1e-12)


def test_summarize_node():
    s = qcore.summarize_node(NodeState("s1", 2, {"r": 2}), table({"r": 1.0}, {"r": 1.0}))
    assert s.offered_load == pytest.approx(1.0)
    assert s.utilization == pytest.approx(0.5)
    assert s.total_throughput == pytest.approx(1.0)


# -- stationary distribution ---------------------------------------------------

def test_single_class_empty_probability_is_geometric():
    assert qcore.stationary_probability({"r": 0}, {"r": 0.5}, truncation=50) == pytest.approx(0.5, abs=1e-6)


def test_zero_load_class_has_no_mass():
    assert qcore.stationary_probability({"a": 1, "b": 2}, {"a": 0.3, "b": 0.0}, truncation=20) == 0.0


def test_unstable_load_has_no_steady_state():
    with pytest.raises(AnalyticError, match="no steady state"):
        qcore.stationary_probability({"a": 0}, {"a": 0.6, "b": 0.5})


def test_state_beyond_truncation_rejected():
    with pytest.raises(ValidationError):
        qcore.stationary_probability({"a": 5}, {"a": 0.5}, truncation=4)


def test_two_class_matches_generator_solve():
    rho = {"a": 0.3, "b": 0.2}
    ours = qcore.stationary_distribution(rho, truncation=20)
    ref = ctmc_stationary([0.3, 0.2], [1.0, 1.0], 1, 20)
    assert total_variation(ours, ref) < 1e-6


@given(st.floats(0.0, 0.95), st.floats(0.0, 1.0), st.integers(0, 60))
def test_distribution_sums_to_one(total, split, truncation):
    rho = {"a": total * split, "b": total * (1 - split)}
    assert sum(qcore.stationary_distribution(rho, truncation).values()) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(1, 2), st.integers(1, 2), st.floats(0.01, 0.8), st.floats(0.0, 1.0),
       st.floats(0.05, 2.0), st.floats(0.05, 2.0), st.integers(1, 20))
def test_matches_generator_solve(n_classes, servers, rho_total, split, mu_a, mu_b, truncation):
    shares = [split, 1 - split][:n_classes] if n_classes == 2 else [1.0]
    mus = [mu_a, mu_b][:n_classes]
    names = ["a", "b"][:n_classes]
    rho = {c: rho_total * w for c, w in zip(names, shares)}
    lams = [rho[c] * servers / mu for c, mu in zip(names, mus)]
    ours = qcore.stationary_distribution(rho, truncation)
    ref = ctmc_stationary(lams, mus, servers, truncation)
    assert total_variation(ours, ref) < 1e-6


def test_per_request_cap_breaks_product_form_at_two_servers():
    # with each resident limited to one server the node is M/M/2-like, and the
    # shared-capacity product form is only an approximation
    rho = {"a": 0.4, "b": 0.3}
    ours = qcore.stationary_distribution(rho, 20)
    capped = ctmc_stationary([0.8, 0.6], [1.0, 1.0], 2, 20, cap=True)
    assert total_variation(ours, capped) > 1e-3
    single = ctmc_stationary([0.4, 0.3], [1.0, 1.0], 1, 20, cap=True)
    assert total_variation(ours, single) < 1e-6


# -- service capacity ------------------------------------------------------------

def test_service_capacity_examples():
    assert qcore.service_capacity(NodeState("s", 2, {}), {"r": 1.0}, {"r": 3.0}, {"r": 1}) == 6
    assert qcore.service_capacity(NodeState("s", 2, {"r": 6}), {"r": 1.0}, {"r": 3.0}, {"r": 1}) == 0
    state = NodeState("s", 3, {"a": 1, "b": 1})
    assert qcore.service_capacity(state, {"a": 1.0, "b": 2.0}, {"a": 3.0, "b": 3.0}, {"a": 1, "b": 1}) == 2


def test_service_capacity_overfull_node_returns_zero():
    assert qcore.service_capacity(NodeState("s", 1, {"r": 9}), {"r": 1.0}, {"r": 1.0}) == 0


@given(st.integers(1, 10), st.dictionaries(st.sampled_from("ab"), st.integers(0, 10)),
       st.floats(0.01, 3.0), st.floats(0.01, 3.0), st.floats(0.1, 10.0),
       st.dictionaries(st.sampled_from("ab"), st.integers(1, 4), min_size=1))
def test_service_capacity_is_maximal(servers, counts, mu_a, mu_b, d, mix):
    mus = {"a": mu_a, "b": mu_b}
    k = qcore.service_capacity(NodeState("s", servers, counts), mus, {"a": d, "b": d}, mix)
    budget = servers * d
    load = sum(n * mus[c] for c, n in counts.items())
    unit = sum(n * mus[c] for c, n in mix.items())
    if k > 0:
        assert load + k * unit <= budget * (1 + 1e-9)
    assert load + (k + 1) * unit > budget
