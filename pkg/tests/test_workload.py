import calendar
import gzip
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from elastiq import topology, workload
from elastiq.errors import ValidationError, WorkloadError
from elastiq.workload import ChainMixRule, TraceRecord

LINE = 'host1.example.net - - [28/Aug/1995:00:00:34 -0400] "GET /index.html HTTP/1.0" 200 1839\n'


def clf(ts, path, method="GET"):
    stamp = "28/Aug/1995:%02d:%02d:%02d -0400" % (ts // 3600, ts // 60 % 60, ts % 60)
    return f'h - - [{stamp}] "{method} {path} HTTP/1.0" 200 10\n'


def test_parse_valid_line():
    rec = workload.parse_clf_line(LINE)
    assert rec.timestamp == calendar.timegm((1995, 8, 28, 4, 0, 34))
    assert rec.request_key == "GET /index.html"


def test_garbage_line_counted():
    stats = workload.ParseStats()
    lines = [clf(i, "/a") for i in range(20)] + ["not a log line\n"]
    records = workload.parse_trace(lines, stats)
    assert len(records) == 20
    assert (stats.lines, stats.malformed) == (21, 1)


def test_empty_trace_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert workload.parse_trace([]) == []
    assert "empty" in caplog.text


def test_mostly_garbage_is_rejected():
    with pytest.raises(WorkloadError):
        workload.parse_trace([clf(1, "/a")] + ["junk\n"] * 5)


def test_output_sorted():
    records = workload.parse_trace([clf(30, "/b"), clf(10, "/a"), clf(20, "/c")])
    assert [r.request_key for r in records] == ["GET /a", "GET /c", "GET /b"]


def test_gzip_file(tmp_path):
    path = tmp_path / "t.log.gz"
    with gzip.open(path, "wt") as fh:
        fh.write(clf(1, "/a") + clf(2, "/b"))
    assert len(workload.parse_trace_file(path)) == 2


def test_bundled_sample_parses():
    stats = workload.ParseStats()
    records = workload.parse_trace_file(topology.bundled_path("clarknet-sample.log"), stats)
    assert stats.malformed == 0
    assert len(records) == stats.lines > 1000


def records(n=10):
    return [TraceRecord(100.0 + 3 * i, "GET /cgi-bin/x" if i % 3 else "GET /index.html") for i in range(n)]


def test_time_scale_halves_gaps():
    rules = [ChainMixRule(".", "c1")]
    one = workload.replay(records(), rules, 1.0)
    two = workload.replay(records(), rules, 2.0)
    np.testing.assert_allclose(np.diff(two.times), np.diff(one.times) / 2)


def test_disjoint_rules_partition_records():
    rules = [ChainMixRule("cgi-bin", "c1"), ChainMixRule("index", "c2")]
    arr = workload.replay(records(30), rules)
    assert arr.chains.count("c1") == 20
    assert arr.chains.count("c2") == 10


def test_first_match_wins_and_unmatched_dropped():
    rules = [ChainMixRule("cgi", "c1"), ChainMixRule("GET /cgi", "c2"), ChainMixRule("POST", "c3")]
    arr = workload.replay(records(9), rules)
    assert set(arr.chains) == {"c1"}
    assert len(arr) == 6


def test_identity_scale_round_trips():
    recs = records()
    arr = workload.replay(recs, [ChainMixRule(".", "c")], 1.0, origin=0.0)
    assert arr.times.tolist() == [r.timestamp for r in recs]


def test_replay_errors():
    with pytest.raises(ValidationError):
        workload.replay(records(), [ChainMixRule(".", "c")], 0.0)
    with pytest.raises(WorkloadError):
        workload.replay(records(), [ChainMixRule("nomatch", "c")])
    with pytest.raises(ValidationError):
        ChainMixRule(".", "c", -1.0)


trace_st = st.lists(st.tuples(st.integers(0, 86399), st.sampled_from(["/a", "/b/c", "/d.html"]),
                              st.sampled_from(["GET", "POST"])), max_size=60)


@given(trace_st)
def test_parse_then_replay_is_loss_free_and_ordered(entries):
    lines = [clf(ts, path, method) for ts, path, method in entries]
    recs = workload.parse_trace(lines)
    assert len(recs) == len(entries)
    if not recs:
        return
    arr = workload.replay(recs, [ChainMixRule(r"\.html$", "c2"), ChainMixRule(".", "c1")])
    assert len(arr) == len(entries)
    assert np.all(np.diff(arr.times) >= 0)
    expected = sorted(entries, key=lambda e: e[0])
    assert sorted(arr.times.tolist()) == [float(ts - expected[0][0]) for ts, _, _ in expected]
    by_time = {}
    for ts, path, _ in entries:
        by_time.setdefault(float(ts - expected[0][0]), []).append("c2" if path.endswith(".html") else "c1")
    for t, c in arr:
        by_time[t].remove(c)


def test_zero_rate_is_empty():
    assert len(workload.synth("poisson", {"rate": 0}, {"c1": 1}, 0, 1000.0)) == 0


def test_poisson_count_golden():
    n = len(workload.synth("poisson", {"rate": 10}, {"c1": 1}, 0, 1000.0))
    assert abs(n - 10_000) <= 300
    assert n == 10039


def test_step_doubles_rate():
    arr = workload.synth("step", {"rate1": 5, "rate2": 10, "t_step": 500}, {"c1": 1}, 3, 1000.0)
    before = np.sum(arr.times < 500)
    after = np.sum(arr.times >= 500)
    assert after / before == pytest.approx(2.0, rel=0.1)


def test_hourly_profile_rates():
    arr = workload.synth("hourly", {"profile": [1.0, 3.0]}, {"c1": 1}, 5, 4 * 3600.0)
    counts = np.histogram(arr.times, bins=[0, 3600, 7200, 10800, 14400])[0]
    np.testing.assert_allclose(counts / 3600.0, [1, 3, 1, 3], rtol=0.08)


def test_bursts_raise_the_rate():
    base = workload.synth("poisson", {"rate": 2.0}, {"c1": 1}, 1, 20_000.0)
    burst = workload.synth("poisson", {"rate": 2.0, "bursts": {"factor": 3.0, "mean_on": 600, "mean_off": 600}},
                           {"c1": 1}, 1, 20_000.0)
    assert len(burst) > 1.5 * len(base)


def test_prefix_does_not_depend_on_duration():
    params = {"profile": [1.0, 2.0]}
    short = workload.synth("hourly", params, {"a": 1, "b": 1}, 9, 3600.0)
    long = workload.synth("hourly", params, {"a": 1, "b": 1}, 9, 4 * 3600.0)
    n = len(short)
    assert short.to_lines() == long.to_lines()[:n]


@pytest.mark.parametrize("kind,params", [
    ("hourly", {"profile": []}),
    ("poisson", {"rate": -1.0}),
    ("zipf", {}),
])
def test_synth_validation(kind, params):
    with pytest.raises(ValidationError):
        workload.synth(kind, params, {"c1": 1}, 0, 100.0)


def test_mix_validation():
    with pytest.raises(ValidationError):
        workload.synth("poisson", {"rate": 1}, {"c1": 0}, 0, 100.0)


@given(st.integers(0, 2**32 - 1), st.sampled_from(["poisson", "step", "hourly"]), st.floats(0.0, 300.0))
def test_synth_reproducible(seed, kind, duration):
    params = {"poisson": {"rate": 1.5}, "step": {"rate1": 1, "rate2": 3, "t_step": 100},
              "hourly": {"profile": [1.0, 2.0], "hour": 60.0}}[kind]
    a = workload.synth(kind, params, {"c1": 2, "c2": 1}, seed, duration)
    b = workload.synth(kind, params, {"c1": 2, "c2": 1}, seed, duration)
    assert a.to_lines() == b.to_lines()
    assert np.all(np.diff(a.times) >= 0)
    assert np.all((a.times >= 0) & (a.times <= duration))


@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0.05, 1.0), min_size=2, max_size=4))
def test_mix_converges_to_weights(seed, weights):
    mix = {f"c{i}": w for i, w in enumerate(weights)}
    arr = workload.synth("poisson", {"rate": 100.0}, mix, seed, 1000.0)
    total = sum(weights)
    for chain, w in mix.items():
        assert arr.chains.count(chain) / len(arr) == pytest.approx(w / total, abs=0.02)


def test_clarknet_profile_peak():
    prof = workload.clarknet_profile(5.0)
    assert len(prof) == 24
    assert max(prof) == 5.0
    assert prof[0] / prof[23] == pytest.approx(26000 / 67900)
