"""Independent reference computations used by several test modules."""

import itertools
import math

import numpy as np


def ctmc_states(n_classes, truncation):
    return [s for s in itertools.product(range(truncation + 1), repeat=n_classes) if sum(s) <= truncation]


def ctmc_stationary(lams, demands, servers, truncation, cap=False):
    """Stationary law of a multiclass PS node by solving pi Q = 0 directly.

    Class r leaves at ``servers * n_r / (demand_r * N)``: the pooled capacity
    shared equally by all N residents. With ``cap=True`` each resident is
    limited to one server, giving ``min(1, servers / N) * n_r / demand_r``.
    Arrivals that would exceed the truncation are blocked.
    """
    states = ctmc_states(len(lams), truncation)
    index = {s: i for i, s in enumerate(states)}
    q = np.zeros((len(states), len(states)))
    for s, i in index.items():
        total = sum(s)
        for r, lam in enumerate(lams):
            if total < truncation and lam > 0:
                up = list(s)
                up[r] += 1
                q[i, index[tuple(up)]] += lam
            if s[r] > 0:
                share = min(1.0, servers / total) if cap else servers / total
                down = list(s)
                down[r] -= 1
                q[i, index[tuple(down)]] += share * s[r] / demands[r]
        q[i, i] = -q[i].sum()
    a = np.vstack([q.T, np.ones(len(states))])
    b = np.zeros(len(states) + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    return {s: float(pi[i]) for s, i in index.items()}


def total_variation(p, q):
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def ps_sojourns(arrivals, demands, servers=1):
    """Sojourn of each arrival to a PS node, by a plain event loop with explicit
    remaining work per resident. Each resident gets min(1, servers/N)."""
    total = len(arrivals)
    remaining = {}
    born = {}
    out = np.empty(total)
    t = 0.0
    nxt = 0
    done = 0
    while done < total:
        n = len(remaining)
        rate = min(1.0, servers / n) if n else 0.0
        t_finish = t + min(remaining.values()) / rate if n else math.inf
        t_arrive = arrivals[nxt] if nxt < total else math.inf
        t_next = min(t_finish, t_arrive)
        if n:
            spent = (t_next - t) * rate
            for key in remaining:
                remaining[key] -= spent
        t = t_next
        if t_arrive <= t_finish:
            remaining[nxt] = demands[nxt]
            born[nxt] = t
            nxt += 1
        else:
            key = min(remaining, key=remaining.get)
            del remaining[key]
            out[key] = t - born.pop(key)
            done += 1
    return out


def ps_tagged_sojourns(lam, mean_service, n_samples, rng, servers=1, warmup=1000):
    """Sojourns of ``n_samples`` Poisson arrivals with exponential demands to an
    M/M/s-PS node, after ``warmup`` discarded ones."""
    total = n_samples + warmup
    arrivals = np.cumsum(rng.exponential(1.0 / lam, size=total))
    demands = rng.exponential(mean_service, size=total)
    return ps_sojourns(arrivals, demands, servers)[warmup:]
