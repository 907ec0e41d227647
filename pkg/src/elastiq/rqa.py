"""Sojourn-time distribution of a PS node by random quantum allocation.

Time is cut into quanta of length ``q``. In every quantum either one request
arrives (probability ``lambda * q``) or the node hands out service: the
``sigma`` requests in service are drawn uniformly from the ``N + 1`` present
(the tagged one plus N others), and each served competitor finishes with
probability ``q / mean_service``.

``P(k, m, N)`` is the probability that a tagged request with ``k`` quanta of
work left, facing ``N`` other requests, leaves after exactly ``k + m`` quanta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from . import qcore
from .errors import ValidationError


@dataclass(frozen=True)
class RqaParams:
    arrival_rate: float
    mean_service: float
    quantum: float = 1.0
    servers: int = 1
    capacity_fn: Optional[Callable[[int], int]] = None

    def __post_init__(self):
        if not self.quantum > 0:
            raise ValidationError("quantum must be positive")
        if self.arrival_rate < 0:
            raise ValidationError("arrival rate must be nonnegative")
        if not self.mean_service > 0:
            raise ValidationError("mean service must be positive")
        if self.arrival_rate * self.quantum > 1:
            raise ValidationError(f"lambda*q = {self.arrival_rate * self.quantum} exceeds 1")
        if self.mu_q > 1:
            raise ValidationError(f"per-quantum completion probability {self.mu_q} exceeds 1")
        if self.servers < 1:
            raise ValidationError("servers must be >= 1")

    @property
    def lam_q(self) -> float:
        return self.arrival_rate * self.quantum

    @property
    def mu_q(self) -> float:
        return self.quantum / self.mean_service

    def sigma(self, n: int) -> int:
        """Number of requests in service when ``n`` are present."""
        if self.capacity_fn is not None:
            s = int(self.capacity_fn(n))
        else:
            s = self.servers
        return max(0, min(n, s))

    @classmethod
    def from_budget(cls, arrival_rate, mean_service, quantum, servers, min_deadline):
        """Serve at most as many requests as the node's deadline budget admits."""
        empty = qcore.NodeState("node", servers, {})
        limit = qcore.service_capacity(empty, {"r": mean_service}, {"r": min_deadline}, {"r": 1})
        limit = max(1, limit)
        return cls(arrival_rate, mean_service, quantum, servers, capacity_fn=lambda n: min(n, limit))


def binomial_departures(j: int, n: int, mu_q: float) -> float:
    """Probability that exactly ``j`` of ``n`` served requests finish in a quantum."""
    if not 0.0 <= mu_q <= 1.0:
        raise ValidationError("mu_q must lie in [0, 1]")
    if j < 0 or j > n:
        return 0.0
    return math.comb(n, j) * mu_q ** j * (1.0 - mu_q) ** (n - j)


class RqaModel:
    """Memoized evaluator of ``P(k, m, N)``.

    The table is filled lazily by whoever owns the instance; share an
    instance between threads only after it is fully populated.
    """

    def __init__(self, params: RqaParams):
        self.params = params
        self.memo: Dict[Tuple[int, int, int], float] = {}

    def departure_probability(self, k: int, m: int, n: int) -> float:
        if k < 0:
            raise ValidationError("k must be >= 0")
        return self._p(k, m, n)

    def _p(self, k, m, n):
        if n < 0 or m < 0:
            return 0.0
        if k == 0:
            return 1.0 if m == 0 else 0.0
        key = (k, m, n)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        value = _step(self.params, k, m, n, self._p)
        self.memo[key] = value
        return value

    def sojourn_distribution(self, k: int, n: int, horizon: int) -> Dict[int, float]:
        if horizon < 0:
            raise ValidationError("horizon must be >= 0")
        if k == 0:
            return {0: 1.0}
        return {m: self.departure_probability(k, m, n) for m in range(horizon + 1)}


def _step(params: RqaParams, k, m, n, p):
    lq = params.lam_q
    mq = params.mu_q
    sig = params.sigma(n + 1)
    share = sig / (n + 1)
    served = 0.0
    for j in range(sig):
        served += binomial_departures(j, sig - 1, mq) * p(k - 1, m, n - j)
    waiting = 0.0
    if share < 1.0:
        for j in range(sig + 1):
            waiting += binomial_departures(j, sig, mq) * p(k, m - 1, n - j)
    return lq * p(k, m - 1, n + 1) + (1.0 - lq) * (share * served + (1.0 - share) * waiting)


def naive_departure_probability(k: int, m: int, n: int, params: RqaParams) -> float:
    """Unmemoized recursion; exponential time, only for cross-checking."""
    def p(k, m, n):
        if n < 0 or m < 0:
            return 0.0
        if k == 0:
            return 1.0 if m == 0 else 0.0
        return _step(params, k, m, n, p)
    return p(k, m, n)


def sojourn_distribution(k: int, n: int, params: RqaParams, horizon: int) -> Dict[int, float]:
    return RqaModel(params).sojourn_distribution(k, n, horizon)


def joint_departure_probability(occupancy: Mapping[str, int], rho: Mapping[str, float], k: int, m: int,
                                params: RqaParams, model: Optional[RqaModel] = None,
                                truncation: int = qcore.DEFAULT_TRUNCATION) -> float:
    """Probability of seeing ``occupancy`` and then leaving after ``k + m`` quanta."""
    model = model or RqaModel(params)
    n = qcore.total_occupancy(occupancy)
    return qcore.stationary_probability(occupancy, rho, truncation) * model.departure_probability(k, m, n)


class DiagonalSolver:
    """Array evaluation of the same recursion for many (k, N) at once.

    ``P(k, m, N)`` depends only on entries with ``k + m`` one smaller, so the
    table is swept along anti-diagonals ``t = k + m``. Occupancies above
    ``n_max`` are folded onto ``n_max``.
    """

    def __init__(self, params: RqaParams, k_max: int, n_max: int):
        self.params = params
        self.k_max = k_max
        self.n_max = n_max
        ns = np.arange(n_max + 1)
        sig = np.array([params.sigma(int(n) + 1) for n in ns])
        self.share = sig / (ns + 1.0)
        width = int(sig.max()) + 1
        mq = params.mu_q
        self.w_served = np.zeros((width, n_max + 1))
        self.w_wait = np.zeros((width, n_max + 1))
        for idx, s in enumerate(sig):
            for j in range(s):
                self.w_served[j, idx] = binomial_departures(j, s - 1, mq)
            for j in range(s + 1):
                self.w_wait[j, idx] = binomial_departures(j, s, mq)
        self.width = width

    def _mix(self, layer, weights):
        out = np.zeros_like(layer)
        for j in range(self.width):
            w = weights[j]
            if not w.any():
                continue
            if j == 0:
                out += w * layer
            else:
                out[:, j:] += w[j:] * layer[:, :-j]
        return out

    def layers(self, t_max: int):
        """Yield ``(t, D)`` where ``D[k, N] = P(k, t - k, N)``."""
        lq = self.params.lam_q
        shape = (self.k_max + 1, self.n_max + 1)
        d = np.zeros(shape)
        d[0, :] = 1.0
        yield 0, d
        for t in range(1, t_max + 1):
            up = np.empty(shape)
            up[:, :-1] = d[:, 1:]
            up[:, -1] = d[:, -1]
            prev_k = np.zeros(shape)
            prev_k[1:] = d[:-1]
            served = self._mix(prev_k, self.w_served)
            waiting = self._mix(d, self.w_wait)
            new = lq * up + (1.0 - lq) * (self.share * served + (1.0 - self.share) * waiting)
            new[0, :] = 0.0
            new[t + 1:, :] = 0.0
            d = new
            yield t, d


def mm1_mixture_mean(params: RqaParams, rho: float, tail: float = 1e-6, n_max: Optional[int] = None,
                     t_max: Optional[int] = None) -> Tuple[float, float]:
    """Mean sojourn (seconds) of a fresh arrival to a single-server PS node.

    The arrival sees N others with the geometric stationary law and brings a
    geometric number of quanta of work. Returns ``(mean, captured_mass)``.
    """
    if not 0 <= rho < 1:
        raise ValidationError("rho must be in [0, 1)")
    mq = params.mu_q
    k_max = max(1, int(math.ceil(math.log(tail) / math.log1p(-mq))))
    if n_max is None:
        n_max = max(10, int(math.ceil(math.log(tail) / math.log(rho)))) if rho > 0 else 10
        n_max = int(n_max * 1.5) + 10
    if t_max is None:
        mean_quanta = params.mean_service / params.quantum / max(1e-9, 1 - rho / (1 - params.lam_q))
        t_max = int(mean_quanta * 25) + k_max
    k = np.arange(k_max + 1)
    pk = np.where(k >= 1, mq * (1 - mq) ** np.maximum(k - 1, 0), 0.0)
    n = np.arange(n_max + 1)
    pn = (1 - rho) * rho ** n
    weight = np.outer(pk, pn)
    solver = DiagonalSolver(params, k_max, n_max)
    target = float(weight.sum()) * (1 - tail)
    mean = 0.0
    mass = 0.0
    for t, d in solver.layers(t_max):
        prob = float((weight * d).sum())
        mass += prob
        mean += t * prob
        if mass >= target:
            break
    return mean * params.quantum / mass if mass > 0 else float("nan"), mass
