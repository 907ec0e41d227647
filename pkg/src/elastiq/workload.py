"""Root arrival streams: Common Log Format replay and synthetic generators."""

from __future__ import annotations

import gzip
import logging
import re
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError, WorkloadError

log = logging.getLogger(__name__)

# Hourly shape of the with-model column of the reference comparison table.
CLARKNET_SHAPE = (
    26000, 52000, 48600, 43100, 48700, 40700, 51300, 36900, 35700, 30800, 29500, 31700,
    30700, 24900, 20000, 28700, 26300, 36200, 48600, 56800, 45700, 47200, 51100, 67900,
)

CLF = re.compile(
    r'^(?P<host>\S+) (?P<ident>\S+) (?P<user>\S+) \[(?P<date>[^\]]+)\] '
    r'"(?P<request>[^"]*)" (?P<status>\d{3}|-) (?P<size>\d+|-)\s*$'
)
MAX_MALFORMED = 0.10


@dataclass(frozen=True)
class TraceRecord:
    timestamp: float
    request_key: str


@dataclass(frozen=True)
class ChainMixRule:
    pattern: str
    chain_id: str
    weight: float = 1.0

    def __post_init__(self):
        if self.weight < 0:
            raise ValidationError("rule weight must be nonnegative")

    def matches(self, key: str) -> bool:
        return re.search(self.pattern, key) is not None


@dataclass
class Arrivals:
    """Root arrivals: parallel arrays of times (seconds) and chain ids."""

    times: np.ndarray
    chains: List[str]

    def __len__(self):
        return len(self.chains)

    def __iter__(self):
        return zip(self.times.tolist(), self.chains)

    def to_lines(self) -> List[str]:
        return [f"{t!r},{c}" for t, c in self]


@dataclass
class ParseStats:
    lines: int = 0
    malformed: int = 0


def _open_lines(path) -> Iterator[str]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="latin-1") as fh:
        yield from fh


def parse_clf_line(line: str) -> Optional[TraceRecord]:
    m = CLF.match(line.rstrip("\r\n"))
    if m is None:
        return None
    try:
        ts = datetime.strptime(m.group("date"), "%d/%b/%Y:%H:%M:%S %z").timestamp()
    except ValueError:
        return None
    parts = m.group("request").split()
    if len(parts) >= 2:
        key = f"{parts[0]} {parts[1]}"
    elif parts:
        key = parts[0]
    else:
        return None
    return TraceRecord(ts, key)


def parse_trace(lines: Iterable[str], stats: Optional[ParseStats] = None) -> List[TraceRecord]:
    """Parse CLF lines, skipping malformed ones; output sorted by time.

    Raises WorkloadError when more than 10% of non-blank lines are malformed.
    """
    stats = stats if stats is not None else ParseStats()
    records = []
    for line in lines:
        if not line.strip():
            continue
        stats.lines += 1
        rec = parse_clf_line(line)
        if rec is None:
            stats.malformed += 1
            continue
        records.append(rec)
    if stats.lines == 0:
        log.warning("trace is empty")
        return []
    if stats.malformed > MAX_MALFORMED * stats.lines:
        raise WorkloadError(f"{stats.malformed}/{stats.lines} lines malformed; not a Common Log Format trace?")
    records.sort(key=lambda r: r.timestamp)
    return records


def parse_trace_file(path, stats: Optional[ParseStats] = None) -> List[TraceRecord]:
    return parse_trace(_open_lines(path), stats)


def replay(records: Sequence[TraceRecord], rules: Sequence[ChainMixRule], time_scale: float = 1.0,
           origin: Optional[float] = None) -> Arrivals:
    """Map each record to the first matching rule's chain, at ``(ts - origin) / time_scale``."""
    if not time_scale > 0:
        raise ValidationError("time_scale must be positive")
    if not records:
        return Arrivals(np.zeros(0), [])
    if origin is None:
        origin = records[0].timestamp
    times, chains = [], []
    dropped = 0
    compiled = [(re.compile(r.pattern), r.chain_id) for r in rules]
    for rec in records:
        for rx, chain in compiled:
            if rx.search(rec.request_key):
                times.append((rec.timestamp - origin) / time_scale)
                chains.append(chain)
                break
        else:
            dropped += 1
    if not chains:
        raise WorkloadError("no rule matched any trace record")
    if dropped:
        log.info("replay dropped %d unmatched records", dropped)
    return Arrivals(np.asarray(times, dtype=float), chains)


def _mix_arrays(mix: Mapping[str, float]):
    chains = sorted(mix)
    weights = np.array([float(mix[c]) for c in chains])
    if (weights < 0).any() or weights.sum() <= 0:
        raise ValidationError("chain mix weights must be nonnegative with a positive sum")
    return chains, weights / weights.sum()


def _piecewise_poisson(rng: np.random.Generator, segments: Sequence[Tuple[float, float, float]],
                       n_choices: int = 1, probs=None) -> Tuple[np.ndarray, np.ndarray]:
    # each segment draws its own times and labels, so a run's prefix does not depend on its length
    times, picks = [], []
    for start, end, rate in segments:
        if rate < 0:
            raise ValidationError("rates must be nonnegative")
        if rate == 0 or end <= start:
            continue
        n = rng.poisson(rate * (end - start))
        times.append(np.sort(rng.uniform(start, end, size=n)))
        picks.append(rng.choice(n_choices, size=n, p=probs))
    if not times:
        return np.zeros(0), np.zeros(0, dtype=int)
    return np.concatenate(times), np.concatenate(picks)


def synth(kind: str, params: Mapping, mix: Mapping[str, float], seed: int, duration: float) -> Arrivals:
    """Synthetic root arrivals.

    kind is one of ``poisson`` (``rate``), ``step`` (``rate1``, ``rate2``,
    ``t_step``) or ``hourly`` (``profile``: per-hour rates, repeated if the
    duration runs past its end). Any kind accepts ``bursts`` (``factor``,
    ``mean_on``, ``mean_off``): the rate is multiplied by ``factor`` during
    bursts that alternate with quiet periods of exponential length.
    """
    rng = np.random.default_rng(seed)
    if duration < 0:
        raise ValidationError("duration must be >= 0")
    if kind == "poisson":
        segments = [(0.0, duration, float(params["rate"]))]
    elif kind == "step":
        t_step = float(params["t_step"])
        segments = [(0.0, min(t_step, duration), float(params["rate1"])),
                    (t_step, duration, float(params["rate2"]))]
    elif kind == "hourly":
        profile = list(params.get("profile") or [])
        if not profile:
            raise ValidationError("hourly profile is empty")
        hour = float(params.get("hour", 3600.0))
        segments = []
        t, i = 0.0, 0
        while t < duration:
            segments.append((t, min(t + hour, duration), float(profile[i % len(profile)])))
            t += hour
            i += 1
    else:
        raise ValidationError(f"unknown workload kind {kind!r}")
    if params.get("bursts"):
        burst_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        segments = _modulate(segments, _burst_intervals(burst_rng, params["bursts"], duration),
                             float(params["bursts"].get("factor", 2.0)))
    chains, probs = _mix_arrays(mix)
    times, picks = _piecewise_poisson(rng, segments, len(chains), probs)
    return Arrivals(times, [chains[i] for i in picks])


def _burst_intervals(rng: np.random.Generator, spec: Mapping, duration: float) -> List[Tuple[float, float]]:
    """Alternating quiet/burst periods with exponential lengths; returns the bursts."""
    mean_on = float(spec.get("mean_on", 900.0))
    mean_off = float(spec.get("mean_off", 2700.0))
    if not (mean_on > 0 and mean_off > 0):
        raise ValidationError("burst mean_on and mean_off must be positive")
    out = []
    t = 0.0
    while t < duration:
        t += rng.exponential(mean_off)
        end = t + rng.exponential(mean_on)
        if t < duration:
            out.append((t, min(end, duration)))
        t = end
    return out


def _modulate(segments, bursts, factor: float):
    """Multiply the rate by ``factor`` inside burst intervals."""
    if factor < 0:
        raise ValidationError("burst factor must be nonnegative")
    cuts = sorted({x for b in bursts for x in b})
    out = []
    for start, end, rate in segments:
        points = [start] + [c for c in cuts if start < c < end] + [end]
        for a, b in zip(points, points[1:]):
            mid = 0.5 * (a + b)
            inside = any(lo <= mid < hi for lo, hi in bursts)
            out.append((a, b, rate * factor if inside else rate))
    return out


def clarknet_profile(peak: float) -> List[float]:
    """24 hourly rates with the bundled diurnal shape, scaled so the busiest hour is ``peak``."""
    top = max(CLARKNET_SHAPE)
    return [peak * v / top for v in CLARKNET_SHAPE]


def write_sample_log(path, seed: int = 1995, hours: int = 24, peak: float = 0.05) -> None:
    """Write a synthetic, CLF-valid access log with the bundled diurnal shape."""
    rng = np.random.default_rng(seed)
    paths = ["/index.html", "/cgi-bin/search", "/images/logo.gif", "/news/today.html",
             "/cgi-bin/order", "/products/list.html"]
    base = datetime.strptime("28/Aug/1995:00:00:00 -0400", "%d/%b/%Y:%H:%M:%S %z").timestamp()
    arr = synth("hourly", {"profile": clarknet_profile(peak)}, {"x": 1}, seed, hours * 3600.0)
    tz = datetime.strptime("-0400", "%z").tzinfo
    with open(path, "w", encoding="ascii") as fh:
        for t in arr.times:
            stamp = datetime.fromtimestamp(int(base + t), tz).strftime("%d/%b/%Y:%H:%M:%S %z")
            host = f"host{rng.integers(1, 400)}.example.net"
            page = paths[rng.integers(len(paths))]
            fh.write(f'{host} - - [{stamp}] "GET {page} HTTP/1.0" 200 {rng.integers(200, 9000)}\n')
