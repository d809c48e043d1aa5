"""Run metrics: throughput samples, drops, queue occupancy and mice FCTs."""

from __future__ import annotations

import csv
import math
import statistics
from fractions import Fraction
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence

from .endhost import FctRecord

SECOND_NS = 1_000_000_000
US_NS = 1_000


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    if not samples:
        raise ValueError("percentile of an empty sample set")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile {p} outside [0, 100]")
    ordered = sorted(samples)
    # exact rational rank: p/100*n in floats can land just above an integer
    rank = math.ceil(Fraction(p) * len(ordered) / 100)
    return ordered[max(rank, 1) - 1]


def jain_index(throughputs: Sequence[float]) -> float:
    """(sum x)^2 / (n * sum x^2); 1.0 means a perfectly even split."""
    if not throughputs:
        raise ValueError("Jain index of an empty allocation")
    if any(x < 0 for x in throughputs):
        raise ValueError("throughputs must be non-negative")
    sq = sum(x * x for x in throughputs)
    if sq == 0:
        raise ValueError("Jain index undefined when every throughput is zero")
    return sum(throughputs) ** 2 / (len(throughputs) * sq)


@dataclass
class FctSummary:
    count: int
    failed: int
    mean: float
    sd: float
    p99: float
    max: float


def summarize_fct(values: Iterable[float]) -> Optional[FctSummary]:
    vals = list(values)
    done = [v for v in vals if math.isfinite(v)]
    if not done:
        return None
    return FctSummary(
        count=len(vals),
        failed=len(vals) - len(done),
        mean=statistics.fmean(done),
        sd=statistics.pstdev(done),
        p99=percentile(vals, 99),
        max=max(vals),
    )


@dataclass
class MetricsReport:
    scenario: str
    discipline: str
    seed: int
    sample_interval_s: float
    warmup_s: float
    duration_s: float
    link_rate_bps: int
    bottleneck: str
    target_bytes: int
    flow_ids: list = field(default_factory=list)
    sample_times: list = field(default_factory=list)
    # one row of per-flow bits/s per sample time (row 0 is the t=0 origin)
    throughput: list = field(default_factory=list)
    backlog_area: list = field(default_factory=list)
    tx_bytes: list = field(default_factory=list)
    drops: dict = field(default_factory=dict)
    link_accounting: dict = field(default_factory=dict)
    fct_records: list = field(default_factory=list)
    mice_incomplete: int = 0
    flow_control_checks: int = 0
    flow_control_violations: int = 0
    rwndq_anomalies: int = 0
    no_route: int = 0
    timeouts: int = 0
    events: int = 0
    wall_seconds: float = 0.0

    def add_sample(self, t: float, row: list, area: dict, tx: dict) -> None:
        self.sample_times.append(t)
        self.throughput.append(row)
        self.backlog_area.append(area)
        self.tx_bytes.append(tx)

    # ------------------------------------------------------- windows

    def _index_at(self, t: float) -> int:
        """Index of the first sample at or after ``t``."""
        for i, st in enumerate(self.sample_times):
            if st >= t - 1e-9:
                return i
        return len(self.sample_times) - 1

    def _index_before(self, t: float) -> int:
        """Index of the last sample at or before ``t``."""
        idx = 0
        for i, st in enumerate(self.sample_times):
            if st > t + 1e-9:
                break
            idx = i
        return idx

    def steady_rows(self) -> list:
        """Sample rows whose interval lies entirely after the warm-up."""
        first = self._index_at(self.warmup_s + self.sample_interval_s)
        return self.throughput[first:]

    def per_flow_samples(self) -> list[list[float]]:
        rows = self.steady_rows()
        return [[r[k] for r in rows] for k in range(len(self.flow_ids))]

    def per_flow_mean(self) -> list[float]:
        return [statistics.fmean(s) if s else 0.0 for s in self.per_flow_samples()]

    def per_flow_variance(self) -> list[float]:
        """Population variance of each flow's samples, in (bits/s)^2."""
        return [statistics.pvariance(s) if len(s) > 1 else 0.0 for s in self.per_flow_samples()]

    def jain(self) -> float:
        return jain_index(self.per_flow_mean())

    def mean_backlog(self, link: Optional[str] = None, start_s: Optional[float] = None,
                     end_s: Optional[float] = None) -> float:
        """Time-averaged backlog of ``link`` over [start_s, end_s] in bytes.

        The window is widened outwards to the nearest sample points.
        """
        link = link or self.bottleneck
        i = self._index_before(self.duration_s / 2 if start_s is None else start_s)
        j = self._index_at(self.duration_s if end_s is None else end_s)
        dt = (self.sample_times[j] - self.sample_times[i]) * SECOND_NS
        if dt <= 0:
            raise ValueError("empty averaging window")
        return (self.backlog_area[j][link] - self.backlog_area[i][link]) / dt

    def goodput_bps(self) -> float:
        """Aggregate elephant goodput over the steady-state window."""
        rows = self.steady_rows()
        if not rows:
            return 0.0
        return sum(sum(r) for r in rows) / len(rows)

    def utilization(self, link: Optional[str] = None) -> float:
        """Wire utilization of ``link`` after warm-up (headers included)."""
        link = link or self.bottleneck
        i = self._index_at(self.warmup_s)
        j = len(self.sample_times) - 1
        dt = self.sample_times[j] - self.sample_times[i]
        if dt <= 0:
            return 0.0
        return (self.tx_bytes[j][link] - self.tx_bytes[i][link]) * 8 / dt / self.link_rate_bps

    def goodput_fraction(self) -> float:
        return self.goodput_bps() / self.link_rate_bps

    def drops_on(self, links: Iterable[str]) -> int:
        return sum(self.drops[name][0] for name in links)

    # ----------------------------------------------------------- FCT

    def fct_values_s(self, client_id: Optional[int] = None) -> list[float]:
        return [
            (r.fct / SECOND_NS if r.fct is not None else math.inf)
            for r in self.fct_records
            if client_id is None or r.client_id == client_id
        ]

    def client_ids(self) -> list[int]:
        return sorted({r.client_id for r in self.fct_records})

    def fct_summary(self) -> Optional[FctSummary]:
        return summarize_fct(self.fct_values_s())

    def per_client_p99_s(self) -> list[float]:
        return [percentile(self.fct_values_s(c), 99) for c in self.client_ids()]

    def fraction_fct_at_least(self, threshold_s: float) -> float:
        vals = self.fct_values_s()
        return sum(1 for v in vals if v >= threshold_s) / len(vals) if vals else 0.0

    # ----------------------------------------------------------- CSV

    def write_throughput_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "flow_id", "bits_per_sec"])
        for t, row in zip(self.sample_times[1:], self.throughput[1:]):
            for fid, v in zip(self.flow_ids, row):
                w.writerow([f"{t:.3f}", fid, f"{v:.1f}"])

    def write_drops_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_id", "drops", "offered_pkts"])
        for name, (drops, offered) in self.drops.items():
            w.writerow([name, drops, offered])

    def write_fct_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "request_idx", "fct_us"])
        for r in self.fct_records:
            w.writerow([r.client_id, r.request_idx, "inf" if r.fct is None else f"{r.fct / US_NS:.3f}"])

    def summary(self) -> dict:
        """Headline numbers for the fifo/rwndq comparison table."""
        out = {
            "elephants": len(self.flow_ids),
            "goodput_mbps": self.goodput_bps() / 1e6,
            "bottleneck_utilization": self.utilization(),
            "jain_index": self.jain() if self.flow_ids and any(self.per_flow_mean()) else float("nan"),
            "max_throughput_variance_mbps2": max(self.per_flow_variance(), default=0.0) / 1e12,
            "mean_backlog_bytes_final_half": self.mean_backlog(),
            "total_drops": sum(d for d, _ in self.drops.values()),
            "bottleneck_drops": self.drops[self.bottleneck][0],
            "elephant_timeouts": self.timeouts,
            "flow_control_violations": self.flow_control_violations,
        }
        fct = self.fct_summary()
        if fct is not None:
            out.update(
                mice_requests=fct.count,
                mice_failed=fct.failed,
                fct_mean_ms=fct.mean * 1e3,
                fct_sd_ms=fct.sd * 1e3,
                fct_p99_ms=fct.p99 * 1e3,
                fct_max_ms=fct.max * 1e3,
                fct_share_over_200ms=self.fraction_fct_at_least(0.2),
            )
        return out


def write_summary_csv(fh: IO[str], reports: Sequence[MetricsReport]) -> None:
    """One row per metric, one column per run."""
    rows: dict[str, list] = {}
    for rep in reports:
        for k, v in rep.summary().items():
            rows.setdefault(k, [""] * len(reports))
    for col, rep in enumerate(reports):
        for k, v in rep.summary().items():
            rows[k][col] = v
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["metric"] + [rep.discipline for rep in reports])
    for k, vals in rows.items():
        w.writerow([k] + [_fmt(v) for v in vals])


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
