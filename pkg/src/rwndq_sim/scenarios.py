"""Experiment presets and the runner that turns a Scenario into metrics.

Two testbed shapes are modelled:

``dumbbell``
    ``n_senders`` hosts, each on its own 1 Gb/s link into one switch, and a
    receiver behind the switch.  Every sender runs one elephant and (when
    mice are enabled) one web server; the mice clients live on the receiver.

``multi_bottleneck``
    ``n_hosts`` sender machines.  Every application on a machine has its own
    internal port into the machine's software switch ``s<i>``; the machine's
    uplink (link ``i``) joins a core switch whose port towards the receiver
    is link ``6``.  All six are 1 Gb/s drop-tail bottlenecks.
"""

from __future__ import annotations

import dataclasses
import random
import time
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

from .endhost import (
    AppModel,
    ElephantApp,
    FctRecord,
    FlowControlMonitor,
    FlowIds,
    MiceClient,
    TcpConfig,
    install_web_server,
)
from .metrics import MetricsReport
from .rwndq import RwndqConfig
from .simengine.core import MS, SECOND, US, Simulator, serialization_ns
from .simengine.topology import ConfigError, LinkSpec, Network, TopologySpec, build_topology

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

DISCIPLINES = ("fifo", "rwndq")
GBPS = 1_000_000_000
BUFFER_BYTES = 85_300
WEB_PORT = 80
IPERF_BASE_PORT = 5001


@dataclass
class TopologyParams:
    shape: str = "multi_bottleneck"  # or "dumbbell"
    n_hosts: int = 5
    link_rate_bps: int = GBPS
    internal_rate_bps: int = 10 * GBPS
    internal_delay_us: float = 1.0
    buffer_bytes: int = BUFFER_BYTES
    base_rtt_us: float = 200.0


@dataclass
class Scenario:
    name: str
    topology: TopologyParams = field(default_factory=TopologyParams)
    elephants_per_host: int = 10
    mice_per_host: int = 0
    mice_requests: int = 1000
    response_size: int = 11_500
    request_size: int = 100
    mice_start_s: Optional[float] = None  # None: 40% into the run
    sim_duration_s: float = 50.0
    elephant_duration_s: Optional[float] = None  # None: whole run
    sample_interval_s: float = 0.5
    warmup_s: float = 2.0
    start_jitter_us: float = 1000.0
    forwarding_jitter_us: float = 1.0
    seed: int = 1
    rwndq_m: int = 5
    rwndq_tick_us: int = 100
    mss: int = 1460
    rto_min_ms: float = 200.0
    queue_discipline: str = "rwndq"

    def __post_init__(self):
        if isinstance(self.topology, dict):
            self.topology = TopologyParams(**self.topology)
        self.validate()

    def validate(self) -> None:
        if self.queue_discipline not in DISCIPLINES:
            raise ConfigError(f"queue_discipline must be one of {DISCIPLINES}")
        if self.topology.shape not in ("dumbbell", "multi_bottleneck"):
            raise ConfigError(f"unknown topology shape {self.topology.shape!r}")
        if self.sim_duration_s <= 0 or self.sample_interval_s <= 0:
            raise ConfigError("durations must be positive")
        if not 0 <= self.warmup_s < self.sim_duration_s:
            raise ConfigError("warm-up must fit inside the run")
        if self.mice_per_host and not 0 < self.mice_start_time_s < self.elephant_end_s:
            raise ConfigError("mice must start strictly inside the elephants' activity")
        if self.start_jitter_us < 0 or self.forwarding_jitter_us < 0:
            raise ConfigError("jitter must be non-negative")
        if self.rwndq_tick_us >= self.topology.base_rtt_us:
            raise ConfigError("RWNDQ tick interval must be below the base RTT")

    @property
    def mice_start_time_s(self) -> float:
        return self.mice_start_s if self.mice_start_s is not None else 0.4 * self.sim_duration_s

    @property
    def elephant_end_s(self) -> float:
        if self.elephant_duration_s is None:
            return self.sim_duration_s
        return min(self.sim_duration_s, self.elephant_duration_s)

    @property
    def n_elephants(self) -> int:
        return self.topology.n_hosts * self.elephants_per_host

    @property
    def n_mice_clients(self) -> int:
        return self.topology.n_hosts * self.mice_per_host

    def with_overrides(self, **overrides: Any) -> "Scenario":
        if "duration" in overrides:
            overrides["sim_duration_s"] = overrides.pop("duration")
        topo = overrides.pop("topology", None)
        new = dataclasses.replace(self, **overrides)
        if topo:
            new.topology = dataclasses.replace(self.topology, **topo)
            new.validate()
        return new

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    def to_toml(self) -> str:
        data = self.to_dict()
        topo = data.pop("topology")
        return tomli_w.dumps({"scenario": data, "topology": topo})

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        body = dict(data.get("scenario", data))
        topo = data.get("topology", body.pop("topology", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(body) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        tknown = {f.name for f in fields(TopologyParams)}
        if set(topo) - tknown:
            raise ConfigError(f"unknown topology keys: {', '.join(sorted(set(topo) - tknown))}")
        if "name" not in body:
            raise ConfigError("scenario needs a name")
        return cls(topology=TopologyParams(**topo), **body)

    @classmethod
    def from_toml(cls, text: str) -> "Scenario":
        try:
            return cls.from_dict(tomllib.loads(text))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"bad scenario file: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_toml(Path(path).read_text())


def _multi(n_hosts: int, elephants: int, mice: int, duration: float, name: str) -> Scenario:
    return Scenario(
        name=name,
        topology=TopologyParams(shape="multi_bottleneck", n_hosts=n_hosts),
        elephants_per_host=elephants,
        mice_per_host=mice,
        sim_duration_s=duration,
        mice_start_s=20.0 if mice else None,
    )


PRESETS = {
    "dumbbell_bloat": lambda: Scenario(
        name="dumbbell_bloat",
        topology=TopologyParams(shape="dumbbell", n_hosts=11),
        elephants_per_host=1,
        mice_per_host=1,
        sim_duration_s=50.0,
        mice_start_s=20.0,
    ),
    "incast_50": lambda: _multi(5, 10, 0, 50.0, "incast_50"),
    "incast_200": lambda: _multi(5, 40, 0, 50.0, "incast_200"),
    "bloat_50_30": lambda: _multi(5, 10, 6, 50.0, "bloat_50_30"),
    "bloat_200_30": lambda: _multi(5, 40, 6, 50.0, "bloat_200_30"),
}

DESK_DURATION_S = 10.0


class UnknownPreset(ConfigError):
    pass


def preset(name: str, **overrides: Any) -> Scenario:
    """Full-length preset with ``overrides`` applied.

    Shortening the run with ``duration=`` moves the mice start to the same
    relative point (40% in) unless ``mice_start_s`` is overridden too, and
    caps the warm-up at a fifth of the run.
    """
    try:
        base = PRESETS[name]()
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None
    duration = overrides.get("duration", overrides.get("sim_duration_s"))
    if duration is not None:
        if base.mice_per_host:
            overrides.setdefault("mice_start_s", None)
        overrides.setdefault("warmup_s", min(base.warmup_s, duration / 5))
    return base.with_overrides(**overrides)


def desk_preset(name: str, **overrides: Any) -> Scenario:
    overrides.setdefault("duration", DESK_DURATION_S)
    return preset(name, **overrides)


# ------------------------------------------------------------- topology


@dataclass
class Layout:
    """A built topology plus the roles of its hosts."""

    spec: TopologySpec
    elephants: list[tuple[str, str]]  # (sender host, receiver host)
    mice: list[tuple[str, str]]  # (client host, server host)
    bottleneck: str
    instrumented: list[str]


def _physical_delay_us(params: TopologyParams, physical_links: int, internal_links: int, mss: int) -> float:
    data, ack = mss + 40, 40
    fixed_ns = 0
    fixed_ns += physical_links * (serialization_ns(data, params.link_rate_bps) + serialization_ns(ack, params.link_rate_bps))
    fixed_ns += internal_links * (
        serialization_ns(data, params.internal_rate_bps)
        + serialization_ns(ack, params.internal_rate_bps)
        + 2 * int(params.internal_delay_us * US)
    )
    remaining = params.base_rtt_us * US - fixed_ns
    if remaining < 0:
        raise ConfigError("base RTT too small for the link serialization delays")
    return remaining / (2 * physical_links) / US


def layout(scn: Scenario) -> Layout:
    p = scn.topology
    rate, buf = p.link_rate_bps, p.buffer_bytes
    if p.shape == "dumbbell":
        delay = round(_physical_delay_us(p, 2, 0, scn.mss), 3)
        senders = [f"h{i + 1}" for i in range(p.n_hosts)]
        hosts = senders + ["recv"]
        links = [LinkSpec(h, "sw", rate, delay, buf, name=f"{h}-up") for h in senders]
        links.append(LinkSpec("sw", "recv", rate, delay, buf, name="bottleneck"))
        elephants = [(h, "recv") for h in senders for _ in range(scn.elephants_per_host)]
        mice = [("recv", h) for h in senders for _ in range(scn.mice_per_host)]
        spec = TopologySpec(hosts=hosts, switches=["sw"], links=links)
        return Layout(spec, elephants, mice, "bottleneck", ["bottleneck"])

    delay = round(_physical_delay_us(p, 2, 1, scn.mss), 3)
    hosts: list[str] = []
    links = []
    elephants, mice = [], []
    switches = [f"s{i + 1}" for i in range(p.n_hosts)] + ["core"]
    for i in range(p.n_hosts):
        sw = f"s{i + 1}"
        for j in range(scn.elephants_per_host):
            h = f"e{i + 1}.{j + 1}"
            hosts.append(h)
            links.append(LinkSpec(h, sw, p.internal_rate_bps, p.internal_delay_us, buf, name=f"{h}-port"))
            elephants.append((h, "recv"))
        for j in range(scn.mice_per_host):
            h = f"w{i + 1}.{j + 1}"
            hosts.append(h)
            links.append(LinkSpec(h, sw, p.internal_rate_bps, p.internal_delay_us, buf, name=f"{h}-port"))
            mice.append(("recv", h))
        links.append(LinkSpec(sw, "core", rate, delay, buf, name=str(i + 1)))
    hosts.append("recv")
    last = str(p.n_hosts + 1)
    links.append(LinkSpec("core", "recv", rate, delay, buf, name=last))
    spec = TopologySpec(hosts=hosts, switches=switches, links=links)
    return Layout(spec, elephants, mice, last, [str(i + 1) for i in range(p.n_hosts + 1)])


# --------------------------------------------------------------- runner


def run(scn: Scenario, discipline: Optional[str] = None, trace=None, state_log=None) -> MetricsReport:
    """Simulate ``scn`` under ``discipline`` and collect its metrics."""
    discipline = discipline or scn.queue_discipline
    if discipline not in DISCIPLINES:
        raise ConfigError(f"discipline must be one of {DISCIPLINES}")
    wall0 = time.perf_counter()
    rng = random.Random(scn.seed)
    sim = Simulator()
    rcfg = RwndqConfig(m=scn.rwndq_m, tick_interval_us=scn.rwndq_tick_us, default_mss=scn.mss)
    lay = layout(scn)
    # separate stream so the app schedule is identical under both disciplines
    fwd_rng = random.Random(rng.getrandbits(64))
    net = build_topology(lay.spec, sim, rcfg if discipline == "rwndq" else None,
                         forwarding_jitter_ns=int(scn.forwarding_jitter_us * US), rng=fwd_rng)
    if trace is not None:
        from .switchmodel import PacketTrace

        pt = PacketTrace(trace)
        for port in net.ports.values():
            port.trace = pt
    if state_log is not None:
        for sw in net.switches.values():
            sw.state_log = state_log

    tcfg = TcpConfig(mss=scn.mss, rto_min=int(scn.rto_min_ms * MS))
    monitor = FlowControlMonitor()
    flow_ids = FlowIds()
    jitter = int(scn.start_jitter_us * US)
    t0 = jitter  # keeps jittered starts non-negative

    def start_time(base: int) -> int:
        return base + (rng.randint(-jitter, jitter) if jitter else 0)

    elephant_duration = None if scn.elephant_duration_s is None else int(scn.elephant_duration_s * SECOND)
    elephants = []
    for k, (src, dst) in enumerate(lay.elephants):
        app = AppModel("elephant", start_time=start_time(t0), duration=elephant_duration)
        elephants.append(
            ElephantApp(net.hosts[src], net.hosts[dst], flow_ids(), IPERF_BASE_PORT + k, app, tcfg, monitor)
        )

    clients = []
    if lay.mice:
        mice_t0 = int(scn.mice_start_time_s * SECOND)
        servers = sorted({srv for _, srv in lay.mice}, key=[s for _, s in lay.mice].index)
        web = AppModel("mice", response_size=scn.response_size, request_size=scn.request_size,
                       request_count=scn.mice_requests)
        for srv in servers:
            install_web_server(net.hosts[srv], WEB_PORT, web, tcfg, monitor)
        for cid, (cli, srv) in enumerate(lay.mice):
            app = dataclasses.replace(web, start_time=start_time(mice_t0))
            clients.append(MiceClient(net.hosts[cli], srv, WEB_PORT, cid, app, flow_ids, tcfg, monitor))

    report = MetricsReport(
        scenario=scn.name,
        discipline=discipline,
        seed=scn.seed,
        sample_interval_s=scn.sample_interval_s,
        warmup_s=scn.warmup_s,
        duration_s=scn.sim_duration_s,
        link_rate_bps=scn.topology.link_rate_bps,
        bottleneck=lay.bottleneck,
        target_bytes=rcfg.target_for(scn.topology.buffer_bytes),
    )
    instrumented = [net.ports[n] for n in lay.instrumented]
    interval = int(scn.sample_interval_s * SECOND)
    last = [0] * len(elephants)

    def sample() -> None:
        now = sim.now
        row = []
        for k, e in enumerate(elephants):
            d = e.delivered
            row.append((d - last[k]) * 8 * SECOND / interval)
            last[k] = d
        report.add_sample(now / SECOND, row, {p.name: p.queue.backlog_area(now) for p in instrumented},
                          {p.name: p.queue.tx_bytes for p in instrumented})
        if now + interval <= end:
            sim.schedule(now + interval, sample)

    end = int(scn.sim_duration_s * SECOND)
    report.flow_ids = [e.flow_id for e in elephants]
    report.add_sample(0.0, [0.0] * len(elephants), {p.name: 0 for p in instrumented}, {p.name: 0 for p in instrumented})
    sim.schedule(interval, sample)
    sim.run_until(end)

    for name in lay.instrumented:
        q = net.ports[name].queue
        report.drops[name] = (q.drops, q.offered_pkts)
        report.link_accounting[name] = (q.offered_bytes, q.accepted_bytes, q.dropped_bytes)
    for c in clients:
        report.fct_records.extend(c.records)
    report.mice_incomplete = sum(1 for c in clients if not c.done)
    report.flow_control_checks = monitor.checks
    report.flow_control_violations = monitor.violations
    report.rwndq_anomalies = sum(sw.anomalies() for sw in net.switches.values()) if discipline == "rwndq" else 0
    report.no_route = sum(sw.no_route for sw in net.switches.values())
    report.events = sim.executed
    report.timeouts = sum(e.sender.timeouts for e in elephants if e.sender is not None)
    report.wall_seconds = time.perf_counter() - wall0
    return report
