"""Declarative topologies and their assembly into a runnable network."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from ..endhost import Host
from ..rwndq import RwndqConfig
from ..switchmodel import DropTailQueue, Port, Switch
from .core import US, Simulator, serialization_ns


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LinkSpec:
    """Full-duplex link between nodes ``a`` and ``b``.

    ``name`` labels the a->b direction (the port at ``a``); the reverse port
    is ``name + "-rev"``.  ``buffer_bytes`` applies to switch-side ports;
    host transmit queues are unbounded.
    """

    a: str
    b: str
    rate_bps: int
    delay_us: float
    buffer_bytes: Optional[int] = 85_300
    name: Optional[str] = None

    @property
    def label(self) -> str:
        return self.name or f"{self.a}->{self.b}"


@dataclass
class TopologySpec:
    hosts: list[str] = field(default_factory=list)
    switches: list[str] = field(default_factory=list)
    links: list[LinkSpec] = field(default_factory=list)

    def validate(self) -> None:
        names = self.hosts + self.switches
        if len(set(names)) != len(names):
            raise ConfigError("duplicate node names")
        known = set(names)
        for link in self.links:
            for end in (link.a, link.b):
                if end not in known:
                    raise ConfigError(f"link {link.label} references unknown node {end!r}")
            if link.rate_bps <= 0 or link.delay_us < 0:
                raise ConfigError(f"link {link.label} needs a positive rate and non-negative delay")


@dataclass(frozen=True)
class Link:
    rate: int
    propagation_delay: int  # ns
    endpoints: tuple[str, str]


class Network:
    def __init__(self, sim: Simulator):
        self.sim = sim
        self.hosts: dict[str, Host] = {}
        self.switches: dict[str, Switch] = {}
        self.links: list[Link] = []
        self.ports: dict[str, Port] = {}
        self.adjacency: dict[str, list[tuple[str, Port]]] = {}

    def node(self, name: str):
        return self.hosts.get(name) or self.switches[name]

    def path(self, src: str, dst: str) -> list[Port]:
        """Egress ports a packet from ``src`` to ``dst`` traverses."""
        hops = [self.hosts[src].nic]
        node = hops[0].peer
        while isinstance(node, Switch):
            port = node.routes[dst]
            hops.append(port)
            node = port.peer
        if node.name != dst:
            raise ConfigError(f"path from {src} ends at {node.name}, not {dst}")
        return hops

    def base_rtt(self, src: str, dst: str, data_bytes: int = 1500, ack_bytes: int = 40) -> int:
        """Unloaded round trip for one data packet and its ACK, in ns."""
        total = 0
        for port in self.path(src, dst):
            total += serialization_ns(data_bytes, port.line_rate) + port.delay
        for port in self.path(dst, src):
            total += serialization_ns(ack_bytes, port.line_rate) + port.delay
        return total


def build_topology(
    spec: TopologySpec,
    sim: Optional[Simulator] = None,
    rwndq_config: Optional[RwndqConfig] = None,
    mss: Optional[int] = None,
    forwarding_jitter_ns: int = 0,
    rng=None,
) -> Network:
    """Instantiate nodes, ports and static shortest-path routes.

    With ``forwarding_jitter_ns`` set, every switch port delays deliveries by
    a random amount below it, drawn from ``rng`` (a ``random.Random``).
    """
    if forwarding_jitter_ns and rng is None:
        raise ConfigError("forwarding jitter needs a random source")
    spec.validate()
    sim = sim or Simulator()
    net = Network(sim)
    for h in spec.hosts:
        net.hosts[h] = Host(sim, h)
    for s in spec.switches:
        net.switches[s] = Switch(sim, s, rwndq_config)
    for name in spec.hosts + spec.switches:
        net.adjacency[name] = []

    for link in spec.links:
        delay = int(round(link.delay_us * US))
        ends = []
        for here, there, pname in ((link.a, link.b, link.label), (link.b, link.a, link.label + "-rev")):
            node = net.node(here)
            limit = link.buffer_bytes if isinstance(node, Switch) else None
            port = Port(sim, node, pname, DropTailQueue(limit, link.rate_bps), delay)
            port.link_id = pname
            if forwarding_jitter_ns and isinstance(node, Switch):
                port.set_jitter(forwarding_jitter_ns, rng)
            node.add_port(port, mss)
            if pname in net.ports:
                raise ConfigError(f"duplicate link name {pname!r}")
            net.ports[pname] = port
            net.adjacency[here].append((there, port))
            ends.append(port)
        ends[0].connect(ends[1])
        ends[1].connect(ends[0])
        net.links.append(Link(link.rate_bps, delay, (link.a, link.b)))

    for h in spec.hosts:
        if not net.hosts[h].ports:
            raise ConfigError(f"host {h!r} has no link")

    unreachable = []
    for dst in spec.hosts:
        # BFS outward from the destination; each switch learns the port
        # leading one hop closer to it
        seen = {dst}
        frontier = deque([dst])
        while frontier:
            cur = frontier.popleft()
            for nbr, _ in net.adjacency[cur]:
                if nbr in seen:
                    continue
                seen.add(nbr)
                if nbr in net.switches:
                    back = next(p for n, p in net.adjacency[nbr] if n == cur)
                    net.switches[nbr].routes[dst] = back
                    frontier.append(nbr)
        for src in spec.hosts:
            if src != dst and src not in seen:
                unreachable.append((src, dst))
    if unreachable:
        pairs = ", ".join(f"{a}->{b}" for a, b in unreachable)
        raise ConfigError(f"disconnected topology; unreachable pairs: {pairs}")
    return net
