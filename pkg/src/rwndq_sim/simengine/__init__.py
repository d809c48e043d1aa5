"""Discrete-event engine and topology assembly."""

from .core import MS, NS, SECOND, US, Event, EventKind, SchedulingError, Simulator, serialization_ns

_TOPOLOGY_NAMES = {"ConfigError", "Link", "LinkSpec", "Network", "TopologySpec", "build_topology"}


def __getattr__(name):
    # topology pulls in endhost/switchmodel, which themselves import .core
    if name in _TOPOLOGY_NAMES:
        from . import topology

        return getattr(topology, name)
    raise AttributeError(name)


__all__ = [
    "MS",
    "NS",
    "SECOND",
    "US",
    "Event",
    "EventKind",
    "SchedulingError",
    "Simulator",
    "serialization_ns",
    *sorted(_TOPOLOGY_NAMES),
]
