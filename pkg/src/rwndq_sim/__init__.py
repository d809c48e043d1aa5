"""Packet-level simulator and algorithm library for switch-side receive-window rewriting."""

__version__ = "0.1.0"
