"""Offline dual-agent reinforcement learning for inquisitive legal dialogue."""

__version__ = "0.1.0"
