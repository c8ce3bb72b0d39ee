"""Privacy-preserving two-party MADDPG for a two-player supply chain."""

__version__ = "0.1.0"
