"""Deliberation scheduling for planning with envelopes on stochastic automata."""

__version__ = "0.1.0"
