"""Discrete-event simulator for LLM inference serving deployments."""

__version__ = "0.1.0"
