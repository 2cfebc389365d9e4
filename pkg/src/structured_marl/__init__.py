"""Structured multi-agent actor-critic with graph-derived critic inputs."""

__version__ = "0.1.0"
