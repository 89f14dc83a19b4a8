"""Distributed spectral shape classification for communication-limited swarms."""

__version__ = "0.1.0"
