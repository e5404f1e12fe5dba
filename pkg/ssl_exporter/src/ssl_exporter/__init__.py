"""Offline SSL feature exporter: wav files in, SSLF hidden-state stacks out."""

__version__ = "0.1.0"
