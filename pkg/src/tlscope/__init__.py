"""Passive detection and family attribution of malicious TLS flows."""

__version__ = "0.1.0"
