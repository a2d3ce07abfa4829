"""Backdoor detection and trust management for decentralized SGD."""

__version__ = "0.1.0"
