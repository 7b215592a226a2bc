"""Consensus-protocol laboratory: BFT and longest-chain protocols over a deterministic simulated network."""

__version__ = "0.1.0"
