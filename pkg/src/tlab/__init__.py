"""Transducer losses, auxiliary training criteria and beam-search decoders at desk scale."""

__version__ = "0.1.0"
