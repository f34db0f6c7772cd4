"""Nested contextual causal bandits: simulator, nested Thompson sampling,
PAC-Bayes off-policy certificates and certified progressive handover."""

__version__ = "0.1.0"
