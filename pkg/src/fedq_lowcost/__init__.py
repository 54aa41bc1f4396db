"""Federated and single-agent early-settled Q-learning on tabular episodic MDPs."""

__version__ = "0.1.0"
