"""Cluster-guided contrastive pre-training with episodic few-shot evaluation."""

__version__ = "0.1.0"
