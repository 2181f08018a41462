"""Distributional planning networks: control-centric image embeddings
learned from random interaction, used as goal-image rewards for RL."""

__version__ = "0.1.0"
