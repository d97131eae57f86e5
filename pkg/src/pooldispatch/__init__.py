"""Desk-scale ride-pooling dispatch: simulator, matching, policy network,
and the two-stage reinforcement-learning training pipeline."""

__version__ = "0.1.0"
