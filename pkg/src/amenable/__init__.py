"""Learning task amenability: co-training a task predictor with an RL selection controller."""

__version__ = "0.1.0"
