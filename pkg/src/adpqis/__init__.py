"""Q-learning with importance-sampled actions for multistage expansion planning."""
__version__ = "0.1.0"
