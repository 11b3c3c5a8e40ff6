"""Mapless receding-horizon obstacle avoidance for quadrotors from depth images."""

__version__ = "0.1.0"
