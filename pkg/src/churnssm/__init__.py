"""State-space modelling of player-segment conversion rates."""
__version__ = "0.1.0"
