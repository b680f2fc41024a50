"""Self-organizing-map trend mining and GMM simulation for wireless usage traces."""

__version__ = "0.1.0"
