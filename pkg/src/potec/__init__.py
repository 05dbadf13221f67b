"""Two-stage off-policy learning with cluster-level importance weighting."""

__version__ = "0.1.0"
