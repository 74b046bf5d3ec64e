"""Goal-conditioned flow-network training with retrospective backward synthesis."""

__version__ = "0.1.0"
