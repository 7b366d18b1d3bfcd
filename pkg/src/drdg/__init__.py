"""Domain-generalized face liveness detection with sample and channel reweighting."""

__version__ = "0.1.0"
