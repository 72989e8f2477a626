"""Multi-model forgetting: sequential training with shared weights and the Weight Plasticity Loss."""

__version__ = "0.1.0"
