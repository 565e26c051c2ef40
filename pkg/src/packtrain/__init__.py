"""packtrain: train many small models as one fused graph, simulate the cost
of doing so on a single device, and tune hyperparameters pack-aware."""

__version__ = "0.1.0"
