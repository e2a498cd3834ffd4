"""Multimodal online federated learning under modality quantity and quality imbalance."""

__version__ = "0.1.0"
