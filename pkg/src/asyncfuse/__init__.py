"""Hierarchical asynchronous multimodal fusion for long-term forecasting."""

__version__ = "0.1.0"
