"""Prompt learning benchmarks for remote sensing scene classification on a frozen CLIP backbone."""

__version__ = "0.1.0"
