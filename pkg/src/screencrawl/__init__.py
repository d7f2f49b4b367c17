"""Simulated GUI crawling, screen deduplication, dataset analysis and training-task generation."""

__version__ = "0.1.0"
