"""Burst super-resolution from noisy, misaligned RAW bursts."""

__version__ = "0.1.0"
