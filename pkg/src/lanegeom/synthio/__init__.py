"""Synthetic data, file formats and configuration."""
