"""Metrics, cascade inference, baselines and the evaluate stage."""
