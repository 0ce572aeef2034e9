"""Command line interface for the criticality cascade pipeline."""
