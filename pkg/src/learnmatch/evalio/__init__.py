"""Metrics, configuration, persistence and the command-line entry point."""
