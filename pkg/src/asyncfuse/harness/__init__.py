"""Experiment orchestration: dataset registry, protocols, reports and the command line."""
