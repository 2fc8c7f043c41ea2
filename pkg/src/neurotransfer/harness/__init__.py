"""Experiment harness: configuration, trial runner, statistics, summaries and the command line."""
