"""Experiment orchestration: configs, figure runs, plots and the self-test."""
