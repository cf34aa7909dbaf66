"""Experiment harness: seeded sweeps, paired ST/non-ST simulations and reports."""
