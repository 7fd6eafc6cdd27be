"""Quasi-periodic tori of quasi-linear perturbations of mKdV at finite truncation."""

__version__ = "0.1.0"
