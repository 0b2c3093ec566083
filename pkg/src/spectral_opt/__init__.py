"""Muon and SGD update rules with executable checks of their step-size and convergence theory."""

__version__ = "0.1.0"
