"""Desk-scale sequence-to-sequence training with likelihood and risk
objectives, plus domain-shift diagnostics."""

__version__ = "0.1.0"
