"""Risk-controlled alignment for multi-domain long-tailed generalization, at desk scale."""

__version__ = "0.1.0"
