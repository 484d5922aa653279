"""Mean-teacher metric learning for speaker verification at desk scale."""

__version__ = "0.1.0"
