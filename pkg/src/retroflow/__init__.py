"""Discrete flow matching on attributed graphs with Feynman-Kac steering."""

__version__ = "0.1.0"
