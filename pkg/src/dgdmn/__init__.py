"""Continual learning by deep generative replay and a dual short-term / long-term memory."""

__version__ = "0.1.0"
