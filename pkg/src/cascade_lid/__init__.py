"""Cascaded-encoder streaming RNN-T with frame-synchronous language identification."""

__version__ = "0.1.0"
