"""Distributed mixed-precision LSTM training on a desk: binary16 emulation,
tree collectives, loss scaling, and disruption-alarm evaluation."""

__version__ = "0.1.0"
