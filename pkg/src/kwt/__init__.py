"""Keyword Transformer: MFCC front-end, from-scratch attention encoder,
distillation training, and analysis tools."""

__version__ = "0.1.0"
