"""Desk-scale continual pruning: sensitivity-guided importance accumulation
across dataset sequences, baseline criteria, and a permutation experiment
harness measuring perplexity and backward transfer."""

__version__ = "0.1.0"
