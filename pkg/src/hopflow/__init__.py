"""Hop-interaction graph learning.

The pipeline has two halves that never meet at training time:

* offline: build a normalized sparse adjacency and propagate node features
  through it L times, persisting the resulting per-node hop stack
  (``hopflow.graph``, ``hopflow.hops``);
* online: train a classifier that encodes the L+1 hop slices of each node as
  tokens, mixes them with self-attention (or simpler variants), fuses them and
  predicts a class, optionally with a redundancy-reduction auxiliary loss
  (``hopflow.model``, ``hopflow.losses``, ``hopflow.training``).

``hopflow.cli`` ties everything into reproducible experiments.
"""

__version__ = "0.1.0"
