"""Gated linear recurrent layers with state expansion.

Library + CLI for two token mixers — an elementwise gated linear recurrence
(hgrn1) and its matrix-state extension (hgrn2) — with hierarchical forget-gate
lower bounds, a chunk-parallel evaluation that matches the sequential
recurrence, parameter-efficient state-expansion projections, and a small
training harness (MQAR recall + char-level language modelling).
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
