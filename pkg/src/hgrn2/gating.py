"""Forget-gate machinery: monotone lower bounds and the three gate projections.

The forget gate of layer l is confined to [beta_l, 1) by

    beta = cumsum(softmax(Gamma, dim=0), dim=0) - beta^0        (rows: layers)
    f    = beta_l + (1 - beta_l) * sigmoid(pre-activation)

where Gamma is a learned (L x m) matrix and beta^0 is the first row of the
cumulative sum (subtracted per coordinate, so layer 0 has bound 0).  Because
softmax entries are positive, beta is strictly increasing along the layer
axis: upper layers are forced toward long-memory behaviour while layer 0
keeps the full gate range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, add, cumsum, index_select, matmul, mul, sigmoid, silu,
    softmax_dim0, sub, transpose,
)


def compute_lower_bounds(gamma: Tensor) -> Tensor:
    """Per-layer, per-coordinate forget-gate lower bounds from Gamma [L, m].

    Row 0 of the result is exactly zero; rows are non-decreasing and the
    last row stays strictly below 1 whenever L > 1.
    """
    if gamma.ndim != 2:
        raise ValueError(f"compute_lower_bounds: Gamma must be rank 2, got {gamma.shape}")
    c = cumsum(softmax_dim0(gamma), axis=0)
    first = index_select(c, 0, [0])  # [1, m]
    return sub(c, first)


def apply_lower_bound(g_raw: Tensor, beta_layer: Tensor) -> Tensor:
    """f = beta + (1 - beta) * g_raw, bounding the gate into [beta, 1)."""
    one = Tensor(1.0)
    return add(beta_layer, mul(sub(one, beta_layer), g_raw))


@dataclass
class GateParams:
    """Projection weights for one recurrent layer.

    u/v/w rows are output coordinates: pre-activations are x @ W.T + b,
    matching forget / input / output gate roles.
    """
    u: Tensor
    b_u: Tensor
    v: Tensor
    b_v: Tensor
    w: Tensor
    b_w: Tensor

    def tensors(self):
        return {"u": self.u, "b_u": self.b_u, "v": self.v, "b_v": self.b_v,
                "w": self.w, "b_w": self.b_w}


@dataclass
class GateSignals:
    """Projected gate streams before the lower bound is applied."""
    g_raw: Tensor  # sigmoid forget pre-gate, in (0, 1)
    i: Tensor      # silu input stream
    o: Tensor      # output gate (sigmoid or linear, per config)


def init_gate_params(rng: np.random.Generator, d_in: int, d_out: int, std: float) -> GateParams:
    def w():
        return Tensor(rng.normal(0.0, std, size=(d_out, d_in)), requires_grad=True)

    def b():
        return Tensor(np.zeros(d_out), requires_grad=True)

    return GateParams(u=w(), b_u=b(), v=w(), b_v=b(), w=w(), b_w=b())


def project_gates(x: Tensor, params: GateParams,
                  output_activation: str = "sigmoid") -> GateSignals:
    """Compute the three gate streams for a stack of input rows x [N, d]."""
    g_raw = sigmoid(add(matmul(x, transpose(params.u)), params.b_u))
    i = silu(add(matmul(x, transpose(params.v)), params.b_v))
    o_pre = add(matmul(x, transpose(params.w)), params.b_w)
    if output_activation == "sigmoid":
        o = sigmoid(o_pre)
    elif output_activation == "none":
        o = o_pre
    else:
        raise ValueError(f"unknown output_activation: {output_activation!r}")
    return GateSignals(g_raw=g_raw, i=i, o=o)
