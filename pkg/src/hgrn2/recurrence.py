"""Sequential (step-by-step) evaluation of the gated linear recurrences.

Two state shapes:

  elementwise (hgrn1):   h_t = f_t * h_{t-1} + (1 - f_t) * i_t
                         y_t = h_t * o_t                     h_t in R^d

  matrix (hgrn2):        h_t = h_{t-1} Diag(f_t) + i_t (x) (1 - f_t)
                         y_t[m] = sum_j h_t[m][j] o_t[j]     h_t in R^{d_h x d_h}

The input gate is tied to the forget gate as (1 - f).  These loops are the
reference semantics; the chunkwise module reproduces them blockwise.  All
functions build autodiff graphs, so gradients flow through either path.

Shapes follow the convention f, i, o: [N, d] (single sequence).  The batched
variant stacks sequences/heads as [B, H, N, d_h].
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor, add, broadcast_to, concatenate, index_select, matmul, mul,
    outer, reshape, sub, transpose,
)

_ONE = Tensor(1.0)


def _rows(x: Tensor, t: int) -> Tensor:
    return index_select(x, 0, [t])  # [1, d]


def hgrn1_scan(f: Tensor, i: Tensor, o: Tensor, h0: Tensor):
    """Elementwise gated recurrence over one sequence.

    Args:
        f, i, o: [N, d] forget gate in (0,1), input stream, output gate.
        h0: [d] initial state.
    Returns:
        (y, h_n): outputs [N, d] and final state [d].
    """
    n, d = f.shape
    h = reshape(h0, (1, d))
    ys = []
    for t in range(n):
        f_t = _rows(f, t)
        h = add(mul(f_t, h), mul(sub(_ONE, f_t), _rows(i, t)))
        ys.append(mul(h, _rows(o, t)))
    if n == 0:
        return Tensor(np.zeros((0, d))), h0
    return concatenate(ys, axis=0), reshape(h, (d,))


def hgrn2_scan(f: Tensor, i: Tensor, o: Tensor, h0: Tensor):
    """Matrix-state recurrence for a single head.

    Args:
        f, i, o: [N, d_h].
        h0: [d_h, d_h] initial state, indexed [input coord m, gate coord j].
    Returns:
        (y, h_n): outputs [N, d_h] and final state [d_h, d_h].
    """
    n, d_h = f.shape
    h = h0
    ys = []
    for t in range(n):
        f_t = _rows(f, t)  # [1, d_h] scales state columns j
        i_vec = reshape(_rows(i, t), (d_h,))
        k_vec = reshape(sub(_ONE, f_t), (d_h,))
        h = add(mul(h, f_t), outer(i_vec, k_vec))
        y_t = matmul(h, reshape(_rows(o, t), (d_h, 1)))  # contract over j
        ys.append(transpose(y_t))
    if n == 0:
        return Tensor(np.zeros((0, d_h))), h0
    return concatenate(ys, axis=0), h


def multihead_hgrn2(f: Tensor, i: Tensor, o: Tensor, h0: Tensor, heads: int):
    """Run hgrn2_scan independently on H contiguous width-d/H slices.

    Args:
        f, i, o: [N, d] with d divisible by heads.
        h0: [H, d_h, d_h].
    Returns:
        (y, h_n): [N, d] concatenated head outputs and [H, d_h, d_h] states.
    """
    n, d = f.shape
    if d % heads:
        raise ValueError(f"multihead_hgrn2: d={d} not divisible by heads={heads}")
    d_h = d // heads
    ys, hs = [], []
    for k in range(heads):
        cols = np.arange(k * d_h, (k + 1) * d_h)
        h0_k = reshape(index_select(h0, 0, [k]), (d_h, d_h))
        y_k, h_k = hgrn2_scan(
            index_select(f, 1, cols), index_select(i, 1, cols),
            index_select(o, 1, cols), h0_k)
        ys.append(y_k)
        hs.append(reshape(h_k, (1, d_h, d_h)))
    if n == 0:
        return Tensor(np.zeros((0, d))), h0
    return concatenate(ys, axis=1), concatenate(hs, axis=0)


def hgrn2_scan_batched(f: Tensor, i: Tensor, o: Tensor, h0: Tensor):
    """Step-by-step matrix recurrence over stacked sequences.

    Args:
        f, i, o: [B, H, N, d_h].
        h0: [B, H, d_h, d_h].
    Returns:
        (y, h_n): [B, H, N, d_h] and [B, H, d_h, d_h].

    Per-slice results match hgrn2_scan; the loop is over time only, with
    every (batch, head) slice advanced by stacked matmuls.
    """
    b, h_, n, d_h = f.shape
    state = h0
    ys = []
    for t in range(n):
        f_t = index_select(f, 2, [t])                      # [B, H, 1, d_h]
        i_t = index_select(i, 2, [t])
        o_t = index_select(o, 2, [t])
        k_t = sub(_ONE, f_t)
        decay = broadcast_to(f_t, state.shape)             # expand over m axis
        rank1 = matmul(transpose(i_t, (0, 1, 3, 2)), k_t)  # [B, H, d_h, d_h]
        state = add(mul(state, decay), rank1)
        y_t = matmul(state, transpose(o_t, (0, 1, 3, 2)))  # [B, H, d_h, 1]
        ys.append(transpose(y_t, (0, 1, 3, 2)))
    if n == 0:
        return Tensor(np.zeros((b, h_, 0, d_h))), h0
    return concatenate(ys, axis=2), state
