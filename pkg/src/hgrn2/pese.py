"""Parameter-efficient state expansion (PESE) projections.

Each variant lifts a width-d input row to an (n x d) block — n expanded
copies of the feature space — at a different parameter budget:

    naive   full d -> n*d map                      n * d^2
    lr      low-rank factorization, rank r         d * r * (n + 1)
    glt     n group-linear maps (d/n -> d each)    d^2
    glti    glt followed by an n x n group mix     d^2 + n^2
    krp     n elementwise scaling rows             n * d
    kp      one d x d map scaled per copy          d^2 + n

The expanded streams feed the elementwise recurrence over n*d flattened
channels; outputs collapse back to width d by summing over the n axis.
Projections carry no biases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .recurrence import hgrn1_scan
from .tensor import (
    Tensor, concatenate, index_select, matmul, mul, reduce_sum, reshape,
    transpose,
)

VARIANTS = ("naive", "lr", "glt", "glti", "krp", "kp")


@dataclass
class PeseProjection:
    variant: str
    d: int
    n: int
    r: int | None = None
    weights: dict = field(default_factory=dict)

    def tensors(self) -> dict:
        return self.weights


def default_rank(d: int, n: int) -> int:
    """Rank keeping the low-rank variant at roughly d^2 parameters."""
    return max(1, round(d / (n + 1)))


def init_pese(rng: np.random.Generator, variant: str, d: int, n: int,
              r: int | None = None, std: float = 0.02) -> PeseProjection:
    if variant not in VARIANTS:
        raise ValueError(f"unknown pese variant {variant!r}, expected one of {VARIANTS}")
    if n < 1:
        raise ValueError(f"pese expansion ratio must be >= 1, got {n}")

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    weights = {}
    if variant == "naive":
        weights["w"] = w(d, n * d)
    elif variant == "lr":
        r = default_rank(d, n) if r is None else r
        weights["w1"] = w(d, r)
        weights["w2"] = w(r, n * d)
    elif variant in ("glt", "glti"):
        if d % n:
            raise ValueError(f"glt requires n to divide d, got d={d}, n={n}")
        weights["w"] = w(n, d // n, d)
        if variant == "glti":
            weights["mix"] = w(n, n)
    elif variant == "krp":
        weights["w"] = w(n, d)
    elif variant == "kp":
        weights["w"] = w(d, d)
        weights["c"] = Tensor(rng.normal(0.0, 1.0, size=n), requires_grad=True)
    return PeseProjection(variant=variant, d=d, n=n, r=r, weights=weights)


def count_parameters(p: PeseProjection) -> int:
    """Total scalar parameters, by direct enumeration of the weight tensors."""
    return sum(t.size for t in p.weights.values())


def pese_project(x: Tensor, p: PeseProjection) -> Tensor:
    """Expand rows x [N, d] to [N, n, d] according to the variant."""
    n_rows, d = x.shape
    if d != p.d:
        raise ValueError(f"pese_project: input width {d} != projection width {p.d}")
    n = p.n
    if p.variant == "naive":
        return reshape(matmul(x, p.weights["w"]), (n_rows, n, d))
    if p.variant == "lr":
        return reshape(matmul(matmul(x, p.weights["w1"]), p.weights["w2"]),
                       (n_rows, n, d))
    if p.variant in ("glt", "glti"):
        e = d // n
        groups = []
        for g in range(n):
            x_g = index_select(x, 1, np.arange(g * e, (g + 1) * e))
            w_g = reshape(index_select(p.weights["w"], 0, [g]), (e, d))
            groups.append(reshape(matmul(x_g, w_g), (n_rows, 1, d)))
        out = groups[0] if n == 1 else concatenate(groups, axis=1)
        if p.variant == "glti":
            z = reshape(transpose(out, (1, 0, 2)), (n, n_rows * d))
            mixed = matmul(p.weights["mix"], z)
            out = transpose(reshape(mixed, (n, n_rows, d)), (1, 0, 2))
        return out
    if p.variant == "krp":
        copies = [reshape(mul(x, index_select(p.weights["w"], 0, [k])),
                          (n_rows, 1, d)) for k in range(n)]
        return copies[0] if n == 1 else concatenate(copies, axis=1)
    if p.variant == "kp":
        y = matmul(x, p.weights["w"])
        c = p.weights["c"]
        copies = [reshape(mul(y, reshape(index_select(c, 0, [k]), (1, 1))),
                          (n_rows, 1, d)) for k in range(n)]
        return copies[0] if n == 1 else concatenate(copies, axis=1)
    raise ValueError(f"unknown pese variant {p.variant!r}")


def pese_recurrence(f: Tensor, i: Tensor, o: Tensor, h0: Tensor):
    """Elementwise recurrence over the expanded space, collapsed by summation.

    Args:
        f, i, o: [N, n, d] expanded gate streams (f already lower-bounded,
            with the bound broadcast across the n axis).
        h0: [n, d] initial expanded state.
    Returns:
        (y, h_n): y [N, d] = sum over n of the gated outputs; h_n [n, d].
    """
    n_rows, n, d = f.shape
    flat = (n_rows, n * d)
    y_x, h_n = hgrn1_scan(reshape(f, flat), reshape(i, flat), reshape(o, flat),
                          reshape(h0, (n * d,)))
    y = reduce_sum(reshape(y_x, (n_rows, n, d)), axis=1)
    return y, reshape(h_n, (n, d))
