"""Multi-head attention, shared by the encoder backbone and the decoder
aggregator.

Per-head projections are stored stacked: w_q[(heads, d, d_h)] holds one
d x d_h matrix per head, biases as (heads, 1, d_h). Queries and keys may
carry different leading batch shapes as long as they broadcast (a rank-2
query against a rank-3 key batch is the common case inside the decoder).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Param, Tensor, as_tensor
from .errors import ShapeError, ValidationError
from .ops import add, linear, matmul, reshape, scale, softmax_rows, transpose, transpose_axes


@dataclass
class MHAParams:
    heads: int
    w_q: Param
    b_q: Param
    w_k: Param
    b_k: Param
    w_v: Param
    b_v: Param
    w_o: Param
    b_o: Param

    def params(self) -> list[Param]:
        return [self.w_q, self.b_q, self.w_k, self.b_k,
                self.w_v, self.b_v, self.w_o, self.b_o]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


def init_mha(rng: np.random.Generator, d: int, heads: int,
             trainable: bool = True, name: str = "mha",
             std: float = 0.02) -> MHAParams:
    if d % heads:
        raise ValidationError(f"width {d} not divisible by heads {heads}")
    dh = d // heads

    def w(shape, nm):
        return Param(rng.normal(0.0, std, shape), trainable, f"{name}.{nm}")

    def z(shape, nm):
        return Param(np.zeros(shape), trainable, f"{name}.{nm}")

    return MHAParams(
        heads=heads,
        w_q=w((heads, d, dh), "wq"), b_q=z((heads, 1, dh), "bq"),
        w_k=w((heads, d, dh), "wk"), b_k=z((heads, 1, dh), "bk"),
        w_v=w((heads, d, dh), "wv"), b_v=z((heads, 1, dh), "bv"),
        w_o=w((d, d), "wo"), b_o=z((d,), "bo"),
    )


def _heads_in(x: Tensor, w: Param, b: Param) -> Tensor:
    # (B, n, d) -> (B, heads, n, d_h) via broadcast matmul with (heads, d, d_h)
    bsz, n, d = x.shape
    return add(matmul(reshape(x, (bsz, 1, n, d)), w), b)


def mha(q_in, k_in, v_in, p: MHAParams) -> Tensor:
    """softmax(q k^T / sqrt(d_h)) v per head, heads concatenated, projected by w_o."""
    q, k, v = as_tensor(q_in), as_tensor(k_in), as_tensor(v_in)
    if k.shape != v.shape:
        raise ShapeError(f"key/value shapes differ: {k.shape} vs {v.shape}")
    if q.ndim not in (2, 3) or k.ndim not in (2, 3):
        raise ShapeError(f"mha expects rank 2 or 3 inputs, got {q.shape} and {k.shape}")
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"query width {d} != key width {k.shape[-1]}")
    if d != p.w_q.shape[1]:
        raise ShapeError(f"input width {d} does not match attention params {p.w_q.shape}")
    heads = p.heads
    dh = d // heads

    flat = q.ndim == 2 and k.ndim == 2
    q3 = q if q.ndim == 3 else reshape(q, (1,) + tuple(q.shape))
    k3 = k if k.ndim == 3 else reshape(k, (1,) + tuple(k.shape))
    v3 = v if v.ndim == 3 else reshape(v, (1,) + tuple(v.shape))

    qh = _heads_in(q3, p.w_q, p.b_q)             # (Bq, h, a, d_h)
    kh = _heads_in(k3, p.w_k, p.b_k)             # (Bk, h, b, d_h)
    vh = _heads_in(v3, p.w_v, p.b_v)

    logits = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(dh))
    attn = softmax_rows(logits)                   # (B, h, a, b)
    ctx = matmul(attn, vh)                        # (B, h, a, d_h)

    bsz, _, a, _ = ctx.shape
    merged = reshape(transpose_axes(ctx, (0, 2, 1, 3)), (bsz, a, heads * dh))
    out = linear(merged, p.w_o, p.b_o)
    if flat:
        out = reshape(out, tuple(out.shape[1:]))
    return out
