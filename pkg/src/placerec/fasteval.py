"""Plain-array pipeline forward for finite-difference probes.

The full-pipeline gradient check re-evaluates the loss ~150k times on a
single core, which a taped graph cannot afford. This module mirrors the
exact op formulas (same epsilons, reduction axes, normalizations) on raw
ndarrays, with two structural shortcuts:

- per-head attention projections are pre-merged into single (d, d) matrices
  (the softmax scale folded into the query side), so projections are one
  BLAS call each;
- the forward is staged as y -> F -> o_0 .. o_L -> loss, and a probe for a
  parameter recomputes only from the stage that parameter feeds, reusing
  cached base-point values upstream (the poke cannot reach them).

pipeline_gradcheck cross-checks this path against the op-built loss at the
base point before trusting it; any drift between the two implementations
fails loudly there or as a blown finite-difference residual.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from .autodiff import Tensor
from .errors import ValidationError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def _gelu(x):
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def _ln(x, g, b, eps=1e-6):
    d = x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) * (1.0 / d)
    xm = x - mu
    inv = 1.0 / np.sqrt(np.square(xm).sum(axis=-1, keepdims=True) * (1.0 / d) + eps)
    return (xm * inv) * g + b


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _heads_split(y, heads):
    # (..., n, h*dh) -> (..., h, n, dh)
    n, hdh = y.shape[-2], y.shape[-1]
    y = y.reshape(y.shape[:-1] + (heads, hdh // heads))
    if y.ndim == 3:
        return y.transpose(1, 0, 2)
    return y.transpose(0, 2, 1, 3)


class _FastMHA:
    def __init__(self, p):
        self.p = p
        self.heads = p.heads
        d = p.w_q.value.data.shape[1]
        self.qscale = 1.0 / np.sqrt(d // p.heads)
        self.merged = {id(w): self._merge_for(w) for w in (p.w_q, p.w_k, p.w_v)}

    def _merge_for(self, w_param):
        # (heads, d, d_h) -> (d, heads*d_h); query side carries the 1/sqrt(d_h)
        h, d, dh = w_param.value.data.shape
        m = np.ascontiguousarray(w_param.value.data.transpose(1, 0, 2)).reshape(d, h * dh)
        return m * self.qscale if w_param is self.p.w_q else m

    def __call__(self, q, kv):
        p, h = self.p, self.heads
        qf = q.reshape(-1, q.shape[-1])
        qh = _heads_split((qf @ self.merged[id(p.w_q)]).reshape(q.shape),
                          h) + p.b_q.value.data * self.qscale
        kvf = kv.reshape(-1, kv.shape[-1])
        kh = _heads_split((kvf @ self.merged[id(p.w_k)]).reshape(kv.shape),
                          h) + p.b_k.value.data
        vh = _heads_split((kvf @ self.merged[id(p.w_v)]).reshape(kv.shape),
                          h) + p.b_v.value.data
        ctx = _softmax(qh @ kh.swapaxes(-1, -2)) @ vh        # (..., h, n, dh)
        if ctx.ndim == 3:
            out = ctx.transpose(1, 0, 2)
        else:
            out = ctx.transpose(0, 2, 1, 3)
        out = out.reshape(out.shape[:-2] + (-1,))
        return out @ p.w_o.value.data + p.b_o.value.data


class FastPipeline:
    """Adapters + aggregator + loss on fixed feature-stack arrays with a
    fixed mined pair selection; probe(param) evaluates the loss with that
    parameter poked in place."""

    def __init__(self, model, layers, mining, loss_cfg):
        self.model = model
        self.layers = [l.data if isinstance(l, Tensor) else np.asarray(l, dtype=np.float64)
                       for l in layers]
        if self.layers[0].ndim != 3:
            raise ValidationError("FastPipeline expects batched (B, n, d) feature stacks")
        self.batch = self.layers[0].shape[0]
        self.scale = model.run_cfg.lopa.scale
        self.cfg = loss_cfg

        agg = model.aggregator
        self.attn = {}
        self._merged_owner = {}
        for blk in agg.blocks:
            for ap in (blk.self_attn, blk.cross_attn):
                fm = _FastMHA(ap)
                self.attn[id(ap)] = fm
                for w in (ap.w_q, ap.w_k, ap.w_v):
                    self._merged_owner[id(w)] = fm
        self._dirty = None
        self._dirty_ref = None

        # stage s of a param: recompute from that stage on, reuse cache above.
        # 0 = adapters, 1 = input projection, 2+i = decoder block i, last = head
        self.n_blocks = len(agg.blocks)
        self.stage_of = {}
        for fn in model.adapters:
            for p in fn.params():
                self.stage_of[id(p)] = 0
        for p in (agg.w1, agg.b1):
            self.stage_of[id(p)] = 1
        self.stage_of[id(agg.queries)] = 2
        for i, blk in enumerate(agg.blocks):
            for p in blk.params():
                self.stage_of[id(p)] = 2 + i
        for p in (agg.w2, agg.b2, agg.w3, agg.b3):
            self.stage_of[id(p)] = 2 + self.n_blocks

        self._pack_mining(mining)
        # base-point caches: y, F, and o after each block
        self.base_y = self.adapted()
        self.base_f = self.f_tokens(self.base_y)
        self.base_o = []
        o = agg.queries.value.data
        for i in range(self.n_blocks):
            o = self.block(i, o, self.base_f)
            self.base_o.append(o)

    def _pack_mining(self, mining):
        b = len(mining.pos)
        lp = max(1, max((len(x) for x in mining.pos), default=1))
        ln_ = max(1, max((len(x) for x in mining.neg), default=1))
        self.pos_idx = np.zeros((b, lp), dtype=np.intp)
        self.pos_mask = np.zeros((b, lp))
        self.neg_idx = np.zeros((b, ln_), dtype=np.intp)
        self.neg_mask = np.zeros((b, ln_))
        for q in range(b):
            self.pos_idx[q, :len(mining.pos[q])] = mining.pos[q]
            self.pos_mask[q, :len(mining.pos[q])] = 1.0
            self.neg_idx[q, :len(mining.neg[q])] = mining.neg[q]
            self.neg_mask[q, :len(mining.neg[q])] = 1.0
        self.rows = np.arange(b)[:, None]

    # forward stages -------------------------------------------------------

    def adapted(self):
        s = self.scale
        y = self.layers[0] + self.layers[1]
        for i, f in enumerate(self.model.adapters):
            if i > 0:
                y = y + self.layers[i + 1]
            flat = y.reshape(-1, y.shape[-1])
            y = (_gelu(flat @ f.w_d.value.data) @ f.w_u.value.data).reshape(y.shape) * s + y
        return y

    def f_tokens(self, y):
        agg = self.model.aggregator
        return ((y.reshape(-1, y.shape[-1]) @ agg.w1.value.data).reshape(y.shape)
                + agg.b1.value.data)

    def block(self, i, o_prev, f_tok):
        blk = self.model.aggregator.blocks[i]
        fs = self.attn[id(blk.self_attn)]
        fc = self.attn[id(blk.cross_attn)]
        q = _ln(fs(o_prev, o_prev) + o_prev, blk.ln1_g.value.data, blk.ln1_b.value.data)
        return _ln(fc(q, f_tok) + q, blk.ln2_g.value.data, blk.ln2_b.value.data)

    def head_loss(self, o) -> float:
        agg = self.model.aggregator
        a = o @ agg.w2.value.data + agg.b2.value.data
        c = a.swapaxes(-1, -2) @ agg.w3.value.data + agg.b3.value.data
        dim = agg.cfg.descriptor_dim
        if c.ndim == 2:
            flat = np.broadcast_to(c.reshape(dim), (self.batch, dim))
        else:
            flat = c.reshape(self.batch, dim)
        desc = flat / np.sqrt(np.square(flat).sum(axis=-1, keepdims=True))
        s = desc @ desc.T

        cfg = self.cfg
        tp = np.exp(-cfg.alpha * (s[self.rows, self.pos_idx] - cfg.lam)) * self.pos_mask
        tn = np.exp(cfg.beta * (s[self.rows, self.neg_idx] - cfg.lam)) * self.neg_mask
        per_q = (np.log1p(tp.sum(axis=1)) / cfg.alpha
                 + np.log1p(tn.sum(axis=1)) / cfg.beta)
        return float(per_q.sum() / s.shape[0])

    def full_loss(self) -> float:
        agg = self.model.aggregator
        f_tok = self.f_tokens(self.adapted())
        o = agg.queries.value.data
        for i in range(self.n_blocks):
            o = self.block(i, o, f_tok)
        return self.head_loss(o)

    # probing ---------------------------------------------------------------

    def probe(self, param) -> float:
        """Loss with `param` poked in place, recomputing only what it feeds."""
        pid = id(param)
        if self._dirty is not None and self._dirty != pid:
            # previous poke target was restored by the caller; resync its merge
            prev_fm, prev_w = self._dirty_ref
            prev_fm.merged[self._dirty] = prev_fm._merge_for(prev_w)
            self._dirty = None
        owner = self._merged_owner.get(pid)
        if owner is not None:
            owner.merged[pid] = owner._merge_for(param)
            self._dirty = pid
            self._dirty_ref = (owner, param)

        s = self.stage_of[pid]
        y = self.base_y if s > 0 else self.adapted()
        f_tok = self.base_f if s > 1 else self.f_tokens(y)
        first = max(0, s - 2)
        if s >= 2 and first > 0:
            o = self.base_o[first - 1]
        else:
            o = self.model.aggregator.queries.value.data
        for i in range(first, self.n_blocks):
            o = self.block(i, o, f_tok)
        return self.head_loss(o)
