"""Adam training loop over P-places x K-views batches.

Only adapter and aggregator parameters train; the encoder contributes
cached constant feature stacks, so a step never touches backbone storage.
Each step logs one machine-parsable key=value line.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .config import TrainConfig
from .errors import NumericalError, ValidationError
from .loss import LossConfig, mine_pairs, ms_loss, similarity_matrix
from .model import DescriptorModel, batch_stacks, describe_stack, feature_stack, trainable_params
from .synth import BatchSampler, Manifest, load_image


class Adam:
    """Moment-tracked gradient descent; step() consumes and clears grads."""

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        if not self.params:
            raise ValidationError("optimizer has no trainable params")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.value.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.value.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[id(p)]
            v = self.v[id(p)]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = Tensor(p.value.data - self.lr * upd)
            p.zero_grad()


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Schedule: starting rate decayed every decay_every epochs (0-based)."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


@dataclass
class StepResult:
    step: int
    epoch: int
    lr: float
    loss: float
    kept_pos: int
    kept_neg: int
    skipped: int

    def logline(self) -> str:
        return (f"step={self.step} epoch={self.epoch} lr={self.lr:.6g} "
                f"loss={self.loss:.6f} kept_pos={self.kept_pos} "
                f"kept_neg={self.kept_neg} skipped={self.skipped}")


def train_step(model: DescriptorModel, stacks, place_ids,
               loss_cfg: LossConfig, opt: Adam) -> StepResult:
    """One update: descriptors -> mine -> loss -> backward -> Adam.

    stacks: per-image constant feature stacks (lists of (n, d) arrays).
    A non-finite loss aborts before any parameter moves.
    """
    layers = batch_stacks(stacks)
    tape = Tape()
    with tape:
        desc = describe_stack(model, layers)
        s = similarity_matrix(desc)
        mining = mine_pairs(s, place_ids, loss_cfg.margin)
        loss = ms_loss(s, mining, loss_cfg)
    val = float(loss.data)
    if not np.isfinite(val):
        raise NumericalError(
            f"training loss is not finite ({val}) on places {sorted(set(place_ids))}")
    tape.backward(loss)
    opt.step()
    return StepResult(step=0, epoch=0, lr=opt.lr, loss=val,
                      kept_pos=mining.kept_pos, kept_neg=mining.kept_neg,
                      skipped=len(mining.skipped))


@dataclass
class Trainer:
    """Drives epochs over a synthetic corpus with per-image stack caching."""

    model: DescriptorModel
    manifest: Manifest
    data_dir: str
    loss_cfg: LossConfig
    train_cfg: TrainConfig
    log: object = print
    _cache: dict = field(default_factory=dict)

    def stack_for(self, image_id: str):
        # frozen encoder: per-image features are constant across steps
        got = self._cache.get(image_id)
        if got is None:
            img = load_image(self.data_dir, image_id)
            got = [t.data for t in feature_stack(self.model, img)]
            self._cache[image_id] = got
        return got

    def run(self) -> list:
        cfg = self.train_cfg
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        sampler = BatchSampler(self.manifest, cfg.p, cfg.k, rng)
        opt = Adam(trainable_params(self.model), lr=cfg.lr)
        history = []
        step = 0
        for epoch in range(cfg.epochs):
            opt.lr = lr_at(cfg, epoch)
            for ids, pids in sampler.epoch():
                res = train_step(self.model, [self.stack_for(i) for i in ids],
                                 pids, self.loss_cfg, opt)
                step += 1
                res.step, res.epoch = step, epoch + 1
                history.append(res)
                if self.log is not None:
                    self.log(res.logline())
        return history


def epoch_mean_loss(history, epoch: int) -> float:
    vals = [r.loss for r in history if r.epoch == epoch]
    if not vals:
        raise ValidationError(f"no recorded steps for epoch {epoch}")
    return float(np.mean(vals))
