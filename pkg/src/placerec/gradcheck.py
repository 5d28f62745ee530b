"""Central-difference gradient checking.

grad_check runs f once under a tape for the analytic gradients, then
perturbs every trainable scalar by +/-h with the tape off and compares.
The comparison is |analytic - central| / max(1, |central|), so tiny
gradients are judged on absolute error and large ones relatively.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Param, Tape, Tensor
from .errors import NumericalError, ShapeError


@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    checked: int = 0
    max_rel_err: float = 0.0
    seconds: float = 0.0
    tol: float = 0.0
    failures: list[GradCheckEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "pass" if self.ok else f"FAIL ({len(self.failures)} scalars)"
        return (f"gradcheck {status}: {self.checked} scalars, "
                f"max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.0e}, "
                f"{self.seconds:.1f}s")


def _scalar_loss(t: Tensor) -> float:
    if t.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar loss, got shape {tuple(t.data.shape)}")
    v = float(t.data.reshape(()))
    if not np.isfinite(v):
        raise NumericalError("grad_check: loss is not finite")
    return v


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-5,
               fast_eval=None) -> GradCheckReport:
    """Check d f() / d p for every trainable scalar in params.

    f must be deterministic and side-effect free; it is re-evaluated twice
    per scalar with the parameter storage poked in place. fast_eval, when
    given, replaces f for the probe evaluations only: it is called with the
    currently poked Param and must return the same loss as a plain float
    (callers use it to skip recomputing stages the poked param cannot reach).
    """
    params = [p for p in params if isinstance(p, Param) and p.trainable]
    t0 = time.perf_counter()

    for p in params:
        if not p.value.data.flags["C_CONTIGUOUS"]:
            p.value = Tensor(np.ascontiguousarray(p.value.data))
        p.zero_grad()

    with Tape() as tape:
        loss = f()
    _scalar_loss(loss)
    tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    report = GradCheckReport(tol=tol)
    for p in params:
        flat = p.value.data.reshape(-1)
        ga = analytic[id(p)].reshape(-1)
        name = p.name or "<unnamed>"
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            lp = fast_eval(p) if fast_eval is not None else _scalar_loss(f())
            flat[i] = keep - h
            lm = fast_eval(p) if fast_eval is not None else _scalar_loss(f())
            flat[i] = keep
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericalError(f"grad_check: non-finite loss probing {name}[{i}]")
            numeric = (lp - lm) / (2.0 * h)
            rel = abs(ga[i] - numeric) / max(1.0, abs(numeric))
            report.checked += 1
            if rel > report.max_rel_err:
                report.max_rel_err = rel
            if rel > tol:
                report.failures.append(GradCheckEntry(name, i, float(ga[i]), numeric, rel))

    report.seconds = time.perf_counter() - t0
    return report
