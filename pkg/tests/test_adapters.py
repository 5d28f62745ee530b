"""Parallel low-rank adapters: identity start, ladder sum, memory accounting."""
import numpy as np
import pytest

from placerec.adapters import (
    LoPAConfig,
    adapt_fn,
    adapter_param_count,
    build_adapters,
    lopa_forward,
    memory_report,
    serial_adapter_forward_reference,
)
from placerec.autodiff import Param, Tape, Tensor
from placerec.backbone import ViTConfig, build_backbone, forward_collect
from placerec.errors import ValidationError
from placerec.gradcheck import grad_check
from placerec.ops import sum_all

VIT = ViTConfig(image_size=8, patch_size=4, d=16, depth=2, heads=2, seed=5)
LOPA = LoPAConfig(depth=2, rank=2, seed=9)


def test_zero_up_projection_is_identity(rng):
    fns = build_adapters(LOPA, d=16)
    x = Tensor(rng.normal(size=(5, 16)))
    for f in fns:
        np.testing.assert_allclose(adapt_fn(x, f, 1.0).data, x.data, atol=1e-15)


def test_adapt_scalar_oracle():
    """d=1, r=1, W_d=2, W_u=0.5: h(1) = 1 + 0.5*gelu(2)."""
    from placerec.adapters import AdaptFn

    f = AdaptFn(w_d=Param([[2.0]]), w_u=Param([[0.5]]))
    out = adapt_fn(Tensor([[1.0]]), f, 1.0)
    np.testing.assert_allclose(out.data, [[1.977249868052]], atol=1e-12)


def test_param_count_closed_form():
    fns = build_adapters(LoPAConfig(depth=4, rank=4, seed=9), d=64)
    assert adapter_param_count(fns) == 4 * 2 * 64 * 4


def test_adapters_trainable_and_up_zero():
    fns = build_adapters(LOPA, d=16)
    for f in fns:
        assert f.w_d.trainable and f.w_u.trainable
        assert not f.w_u.value.data.any()
        assert f.w_d.value.data.any()


def test_ladder_sum_at_init_equals_stack_sum(rng):
    """W_u = 0 makes every rung the identity, so y_L = sum of stages."""
    bb = build_backbone(VIT)
    fns = build_adapters(LOPA, d=16)
    stack = forward_collect(Tensor(rng.normal(size=(8, 8, 1))), bb)
    y = lopa_forward(stack, fns, LOPA).data
    expect = sum(z.data for z in stack)
    np.testing.assert_allclose(y, expect, atol=1e-12)


def test_ladder_depth_mismatch_rejected(rng):
    bb = build_backbone(VIT)
    fns = build_adapters(LoPAConfig(depth=3, rank=2, seed=9), d=16)
    stack = forward_collect(Tensor(rng.normal(size=(8, 8, 1))), bb)
    with pytest.raises(ValidationError):
        lopa_forward(stack, fns, LoPAConfig(depth=3, rank=2, seed=9))


def test_gradients_reach_every_adapter(rng):
    bb = build_backbone(VIT)
    fns = build_adapters(LOPA, d=16)
    for f in fns:  # nonzero W_u so the gelu branch carries signal
        f.w_u.value = Tensor(rng.normal(0, 0.1, size=f.w_u.shape))
    stack = forward_collect(Tensor(rng.normal(size=(8, 8, 1))), bb)
    params = [p for f in fns for p in (f.w_d, f.w_u)]
    report = grad_check(lambda: sum_all(lopa_forward(stack, fns, LOPA)), params, tol=1e-5)
    assert report.ok, report.summary()


def test_backbone_interior_stays_off_tape(rng):
    """The whole point: adapters train while the backbone retains nothing."""
    bb = build_backbone(VIT)
    fns = build_adapters(LOPA, d=16)
    img = Tensor(rng.normal(size=(8, 8, 1)))
    with Tape() as tape:
        stack = forward_collect(img, bb, frozen=True)
        loss = sum_all(lopa_forward(stack, fns, LOPA))
    assert tape.retained_bytes("backbone") == 0
    assert tape.retained_bytes() > 0  # adapter ops do retain
    tape.backward(loss)
    assert any(f.w_d.grad.any() or f.w_u.grad.any() for f in fns)


def test_serial_reference_retains_backbone_bytes(rng):
    bb = build_backbone(VIT)
    fns = build_adapters(LOPA, d=16)
    img = Tensor(rng.normal(size=(8, 8, 1)))
    with Tape() as tape:
        serial_adapter_forward_reference(img, bb, fns, LOPA.scale)
    assert tape.retained_bytes("backbone") > 0


def test_memory_report_contrast():
    lopa = memory_report("lopa", VIT, LOPA)
    serial = memory_report("serial", VIT, LOPA)
    assert lopa["backbone_retained_bytes"] == 0
    assert serial["backbone_retained_bytes"] > 0
    assert lopa["trainable_params"] == serial["trainable_params"] == 2 * 2 * 16 * 2
    with pytest.raises(ValidationError):
        memory_report("bogus", VIT, LOPA)
