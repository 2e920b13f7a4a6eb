import pytest
import torch
from hypothesis import given, strategies as st

from ticketgan.dataaug import (
    AugPolicy,
    apply_policy,
    rand_brightness,
    rand_contrast,
    rand_cutout,
    rand_saturation,
    rand_translation,
)


def _rng(seed=0):
    return torch.Generator().manual_seed(seed)


def test_null_policy_is_identity():
    x = torch.randn(3, 3, 8, 8, dtype=torch.float64)
    null = AugPolicy(translation_ratio=0.0, cutout_ratio=0.0, brightness=0.0, saturation=0.0, contrast=0.0)
    assert null.is_identity
    assert torch.equal(apply_policy(x, null, _rng()), x)
    assert torch.equal(apply_policy(x, AugPolicy.off(), _rng()), x)


def test_cutout_half_on_4x4_zeros_one_2x2_block():
    x = torch.ones(16, 1, 4, 4, dtype=torch.float64)
    out = rand_cutout(x, 0.5, _rng(1))
    for img in out[:, 0]:
        zeros = (img == 0).nonzero()
        assert zeros.shape[0] == 4
        rows, cols = zeros[:, 0], zeros[:, 1]
        assert rows.max() - rows.min() == 1 and cols.max() - cols.min() == 1


def test_translation_moves_content():
    x = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    x[0, 0, 4, 4] = 1.0
    out = rand_translation(x, 0.25, _rng(2))
    assert out.sum() == 1.0
    r, c = (out[0, 0] == 1).nonzero()[0].tolist()
    assert abs(r - 4) <= 2 and abs(c - 4) <= 2


def test_malformed_layout():
    with pytest.raises(ValueError):
        apply_policy(torch.zeros(2, 3, 4), AugPolicy(), _rng())


def test_point_data_passes_through():
    x = torch.randn(5, 2)
    assert torch.equal(apply_policy(x, AugPolicy(), _rng()), x)


def test_unknown_policy_name():
    with pytest.raises(ValueError):
        AugPolicy.from_string("color,rotate")


@given(st.integers(0, 2 ** 31 - 1))
def test_policy_preserves_shape_and_is_seed_deterministic(seed):
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64, generator=_rng(5))
    pol = AugPolicy.from_string("color,translation,cutout")
    a, b = apply_policy(x, pol, _rng(seed)), apply_policy(x, pol, _rng(seed))
    assert a.shape == x.shape and torch.equal(a, b)


TRANSFORMS = {
    "brightness": lambda x, g: rand_brightness(x, 0.5, g),
    "saturation": lambda x, g: rand_saturation(x, 1.0, g),
    "contrast": lambda x, g: rand_contrast(x, 0.5, g),
    "translation": lambda x, g: rand_translation(x, 0.25, g),
    "cutout": lambda x, g: rand_cutout(x, 0.5, g),
    "full_policy": lambda x, g: apply_policy(x, AugPolicy.from_string("color,translation,cutout"), g),
}


@pytest.mark.parametrize("name", sorted(TRANSFORMS))
def test_transform_gradient_matches_finite_differences(name):
    fn = TRANSFORMS[name]
    gen = _rng(11)
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64, generator=gen)
    w = torch.randn(2, 3, 4, 4, dtype=torch.float64, generator=gen)

    def objective(inp):
        # the same draw at every evaluation: the transform is a fixed function of x
        return (w * torch.tanh(fn(inp, _rng(7)))).sum()

    xg = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(objective(xg), [xg])
    h = 1e-6
    num = torch.zeros_like(x)
    for i in range(x.numel()):
        e = torch.zeros_like(x)
        e.view(-1)[i] = h
        num.view(-1)[i] = (objective(x + e) - objective(x - e)) / (2 * h)
    rel = (grad - num).norm() / max(num.norm(), 1e-12)
    assert rel < 1e-4
