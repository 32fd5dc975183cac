import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dmsn.alignment import (
    GrlGate,
    HighLevelDiscriminator,
    LowLevelDiscriminator,
    domain_accuracy,
    domain_posterior,
    domain_predictions,
    grl_apply,
    high_level_domain_loss,
    low_level_source_loss,
    low_level_target_loss,
    low_level_total_loss,
)
from dmsn.detector import LowExtractor, init_uniform_fan_in
from dmsn.exceptions import PreconditionError
from dmsn.structures import FeatureMap


def central_diff(f, x, eps=1e-6):
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + eps
        hi = float(f(x))
        flat[i] = old - eps
        lo = float(f(x))
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-3):
    scale = numeric.abs().max().clamp_min(1e-8)
    assert float((analytic - numeric).abs().max() / scale) < rtol


# -- gradient reversal ---------------------------------------------------


def test_grl_forward_is_identity():
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(grl_apply(GrlGate(1.0), x), x)
    fm = grl_apply(GrlGate(0.3), FeatureMap(x, 4))
    assert torch.equal(fm.activations, x) and fm.stride == 4


def test_grl_sum_gives_minus_one():
    x = torch.randn(5, requires_grad=True)
    grl_apply(GrlGate(1.0), x).sum().backward()
    assert torch.equal(x.grad, -torch.ones(5))


@pytest.mark.oracle
def test_grl_half_scale_matches_finite_difference():
    x = torch.randn(6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(6, dtype=torch.float64)

    def f(v):
        return (torch.tanh(v) * w).sum() + (v**2).sum()

    f(grl_apply(GrlGate(0.5), x)).backward()
    assert_grad_close(x.grad, -0.5 * central_diff(f, x))


def test_grl_scale_must_be_positive():
    with pytest.raises(PreconditionError):
        GrlGate(0.0)


# -- low level ----------------------------------------------------------------


@pytest.mark.oracle
def test_low_source_loss_values():
    perfect = torch.tensor([1.0, 0.0, 0.0]).view(3, 1, 1)
    assert float(low_level_source_loss(perfect, 0)) == 0.0
    half = torch.full((3, 1, 1), 0.5, dtype=torch.float64)
    assert float(low_level_source_loss(half, 0)) == 0.75


def test_low_source_loss_spatial_permutation_invariant():
    d = torch.rand(2, 3, 4, 5, generator=torch.Generator().manual_seed(1))
    perm = torch.randperm(20, generator=torch.Generator().manual_seed(2))
    shuffled = d.flatten(2)[:, :, perm].view(2, 3, 4, 5)
    assert float(low_level_source_loss(d, 1)) == pytest.approx(float(low_level_source_loss(shuffled, 1)), rel=1e-6)


def test_low_loss_rejects_unsquashed_and_bad_index():
    with pytest.raises(PreconditionError):
        low_level_source_loss(torch.full((3, 1, 1), 1.5), 0)
    with pytest.raises(PreconditionError):
        low_level_target_loss(torch.full((3, 1, 1), -0.1))
    with pytest.raises(PreconditionError):
        low_level_source_loss(torch.full((3, 1, 1), 0.5), 2)


@pytest.mark.oracle
def test_low_target_loss_values():
    assert float(low_level_target_loss(torch.ones(3, 1, 1))) == 0.0
    assert float(low_level_target_loss(torch.full((3, 1, 1), 0.5))) == 0.25
    d = torch.zeros(3, 2, 2)
    d[2] = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    assert float(low_level_target_loss(d)) == 0.5


def test_low_total_loss():
    assert float(low_level_total_loss([torch.tensor(0.0)], torch.tensor(0.0))) == 0.0
    total = low_level_total_loss([torch.tensor(0.1, dtype=torch.float64), torch.tensor(0.2, dtype=torch.float64)], 0.3)
    assert float(total) == pytest.approx(0.6, rel=1e-12)


@pytest.mark.oracle
def test_low_total_matches_numpy_recomputation():
    g = np.random.default_rng(4)
    maps = [g.uniform(size=(2, 3, 4, 4)) for _ in range(3)]
    got = low_level_total_loss(
        [low_level_source_loss(torch.from_numpy(maps[i]), i) for i in range(2)],
        low_level_target_loss(torch.from_numpy(maps[2])),
    )
    expected = 0.0
    for i in range(2):
        m = maps[i]
        per_loc = sum(((1 - m[:, k]) ** 2 if k == i else m[:, k] ** 2) for k in range(3))
        expected += per_loc.mean()
    expected += ((1 - maps[2][:, 2]) ** 2).mean()
    assert float(got) == pytest.approx(expected, rel=1e-12)


@pytest.mark.oracle
def test_low_losses_match_finite_difference():
    d = torch.rand(2, 3, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(3)) * 0.8 + 0.1
    for f in (lambda v: low_level_source_loss(v, 1), low_level_target_loss):
        x = d.clone().requires_grad_(True)
        f(x).backward()
        assert_grad_close(x.grad, central_diff(f, d))


# -- high level -----------------------------------------------------------------


@pytest.mark.oracle
def test_focal_hand_values():
    assert float(high_level_domain_loss([0.9], [], 0.0)) == pytest.approx(-math.log(0.9), rel=1e-9)
    assert float(high_level_domain_loss([0.9], [], 0.0)) == pytest.approx(0.10536, abs=1e-5)
    v = float(high_level_domain_loss([0.9], [], 5.0))
    assert v == pytest.approx(-(0.1**5) * math.log(0.9), rel=1e-9)
    assert v == pytest.approx(1.054e-6, rel=1e-3)


@pytest.mark.oracle
def test_focal_gamma_zero_is_bce():
    g = np.random.default_rng(5)
    for _ in range(5):
        ds, dt = g.uniform(0.01, 0.99, 7), g.uniform(0.01, 0.99, 4)
        oracle = -np.mean(np.log(ds)) - np.mean(np.log(1 - dt))
        got = float(high_level_domain_loss(torch.from_numpy(ds), torch.from_numpy(dt), 0.0))
        assert got == pytest.approx(oracle, rel=1e-6)


def test_focal_monotone_in_gamma():
    for d in np.linspace(0.1, 0.9, 9):
        values = [float(high_level_domain_loss([d], [], g)) for g in (0, 1, 2, 5)]
        assert all(b <= a for a, b in zip(values, values[1:]))


def test_focal_clamps_extremes():
    v = high_level_domain_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]), 2.0)
    assert torch.isfinite(v)
    with pytest.raises(PreconditionError):
        high_level_domain_loss([0.5], [], -1.0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.001, 0.999), min_size=0, max_size=6),
    st.lists(st.floats(0.001, 0.999), min_size=0, max_size=6),
    st.floats(0, 6),
)
def test_focal_non_negative(ds, dt, gamma):
    assert float(high_level_domain_loss(ds, dt, gamma)) >= 0.0


@pytest.mark.oracle
def test_focal_matches_finite_difference():
    ds = torch.tensor([0.2, 0.7, 0.9], dtype=torch.float64)
    dt = torch.tensor([0.3, 0.6], dtype=torch.float64)
    for gamma in (0.0, 2.0, 5.0):
        x = ds.clone().requires_grad_(True)
        y = dt.clone().requires_grad_(True)
        high_level_domain_loss(x, y, gamma).backward()
        assert_grad_close(x.grad, central_diff(lambda v: high_level_domain_loss(v, dt, gamma), ds))
        assert_grad_close(y.grad, central_diff(lambda v: high_level_domain_loss(ds, v, gamma), dt))


# -- discriminators -------------------------------------------------------------


def test_discriminator_shapes():
    d = LowLevelDiscriminator(32, 3)
    with torch.no_grad():
        out = d(torch.randn(2, 32, 16, 16))
    assert out.shape == (2, 3, 16, 16)
    assert float(out.min()) > 0 and float(out.max()) < 1
    h = HighLevelDiscriminator(64)
    p = h(torch.randn(4, 64, 8, 8))
    assert p.shape == (4,)


def test_posterior_and_predictions():
    d = torch.tensor([0.8, 0.2, 0.3]).view(1, 3, 1, 1)
    post = domain_posterior(d)
    assert post.sum().item() == pytest.approx(1.0)
    assert post.view(-1).tolist() == pytest.approx([0.7 * 0.8, 0.7 * 0.2, 0.3])
    assert int(domain_predictions(d, "posterior")) == 0
    d2 = torch.tensor([0.1, 0.2, 0.4]).view(1, 3, 1, 1)
    assert int(domain_predictions(d2, "argmax")) == 2
    assert int(domain_predictions(d2, "posterior")) == 1
    assert domain_accuracy(d2, 2, "argmax") == 1.0
    with pytest.raises(PreconditionError):
        domain_predictions(d2, "vote")


def test_adversarial_gradient_signs():
    torch.manual_seed(0)
    g1 = LowExtractor().double()
    d = LowLevelDiscriminator(32, 3).double()
    x = torch.rand(3, 3, 16, 16, dtype=torch.float64)

    def loss(gate):
        m = d(grl_apply(gate, g1(x)) if gate else g1(x))
        return low_level_total_loss(
            [low_level_source_loss(m[0:1], 0), low_level_source_loss(m[1:2], 1)], low_level_target_loss(m[2:3])
        )

    def grads(gate):
        g1.zero_grad()
        d.zero_grad()
        loss(gate).backward()
        return [p.grad.clone() for p in g1.parameters()], [p.grad.clone() for p in d.parameters()]

    g_rev, d_rev = grads(GrlGate(1.0))
    g_plain, d_plain = grads(None)
    # the discriminator sees the ordinary gradient, the extractor its negation
    for a, b in zip(d_rev, d_plain):
        assert torch.allclose(a, b)
    for a, b in zip(g_rev, g_plain):
        assert torch.allclose(a, -b)

    # a small step along the reversed gradients lowers L for D and raises it for G1
    lr = 1e-3
    base = loss(None).item()
    with torch.no_grad():
        for p, g in zip(d.parameters(), d_rev):
            p -= lr * g
    after_d = loss(None).item()
    assert after_d < base
    with torch.no_grad():
        for p, g in zip(g1.parameters(), g_rev):
            p -= lr * g
    assert loss(None).item() > after_d


def test_discriminator_alone_learns_separable_features():
    gen = torch.Generator().manual_seed(0)
    centers = torch.rand(3, 32, generator=gen) * 2

    def feats(domain, n):
        noise = 0.3 * torch.randn(n, 32, 4, 4, generator=gen)
        return torch.relu(centers[domain][None, :, None, None] + noise)

    d = LowLevelDiscriminator(32, 3)
    init_uniform_fan_in(d, torch.Generator().manual_seed(1), heads=d.output_layers)
    opt = torch.optim.SGD(d.parameters(), lr=0.01, momentum=0.9)
    for _ in range(500):
        maps = [d(feats(k, 4)) for k in range(3)]
        loss = low_level_total_loss(
            [low_level_source_loss(maps[0], 0), low_level_source_loss(maps[1], 1)], low_level_target_loss(maps[2])
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        accs = [domain_accuracy(d(feats(k, 16)), k, rule="argmax") for k in range(3)]
    assert min(accs) > 0.95, accs
