import random

import pytest
import torch
from hypothesis import given, strategies as st

from conftest import random_topology, tiny_model
from treevae.inference import (
    NonPositiveVariance, ShapeMismatch, bottom_up, draw_noise, hard_assignment, infer, path_distribution,
    precision_merge, reach_probabilities, _sample,
)
from treevae.topology import full_tree, grow_at, new_root_tree


def t64(*v):
    return torch.tensor(v, dtype=torch.float64)


def test_precision_merge_examples():
    mu, s2 = precision_merge(t64(0.0), t64(1.0), t64(2.0), t64(1.0))
    assert mu.item() == pytest.approx(1.0) and s2.item() == pytest.approx(0.5)
    mu, s2 = precision_merge(t64(1.0), t64(0.5), t64(3.0), t64(2.0))
    assert s2.item() == pytest.approx(0.4) and mu.item() == pytest.approx(1.4)
    mu, s2 = precision_merge(t64(5.0), t64(1e12), t64(-2.0), t64(3.0))
    assert mu.item() == pytest.approx(-2.0, rel=1e-6) and s2.item() == pytest.approx(3.0, rel=1e-6)


def test_precision_merge_rejects_nonpositive():
    with pytest.raises(NonPositiveVariance):
        precision_merge(t64(0.0), t64(0.0), t64(0.0), t64(1.0))


@given(st.floats(-5, 5), st.floats(0.01, 10), st.floats(-5, 5), st.floats(0.01, 10))
def test_precision_merge_symmetric(a, va, b, vb):
    m1, s1 = precision_merge(t64(a), t64(va), t64(b), t64(vb))
    m2, s2 = precision_merge(t64(b), t64(vb), t64(a), t64(va))
    assert torch.allclose(m1, m2, rtol=1e-12, atol=1e-12) and torch.allclose(s1, s2, rtol=1e-12)


def test_reach_examples():
    r = reach_probabilities(new_root_tree(), {0: 0.3})
    assert r == {0: 1.0, 1: pytest.approx(0.7), 2: pytest.approx(0.3)}
    full = full_tree(2)
    r = reach_probabilities(full, {n: 0.5 for n in full.internal})
    assert [r[l] for l in full.sorted_leaves] == [0.25] * 4


def test_path_distribution_product_rule():
    m = tiny_model(full_tree(2, 3))
    left, right = m.topology.children[0]
    m.router_override = {0: 0.2, left: 0.6, right: 0.9}
    st_ = infer(m, torch.randn(3, 16, dtype=torch.float64))
    dist = path_distribution(st_)
    assert torch.allclose(dist[0], t64(0.32, 0.48, 0.02, 0.18), atol=1e-15)


def test_one_hot_routers_give_one_hot_leaves():
    m = tiny_model(full_tree(2, 3))
    left, right = m.topology.children[0]
    m.router_override = {0: 1.0, left: 0.0, right: 0.0}
    dist = path_distribution(infer(m, torch.randn(2, 16, dtype=torch.float64)))
    assert dist.tolist() == [[0.0, 0.0, 1.0, 0.0]] * 2
    assert hard_assignment(infer(m, torch.randn(2, 16, dtype=torch.float64))).tolist() == [m.topology.sorted_leaves[2]] * 2


def test_hard_assignment_ties_go_to_smaller_leaf():
    m = tiny_model()
    m.router_override = {0: 0.5}
    assert hard_assignment(infer(m, torch.randn(4, 16, dtype=torch.float64))).tolist() == [1] * 4


@given(st.integers(0, 10_000))
def test_reach_decomposition_and_normalization(seed):
    rng = random.Random(seed)
    t = random_topology(rng, max_depth=4, max_grows=8)
    g = torch.Generator().manual_seed(seed)
    routers = {n: torch.rand(5, generator=g, dtype=torch.float64) for n in t.internal}
    reach = reach_probabilities(t, routers)
    total = sum(reach[l] for l in t.leaves)
    assert torch.allclose(total, torch.ones(5, dtype=torch.float64), atol=1e-12)
    for n, (l, r) in t.children.items():
        assert (reach[l] + reach[r] - reach[n]).abs().max() <= 1e-12
    for path in t.paths():
        prod = torch.ones(5, dtype=torch.float64)
        for parent, child in zip(path[:-1], path[1:]):
            p = routers[parent]
            prod = prod * (p if t.children[parent][1] == child else 1 - p)
        assert torch.equal(prod, reach[path[-1]])


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        infer(tiny_model(), torch.randn(3, 15, dtype=torch.float64))


def test_heads_at_same_depth_read_same_representation():
    m = tiny_model(full_tree(2, 3))
    seen = {}

    def hook(name):
        def f(mod, inp, out):
            seen[name] = inp[0]
        return f

    for n in m.topology.nodes:
        m.heads[str(n)].register_forward_hook(hook(n))
    bottom_up(m, torch.randn(4, 16, dtype=torch.float64))
    a, b = m.topology.children[0]
    assert seen[a] is seen[b]
    assert torch.equal(seen[m.topology.children[a][0]], seen[m.topology.children[b][1]])


def test_batch_independence_in_eval_mode():
    m = tiny_model(grow_at(new_root_tree(3), 1))
    m.eval()
    x = torch.randn(32, 16, dtype=torch.float64)
    full = infer(m, x, deterministic=True)
    one = infer(m, x[7:8], deterministic=True)
    for n in m.topology.nodes:
        # BLAS kernels differ with batch size, so agreement is to rounding
        assert torch.allclose(full.z[n][:, 7:8], one.z[n], rtol=1e-12, atol=1e-12)


def test_shapes_and_positivity(gen):
    m = tiny_model(grow_at(new_root_tree(3), 2), latent_dims=[2, 3, 4, 4])
    st_ = infer(m, torch.randn(6, 16, dtype=torch.float64), M=3, rng=gen)
    assert st_.q_mu[0].shape == (6, 2)
    assert st_.z[0].shape == (3, 6, 2) and st_.z[3].shape == (3, 6, 4)
    assert st_.router_q[0].shape == (6,) and st_.router_p[0].shape == (3, 6)
    assert torch.equal(st_.reach_prob[0], torch.ones(6, dtype=torch.float64))
    assert all((v > 0).all() for v in st_.hat_sigma2.values())


def test_root_posterior_merges_with_unit_prior():
    m = tiny_model()
    bu = bottom_up(m, torch.randn(4, 16, dtype=torch.float64))
    st_ = infer(m, torch.randn(4, 16, dtype=torch.float64))
    assert st_.q_mu[0].shape == bu.hat_mu[0].shape
    mu, s2 = precision_merge(t64(2.0), t64(1.0), t64(0.0), t64(1.0))
    assert (mu.item(), s2.item()) == (1.0, 0.5)


def test_root_merge_switch():
    m = tiny_model(root_merge_prior=False)
    x = torch.randn(4, 16, dtype=torch.float64)
    bu = bottom_up(m, x)
    st_ = infer(m, x)
    assert torch.equal(st_.q_mu[0], bu.hat_mu[0]) and torch.equal(st_.q_sigma2[0], bu.hat_sigma2[0])


def test_deterministic_mode_returns_mean():
    m = tiny_model(grow_at(new_root_tree(3), 1))
    st_ = infer(m, torch.randn(4, 16, dtype=torch.float64), M=2, deterministic=True)
    for n in st_.nodes:
        assert torch.equal(st_.z[n], st_.q_mu[n].expand_as(st_.z[n]))


def test_reparameterization_gradient():
    mu = t64(0.3, -1.2).requires_grad_()
    s2 = t64(0.5, 2.0).requires_grad_()
    eps = t64(0.7, -0.4)
    z = _sample(mu, s2, eps, deterministic=False)
    g_mu, g_s2 = torch.autograd.grad(z.sum(), [mu, s2])
    assert torch.equal(g_mu, torch.ones(2, dtype=torch.float64))
    # dz/dsigma = eps, so dz/dsigma^2 = eps / (2 sigma)
    assert torch.allclose(g_s2, eps / (2 * s2.detach().sqrt()), rtol=1e-12)


def test_infer_uses_supplied_noise():
    m = tiny_model()
    m.eval()
    x = torch.randn(1, 16, dtype=torch.float64)
    noise = draw_noise(m, 1, 1, torch.Generator().manual_seed(0), dtype=torch.float64)
    st_ = infer(m, x, noise=noise)
    for n in st_.nodes:
        expect = st_.q_mu[n] + st_.q_sigma2[n].sqrt() * noise[n]
        assert torch.allclose(st_.z[n], expect, rtol=1e-14, atol=1e-14)
