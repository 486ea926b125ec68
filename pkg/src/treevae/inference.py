"""Bottom-up deterministic pass and top-down stochastic pass of the posterior."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import torch

from .model import TreeModel
from .topology import TreeTopology


class ShapeMismatch(ValueError):
    pass


class NonPositiveVariance(ValueError):
    pass


@dataclass
class BottomUp:
    d: list  # index = depth; d[max_depth] is the encoder output
    hat_mu: dict
    hat_sigma2: dict


@dataclass
class PosteriorState:
    topology: TreeTopology
    d: list
    hat_mu: dict
    hat_sigma2: dict
    q_mu: dict = field(default_factory=dict)  # root [B, h]; others [M, B, h]
    q_sigma2: dict = field(default_factory=dict)
    p_mu: dict = field(default_factory=dict)  # non-root [M, B, h]
    p_sigma2: dict = field(default_factory=dict)
    z: dict = field(default_factory=dict)  # [M, B, h]
    router_q: dict = field(default_factory=dict)  # internal [B]
    router_p: dict = field(default_factory=dict)  # internal [M, B]
    reach_prob: dict = field(default_factory=dict)  # [B]
    nodes: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return next(iter(self.z.values())).shape[0]


def _check_input(m: TreeModel, x: torch.Tensor) -> None:
    if tuple(x.shape[1:]) != m.input_shape:
        raise ShapeMismatch(f"input shape {tuple(x.shape[1:])} does not match model input {m.input_shape}")


def bottom_up(m: TreeModel, x: torch.Tensor, nodes: Optional[Iterable[int]] = None) -> BottomUp:
    _check_input(m, x)
    H = m.arch.max_depth
    d = [None] * (H + 1)
    d[H] = m.encoder(x)
    for h in reversed(range(H)):
        d[h] = m.ladder[h](d[h + 1])
    hat_mu, hat_sigma2 = {}, {}
    topo = m.topology
    for n in sorted(topo.nodes if nodes is None else nodes):
        hat_mu[n], hat_sigma2[n] = m.heads[str(n)](d[topo.depth[n]])
    return BottomUp(d, hat_mu, hat_sigma2)


def precision_merge(hat_mu, hat_sigma2, p_mu, p_sigma2):
    """Combine a likelihood contribution with a Gaussian prior by summing precisions."""
    hat_sigma2 = torch.as_tensor(hat_sigma2)
    p_sigma2 = torch.as_tensor(p_sigma2)
    if (hat_sigma2 <= 0).any() or (p_sigma2 <= 0).any():
        raise NonPositiveVariance("variances must be strictly positive")
    hat_prec = 1.0 / hat_sigma2
    p_prec = 1.0 / p_sigma2
    q_sigma2 = 1.0 / (hat_prec + p_prec)
    q_mu = (hat_mu * hat_prec + p_mu * p_prec) * q_sigma2
    return q_mu, q_sigma2


def reach_probabilities(topology: TreeTopology, routers: dict, nodes: Optional[Iterable[int]] = None) -> dict:
    """Probability of reaching each node: running product of branch probabilities.

    ``routers`` maps internal nodes to the probability of taking the right child.
    """
    keep = None if nodes is None else set(nodes)
    some = next(iter(routers.values())) if routers else None
    reach = {topology.root: torch.ones_like(torch.as_tensor(some)) if some is not None else 1.0}
    for node in topology.order():
        if node == topology.root or (keep is not None and node not in keep):
            continue
        pa = topology.parent[node]
        r = routers[pa]
        reach[node] = reach[pa] * (r if topology.side(node) == 1 else 1.0 - r)
    return reach


def draw_noise(m: TreeModel, batch: int, M: int, rng: Optional[torch.Generator] = None,
               nodes: Optional[Iterable[int]] = None, dtype=None) -> dict:
    dtype = dtype or next(m.parameters()).dtype
    topo = m.topology
    out = {}
    for n in topo.order():
        if nodes is not None and n not in nodes:
            continue
        h = m.arch.latent_dim(topo.depth[n])
        out[n] = torch.randn(M, batch, h, generator=rng, dtype=dtype)
    return out


def needed_nodes(topology: TreeTopology, scope: Iterable[int]) -> list[int]:
    """Ancestor closure of ``scope``."""
    out = set()
    for n in scope:
        out.update(topology.ancestors(n))
    return sorted(out)


def top_down_posterior(m: TreeModel, bu: BottomUp, M: int = 1, rng: Optional[torch.Generator] = None,
                       noise: Optional[dict] = None, nodes: Optional[Iterable[int]] = None,
                       deterministic: bool = False) -> PosteriorState:
    """Sample the tree posterior for every node (soft routing).

    ``noise`` supplies the standard-normal draws per node ([M, B, h]); when
    absent they are drawn from ``rng``. ``deterministic`` sets z to the
    posterior mean.
    """
    topo = m.topology
    keep = None if nodes is None else set(nodes)
    order = [n for n in topo.order() if keep is None or n in keep]
    batch = bu.d[0].shape[0]
    if noise is None:
        noise = draw_noise(m, batch, M, rng, order, bu.d[0].dtype)
    M = next(iter(noise.values())).shape[0]
    st = PosteriorState(topo, bu.d, bu.hat_mu, bu.hat_sigma2, nodes=order)

    root = topo.root
    if m.arch.root_merge_prior:
        one = torch.ones_like(bu.hat_sigma2[root])
        st.q_mu[root], st.q_sigma2[root] = precision_merge(bu.hat_mu[root], bu.hat_sigma2[root], 0.0 * one, one)
    else:
        st.q_mu[root], st.q_sigma2[root] = bu.hat_mu[root], bu.hat_sigma2[root]
    st.z[root] = _sample(st.q_mu[root].expand(M, -1, -1), st.q_sigma2[root].expand(M, -1, -1),
                         noise[root], deterministic)

    for n in order:
        if n != root:
            pa = topo.parent[n]
            z_pa = st.z[pa].reshape(M * batch, -1)
            p_mu, p_s2 = m.trans_p[str(n)](z_pa)
            if m.arch.separate_posterior_transform:
                t_mu, t_s2 = m.trans_q[str(n)](z_pa)
            else:
                t_mu, t_s2 = p_mu, p_s2
            st.p_mu[n] = p_mu.view(M, batch, -1)
            st.p_sigma2[n] = p_s2.view(M, batch, -1)
            st.q_mu[n], st.q_sigma2[n] = precision_merge(
                bu.hat_mu[n].unsqueeze(0), bu.hat_sigma2[n].unsqueeze(0),
                t_mu.view(M, batch, -1), t_s2.view(M, batch, -1),
            )
            st.z[n] = _sample(st.q_mu[n], st.q_sigma2[n], noise[n], deterministic)
        if n in topo.children:
            st.router_q[n] = m.router_prob("q", n, bu.d[topo.depth[n]])
            st.router_p[n] = m.router_prob("p", n, st.z[n].reshape(M * batch, -1)).view(M, batch)

    st.reach_prob = reach_probabilities(topo, st.router_q, order)
    return st


def _sample(mu, sigma2, eps, deterministic):
    if deterministic:
        return mu
    return mu + sigma2.sqrt() * eps


def infer(m: TreeModel, x: torch.Tensor, M: int = 1, rng=None, noise=None, nodes=None,
          deterministic: bool = False) -> PosteriorState:
    need = None if nodes is None else needed_nodes(m.topology, nodes)
    return top_down_posterior(m, bottom_up(m, x, need), M, rng, noise, need, deterministic)


def path_distribution(state: PosteriorState) -> torch.Tensor:
    """Per-leaf probabilities [B, |leaves|], columns ordered by leaf id."""
    leaves = state.topology.sorted_leaves
    return torch.stack([torch.as_tensor(state.reach_prob[l]) for l in leaves], dim=-1)


def hard_assignment(state: PosteriorState) -> torch.Tensor:
    """Leaf id maximizing the reach probability; ties go to the smaller id."""
    leaves = torch.tensor(state.topology.sorted_leaves)
    return leaves[path_distribution(state).argmax(dim=-1)]
