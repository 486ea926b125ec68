"""Sampling from the generative model and leaf-wise reconstruction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .inference import infer, path_distribution
from .objective import decode_leaves, decoder_mean


@dataclass
class GenerationResult:
    z: dict  # node -> [n, h]; in conditional mode only rows that reached the node are meaningful
    router_p: dict = field(default_factory=dict)  # internal node -> [n]
    outputs: dict = field(default_factory=dict)  # leaf -> [n, *data] (unconditional)
    samples: Optional[torch.Tensor] = None  # [n, *data] (conditional)
    path: Optional[torch.Tensor] = None  # leaf id per sample (conditional)


def _noise(m, n: int, rng) -> dict:
    # one draw per node in a fixed order, so both sampling modes see the same randomness
    dtype = next(m.parameters()).dtype
    return {node: torch.randn(n, m.arch.latent_dim(m.topology.depth[node]), generator=rng, dtype=dtype)
            for node in m.topology.order()}


def _prior_child(m, node: int, z_parent: torch.Tensor, eps: torch.Tensor, prior_scale: float):
    mu, s2 = m.trans_p[str(node)](z_parent)
    return mu + prior_scale * s2.sqrt() * eps


@torch.no_grad()
def sample_unconditional(m, n: int, rng: Optional[torch.Generator] = None,
                         prior_scale: float = 1.0) -> GenerationResult:
    """Propagate prior samples down every path and decode every leaf.

    ``prior_scale`` multiplies the transformation standard deviations; 0 makes
    all latents deterministic functions of the root sample.
    """
    m.eval()
    topo = m.topology
    eps = _noise(m, n, rng)
    res = GenerationResult(z={topo.root: eps[topo.root]})
    for node in topo.order():
        if node != topo.root:
            res.z[node] = _prior_child(m, node, res.z[topo.parent[node]], eps[node], prior_scale)
        if node in topo.children:
            res.router_p[node] = m.router_prob("p", node, res.z[node])
        else:
            res.outputs[node] = decoder_mean(m.decoders[str(node)](res.z[node]), m.arch.likelihood)
    return res


@torch.no_grad()
def sample_conditional(m, n: int, rng: Optional[torch.Generator] = None,
                       prior_scale: float = 1.0) -> GenerationResult:
    """Follow the most probable generative route; ties at 0.5 go left."""
    m.eval()
    topo = m.topology
    eps = _noise(m, n, rng)
    res = GenerationResult(z={topo.root: eps[topo.root]})
    at = torch.full((n,), topo.root, dtype=torch.long)
    for node in topo.order():
        rows = (at == node).nonzero().squeeze(-1)
        if node != topo.root:
            z = torch.zeros(n, eps[node].shape[-1], dtype=eps[node].dtype)
            if len(rows):
                pa = res.z[topo.parent[node]][rows]
                z[rows] = _prior_child(m, node, pa, eps[node][rows], prior_scale)
            res.z[node] = z
        if node in topo.children and len(rows):
            r = m.router_prob("p", node, res.z[node][rows])
            full = torch.full((n,), float("nan"), dtype=r.dtype)
            full[rows] = r
            res.router_p[node] = full
            left, right = topo.children[node]
            at[rows] = torch.where(r > 0.5, torch.tensor(right), torch.tensor(left))
    samples = None
    for leaf in topo.sorted_leaves:
        rows = (at == leaf).nonzero().squeeze(-1)
        if not len(rows):
            continue
        out = decoder_mean(m.decoders[str(leaf)](res.z[leaf][rows]), m.arch.likelihood)
        if samples is None:
            samples = torch.zeros(n, *out.shape[1:], dtype=out.dtype)
        samples[rows] = out
    res.samples, res.path = samples, at
    return res


@torch.no_grad()
def reconstruct(m, x: torch.Tensor, M: int = 1, rng: Optional[torch.Generator] = None):
    """Per-leaf reconstructions (mean over M draws) and leaf weights P(l) [B, L]."""
    m.eval()
    state = infer(m, x, M=M, rng=rng)
    decoded = decode_leaves(m.decoders, state, m.topology.sorted_leaves)
    recs = {leaf: decoder_mean(out, m.arch.likelihood).mean(0) for leaf, out in decoded.items()}
    return recs, path_distribution(state)
