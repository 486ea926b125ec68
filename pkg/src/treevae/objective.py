"""Training objective: path-weighted reconstruction, factorized KL terms, contrastive terms."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Optional

import torch
import torch.nn.functional as F

from .inference import PosteriorState, infer

LOG_2PI = math.log(2 * math.pi)


class InvalidLikelihood(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


@dataclass
class ElboTerms:
    rec: torch.Tensor
    kl_root: torch.Tensor
    kl_nodes: torch.Tensor
    kl_decisions: torch.Tensor
    contrastive_embed: torch.Tensor | float = 0.0
    contrastive_router: torch.Tensor | float = 0.0
    beta: float = 1.0
    contrastive_weight: float = 0.0

    @property
    def kl(self):
        return self.kl_root + self.kl_nodes + self.kl_decisions

    @property
    def total(self):
        return total_loss(self)

    @property
    def neg_elbo(self):
        return self.rec + self.kl

    def as_floats(self) -> dict:
        out = {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}
        out["total"] = float(torch.as_tensor(self.total).detach())
        return out


def total_loss(terms: ElboTerms):
    if not 0.0 <= terms.beta <= 1.0:
        raise ValueError(f"beta {terms.beta} outside [0, 1]")
    loss = terms.rec + terms.beta * terms.kl
    if terms.contrastive_weight:
        loss = loss + terms.contrastive_weight * (terms.contrastive_embed + terms.contrastive_router)
    return loss


def anneal_beta(epoch: int, rate: float, offset: float = 0.0) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return min(1.0, rate * epoch + offset)


# -- likelihoods -------------------------------------------------------------


def negative_log_likelihood(out: torch.Tensor, x: torch.Tensor, kind: str, data_dims: int) -> torch.Tensor:
    """Per-sample NLL, summed over the trailing ``data_dims`` axes.

    ``out`` holds Bernoulli logits or unit-variance Gaussian means; ``x``
    broadcasts against it.
    """
    x = x.expand_as(out)
    if kind == "bernoulli":
        nll = F.binary_cross_entropy_with_logits(out, x, reduction="none")
    elif kind == "gaussian":
        nll = 0.5 * (x - out) ** 2 + 0.5 * LOG_2PI
    else:
        raise InvalidLikelihood(f"unknown likelihood {kind!r}")
    return nll.flatten(nll.dim() - data_dims).sum(-1)


def decoder_mean(out: torch.Tensor, kind: str) -> torch.Tensor:
    return torch.sigmoid(out) if kind == "bernoulli" else out


def decode_leaves(decoders, state: PosteriorState, leaves: Iterable[int]) -> dict:
    out = {}
    for leaf in leaves:
        z = state.z[leaf]
        M, B = z.shape[:2]
        y = decoders[str(leaf)](z.reshape(M * B, -1))
        out[leaf] = y.view(M, B, *y.shape[1:])
    return out


def reconstruction_term(state: PosteriorState, decoders, x: torch.Tensor, kind: str,
                        leaves: Optional[Iterable[int]] = None, decoded: Optional[dict] = None,
                        reduce: bool = True) -> torch.Tensor:
    if kind not in ("bernoulli", "gaussian"):
        raise InvalidLikelihood(f"unknown likelihood {kind!r}")
    leaves = state.topology.sorted_leaves if leaves is None else list(leaves)
    decoded = decoded if decoded is not None else decode_leaves(decoders, state, leaves)
    total = 0.0
    for leaf in leaves:
        nll = negative_log_likelihood(decoded[leaf], x.unsqueeze(0), kind, x.dim() - 1)  # [M, B]
        total = total + state.reach_prob[leaf] * nll
    return _reduce(total, reduce, x.shape[0], x.dtype)


# -- KL terms ----------------------------------------------------------------


def gaussian_kl(q_mu, q_sigma2, p_mu, p_sigma2) -> torch.Tensor:
    """KL(N(q) || N(p)) for diagonal Gaussians, summed over the last axis."""
    return 0.5 * (torch.log(p_sigma2) - torch.log(q_sigma2)
                  + (q_sigma2 + (q_mu - p_mu) ** 2) / p_sigma2 - 1.0).sum(-1)


def kl_root_term(q_mu0, q_sigma20, reduce: bool = True) -> torch.Tensor:
    kl = 0.5 * (q_sigma20 + q_mu0 ** 2 - 1.0 - torch.log(q_sigma20)).sum(-1)
    return kl.mean() if reduce else kl


def _reduce(total, reduce: bool, batch: int, dtype) -> torch.Tensor:
    """Mean over samples and batch, or per-example values (mean over samples only)."""
    if isinstance(total, float):
        return torch.zeros(() if reduce else (batch,), dtype=dtype)
    return total.mean() if reduce else total.mean(0)


def kl_nodes_term(state: PosteriorState, nodes: Optional[Iterable[int]] = None,
                  reduce: bool = True) -> torch.Tensor:
    topo = state.topology
    nodes = [n for n in (state.nodes if nodes is None else nodes) if n != topo.root]
    total = 0.0
    for n in nodes:
        kl = gaussian_kl(state.q_mu[n], state.q_sigma2[n], state.p_mu[n], state.p_sigma2[n])  # [M, B]
        total = total + state.reach_prob[n] * kl
    return _reduce(total, reduce, state.d[0].shape[0], state.d[0].dtype)


def bernoulli_kl(q, p) -> torch.Tensor:
    """KL(Ber(q) || Ber(p)) with 0 log 0 = 0."""
    return (torch.xlogy(q, q) - torch.xlogy(q, p)
            + torch.xlogy(1 - q, 1 - q) - torch.xlogy(1 - q, 1 - p))


def kl_decisions_term(state: PosteriorState, nodes: Optional[Iterable[int]] = None,
                      reduce: bool = True) -> torch.Tensor:
    topo = state.topology
    nodes = [n for n in (state.nodes if nodes is None else nodes) if n in topo.children]
    total = 0.0
    for n in nodes:
        kl = bernoulli_kl(state.router_q[n].unsqueeze(0), state.router_p[n])  # [M, B]
        total = total + state.reach_prob[n] * kl
    return _reduce(total, reduce, state.d[0].shape[0], state.d[0].dtype)


# -- contrastive -------------------------------------------------------------


def _nt_xent_rows(reps: torch.Tensor, tau: float) -> torch.Tensor:
    n2 = reps.shape[0]
    if n2 % 2 or n2 < 4:
        raise DegenerateBatch(f"need 2N rows with N >= 2, got {n2}")
    n = n2 // 2
    unit = F.normalize(reps, dim=-1)
    sim = unit @ unit.T / tau
    eye = torch.eye(n2, dtype=torch.bool, device=reps.device)
    sim = sim.masked_fill(eye, float("-inf"))
    pos = torch.arange(n2, device=reps.device)
    pos = (pos + n) % n2
    return torch.logsumexp(sim, dim=1) - sim[torch.arange(n2), pos]


def nt_xent(projections: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """Mean NT-Xent over all 2N anchors; row i pairs with row i + N."""
    return _nt_xent_rows(projections, tau).mean()


def router_contrastive(router_q: dict, reach_prob: dict, tau: float = 1.0) -> torch.Tensor:
    """Reach-weighted NT-Xent on router outputs, one term per internal node.

    A probability p is embedded as (p, 1 - p) before cosine similarity.
    """
    total = 0.0
    for node in sorted(router_q):
        p = router_q[node]
        n = p.shape[0] // 2
        losses = _nt_xent_rows(torch.stack([p, 1 - p], dim=-1), tau)
        reach = reach_prob[node]
        w = torch.minimum(reach, torch.roll(reach, n))
        wsum = w.sum()
        if float(wsum) > 0:
            total = total + (w * losses).sum() / wsum
    if isinstance(total, float):
        return torch.zeros(())
    return total


def embed_contrastive(projections, d: list, tau: float = 0.5) -> torch.Tensor:
    depth = len(d) - 1
    total = sum(nt_xent(projections[h](d[h]), tau) for h in range(len(d)))
    return total / max(depth, 1)


# -- assembled forward --------------------------------------------------------


def scoped(state: PosteriorState, scope: Optional[Iterable[int]]) -> list[int]:
    return list(state.nodes) if scope is None else [n for n in state.nodes if n in set(scope)]


def compute_terms(model, x: torch.Tensor, *, M: int = 1, rng=None, noise=None, beta: float = 1.0,
                  scope: Optional[Iterable[int]] = None, contrastive=None,
                  deterministic: bool = False) -> tuple[ElboTerms, PosteriorState]:
    """One shared forward pass producing every loss term.

    With ``scope`` only the terms owned by those nodes are assembled; the
    omitted terms do not depend on parameters of in-scope nodes, so the
    gradients with respect to in-scope parameters are unchanged.
    """
    state = infer(model, x, M=M, rng=rng, noise=noise, nodes=scope, deterministic=deterministic)
    topo = model.topology
    own = scoped(state, scope)
    leaves = [n for n in own if n in topo.leaves]
    rec = reconstruction_term(state, model.decoders, x, model.arch.likelihood, leaves)
    if topo.root in own:
        kl_root = kl_root_term(state.q_mu[topo.root], state.q_sigma2[topo.root])
    else:
        kl_root = torch.zeros((), dtype=x.dtype)
    terms = ElboTerms(rec, kl_root, kl_nodes_term(state, own), kl_decisions_term(state, own), beta=beta)
    if contrastive is not None and contrastive.enabled:
        terms.contrastive_weight = contrastive.weight
        if scope is None:
            terms.contrastive_embed = embed_contrastive(model.projections, state.d, contrastive.tau_embed)
        internal = {n: state.router_q[n] for n in own if n in topo.children}
        terms.contrastive_router = router_contrastive(internal, state.reach_prob, contrastive.tau_router)
    return terms, state


def per_sample_elbo(model, x: torch.Tensor, *, M: int = 1, rng=None, noise=None) -> torch.Tensor:
    """ELBO (not negated) of every example in ``x``, averaged over ``M`` posterior samples."""
    state = infer(model, x, M=M, rng=rng, noise=noise)
    kind = model.arch.likelihood
    rec = reconstruction_term(state, model.decoders, x, kind, reduce=False)
    root = state.topology.root
    kl = (kl_root_term(state.q_mu[root], state.q_sigma2[root], reduce=False)
          + kl_nodes_term(state, reduce=False) + kl_decisions_term(state, reduce=False))
    return -(rec + kl)
