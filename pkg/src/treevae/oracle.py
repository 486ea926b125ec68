"""Brute-force reference computations.

Everything here is written without the factorized shortcuts of the training
code: the ELBO is summed path by path with torch.distributions densities,
metrics are computed with explicit pair loops and exact rationals.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import torch
from torch.distributions import Bernoulli, Normal, kl_divergence

from .model import ROUTER_EPS, TreeModel
from .topology import TreeTopology


class TooLarge(ValueError):
    pass


@dataclass
class EnumerationResult:
    leaf_contributions: dict  # leaf -> scalar share of the negative ELBO
    total: torch.Tensor
    rec: torch.Tensor
    kl_root: torch.Tensor
    kl_nodes: torch.Tensor
    kl_decisions: torch.Tensor

    def as_floats(self) -> dict:
        keys = ("total", "rec", "kl_root", "kl_nodes", "kl_decisions")
        return {k: float(getattr(self, k).detach()) for k in keys}


def _merge(hat_mu, hat_s2, p_mu, p_s2):
    # variance-weighted form, algebraically equal to summing precisions
    s2 = hat_s2 * p_s2 / (hat_s2 + p_s2)
    mu = (hat_mu * p_s2 + p_mu * hat_s2) / (hat_s2 + p_s2)
    return mu, s2


def _router(m: TreeModel, bank, node: int, inp: torch.Tensor) -> torch.Tensor:
    if node in m.router_override:
        v = float(m.router_override[node])
        out = torch.full(inp.shape[:-1], v, dtype=inp.dtype)
        return out if v in (0.0, 1.0) else out.clamp(ROUTER_EPS, 1 - ROUTER_EPS)
    return torch.sigmoid(bank[str(node)].body(inp)).squeeze(-1).clamp(ROUTER_EPS, 1 - ROUTER_EPS)


def _log_lik(out: torch.Tensor, x: torch.Tensor, kind: str) -> torch.Tensor:
    x = x.expand_as(out)
    if kind == "bernoulli":
        lp = Bernoulli(logits=out, validate_args=False).log_prob(x)
    else:
        lp = Normal(out, torch.ones_like(out)).log_prob(x)
    return lp.reshape(*out.shape[:2], -1).sum(-1)


def _log_ratio(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """log q - log p, defined as 0 where q = 0 (such branches carry no weight)."""
    safe_q = torch.where(q > 0, q, torch.ones_like(q))
    safe_p = torch.where(q > 0, p, torch.ones_like(p))
    return torch.where(q > 0, torch.log(safe_q) - torch.log(safe_p), torch.zeros_like(q))


def elbo_by_enumeration(m: TreeModel, x: torch.Tensor, noise: dict) -> EnumerationResult:
    """Negative ELBO by explicit summation over every root-to-leaf path.

    ``noise`` maps each node to the standard-normal draws [M, B, h] used by
    the factorized computation, so both see the same latent samples.
    """
    topo = m.topology
    H = m.arch.max_depth
    d = {H: m.encoder(x)}
    for h in reversed(range(H)):
        d[h] = m.ladder[h](d[h + 1])
    M, B = next(iter(noise.values())).shape[:2]

    root = topo.root
    hat_mu, hat_s2 = m.heads[str(root)](d[topo.depth[root]])
    if m.arch.root_merge_prior:
        q0_mu, q0_s2 = _merge(hat_mu, hat_s2, torch.zeros_like(hat_mu), torch.ones_like(hat_s2))
    else:
        q0_mu, q0_s2 = hat_mu, hat_s2
    q0 = Normal(q0_mu, q0_s2.sqrt())
    kl_root_b = kl_divergence(q0, Normal(torch.zeros_like(q0_mu), torch.ones_like(q0_mu))).sum(-1)  # [B]
    z_root = q0_mu + q0_s2.sqrt() * noise[root]  # [M, B, h]

    kind = m.arch.likelihood
    contributions, rec, kl_nodes, kl_dec = {}, 0.0, 0.0, 0.0
    for path in topo.paths():
        leaf = path[-1]
        z = {root: z_root}
        path_prob = torch.ones(B, dtype=x.dtype)
        path_kl = torch.zeros(M, B, dtype=x.dtype)
        path_dec = torch.zeros(M, B, dtype=x.dtype)
        for parent, child in zip(path[:-1], path[1:]):
            right = topo.children[parent][1] == child
            r_q = _router(m, m.routers_q, parent, d[topo.depth[parent]])  # [B]
            r_p = _router(m, m.routers_p, parent, z[parent].reshape(M * B, -1)).view(M, B)
            q_branch = r_q if right else 1 - r_q
            p_branch = r_p if right else 1 - r_p
            path_prob = path_prob * q_branch
            path_dec = path_dec + _log_ratio(q_branch.expand(M, B), p_branch)

            flat = z[parent].reshape(M * B, -1)
            p_mu, p_s2 = (t.view(M, B, -1) for t in m.trans_p[str(child)](flat))
            if m.arch.separate_posterior_transform:
                t_mu, t_s2 = (t.view(M, B, -1) for t in m.trans_q[str(child)](flat))
            else:
                t_mu, t_s2 = p_mu, p_s2
            h_mu, h_s2 = m.heads[str(child)](d[topo.depth[child]])
            q_mu, q_s2 = _merge(h_mu.expand_as(t_mu), h_s2.expand_as(t_s2), t_mu, t_s2)
            path_kl = path_kl + kl_divergence(Normal(q_mu, q_s2.sqrt()), Normal(p_mu, p_s2.sqrt())).sum(-1)
            z[child] = q_mu + q_s2.sqrt() * noise[child]

        out = m.decoders[str(leaf)](z[leaf].reshape(M * B, -1))
        nll = -_log_lik(out.view(M, B, *out.shape[1:]), x.unsqueeze(0), kind)  # [M, B]
        w = path_prob.unsqueeze(0)
        rec = rec + (w * nll).mean()
        kl_nodes = kl_nodes + (w * path_kl).mean()
        kl_dec = kl_dec + (w * path_dec).mean()
        contributions[leaf] = (w * (nll + path_kl + path_dec + kl_root_b.unsqueeze(0))).mean()

    kl_root = kl_root_b.mean()
    total = rec + kl_root + kl_nodes + kl_dec
    return EnumerationResult(contributions, total, rec, kl_root, kl_nodes, kl_dec)


def ladder_elbo(m: TreeModel, x: torch.Tensor, chain: Sequence[int], noise: dict) -> torch.Tensor:
    """Negative ELBO of a sequential ladder VAE along ``chain`` (root first).

    Routing never enters: each step is a plain top-down Gaussian layer.
    """
    H = m.arch.max_depth
    d = [None] * (H + 1)
    d[H] = m.encoder(x)
    for h in range(H - 1, -1, -1):
        d[h] = m.ladder[h](d[h + 1])

    kl = 0.0
    z = None
    for step, node in enumerate(chain):
        mu_hat, var_hat = m.heads[str(node)](d[step])
        if step == 0:
            prior_mu, prior_var = torch.zeros_like(mu_hat), torch.ones_like(var_hat)
            if m.arch.root_merge_prior:
                prec = 1 / var_hat + 1
                var, mu = 1 / prec, (mu_hat / var_hat) / prec
            else:
                mu, var = mu_hat, var_hat
            mu, var = mu.unsqueeze(0), var.unsqueeze(0)
            prior_mu, prior_var = prior_mu.unsqueeze(0), prior_var.unsqueeze(0)
        else:
            M, B = z.shape[:2]
            prior_mu, prior_var = (t.view(M, B, -1) for t in m.trans_p[str(node)](z.reshape(M * B, -1)))
            prec = 1 / var_hat + 1 / prior_var
            var = 1 / prec
            mu = (mu_hat / var_hat + prior_mu / prior_var) * var
        term = 0.5 * (torch.log(prior_var / var) + (var + (mu - prior_mu) ** 2) / prior_var - 1).sum(-1)
        kl = kl + term.mean()
        z = mu + var.sqrt() * noise[node]

    M, B = z.shape[:2]
    logits = m.decoders[str(chain[-1])](z.reshape(M * B, -1))
    target = x.unsqueeze(0).expand(M, *x.shape).reshape(logits.shape)
    if m.arch.likelihood == "bernoulli":
        nll = torch.clamp(logits, min=0) - logits * target + torch.log1p(torch.exp(-logits.abs()))
    else:
        nll = 0.5 * (target - logits) ** 2 + 0.5 * math.log(2 * math.pi)
    rec = nll.reshape(M * B, -1).sum(-1).mean()
    return rec + kl


def finite_difference_grad(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                           step: float = 1e-5) -> list[torch.Tensor]:
    """Central differences, one coordinate at a time."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


# -- metrics ---------------------------------------------------------------


def _lca(topo: TreeTopology, a: int, b: int) -> int:
    common = [n for n in topo.ancestors(a) if n in set(topo.ancestors(b))]
    return common[-1]


def _leaves_under(topo: TreeTopology, node: int) -> set:
    return {n for n in topo.subtree(node) if n in topo.leaves}


def dendrogram_purity_bruteforce(topo: TreeTopology, assignments, labels) -> Fraction:
    n = len(labels)
    total, count = Fraction(0), 0
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] != labels[j]:
                continue
            under = _leaves_under(topo, _lca(topo, assignments[i], assignments[j]))
            members = [labels[k] for k in range(n) if assignments[k] in under]
            total += Fraction(sum(1 for y in members if y == labels[i]), len(members))
            count += 1
    if count == 0:
        raise ValueError("no pair of samples shares a class")
    return total / count


def leaf_purity_bruteforce(assignments, labels) -> Fraction:
    by_leaf: dict = {}
    for a, y in zip(assignments, labels):
        by_leaf.setdefault(a, []).append(y)
    hits = sum(max(Counter(ys).values()) for ys in by_leaf.values())
    return Fraction(hits, len(labels))


def accuracy_bruteforce(assignments, labels) -> Fraction:
    clusters = sorted(set(assignments))
    classes = sorted(set(labels))
    k = max(len(clusters), len(classes))
    best = 0
    for perm in itertools.permutations(range(k)):
        # cluster index c is mapped to class index perm[c]; padded slots match nothing
        hits = 0
        for a, y in zip(assignments, labels):
            target = perm[clusters.index(a)]
            if target < len(classes) and classes[target] == y:
                hits += 1
        best = max(best, hits)
    return Fraction(best, len(labels))


def nmi_bruteforce(assignments, labels) -> float:
    n = len(labels)
    ca, cb = Counter(assignments), Counter(labels)
    if len(ca) == 1 and len(cb) == 1:
        return 1.0
    joint = Counter(zip(assignments, labels))
    mi = 0.0
    for (a, b), nab in joint.items():
        mi += nab / n * math.log(n * nab / (ca[a] * cb[b]))
    ha = -sum(c / n * math.log(c / n) for c in ca.values())
    hb = -sum(c / n * math.log(c / n) for c in cb.values())
    denom = (ha + hb) / 2
    if denom == 0:
        return 0.0
    return max(mi, 0.0) / denom


def metric_bruteforce(topo: TreeTopology, assignments, labels) -> tuple[Fraction, Fraction, Fraction]:
    """(DP, LP, ACC) by exhaustive enumeration; small inputs only."""
    assignments, labels = list(assignments), list(labels)
    if len(labels) > 64:
        raise TooLarge(f"{len(labels)} points exceed the brute-force limit of 64")
    if max(len(set(assignments)), len(set(labels))) > 6:
        raise TooLarge("more than 6 clusters or classes")
    return (
        dendrogram_purity_bruteforce(topo, assignments, labels),
        leaf_purity_bruteforce(assignments, labels),
        accuracy_bruteforce(assignments, labels),
    )
