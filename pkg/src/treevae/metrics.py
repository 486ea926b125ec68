"""Clustering metrics over the learned tree and importance-weighted log-likelihood."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import normalized_mutual_info_score

from .inference import hard_assignment, infer
from .objective import negative_log_likelihood, per_sample_elbo
from .topology import TreeTopology

LOG_2PI = math.log(2 * math.pi)


class NoSameClassPairs(ValueError):
    pass


@dataclass
class ClusteringResult:
    assignments: np.ndarray  # leaf id per sample
    topology: TreeTopology
    labels: np.ndarray


def _contingency(assignments, labels):
    clusters, a_idx = np.unique(np.asarray(assignments), return_inverse=True)
    classes, y_idx = np.unique(np.asarray(labels), return_inverse=True)
    table = np.zeros((len(clusters), len(classes)), dtype=np.int64)
    np.add.at(table, (a_idx, y_idx), 1)
    return clusters, classes, table


def dendrogram_purity(result: ClusteringResult) -> float:
    """Mean over same-class pairs of the class purity under the pair's lowest common ancestor.

    For each node v and class k, the number of same-class pairs whose LCA is v
    is C(n_vk, 2) minus the same count summed over v's children.
    """
    topo = result.topology
    classes, y = np.unique(np.asarray(result.labels), return_inverse=True)
    counts = {}
    assign = np.asarray(result.assignments)
    for node in sorted(topo.nodes, key=lambda n: -topo.depth[n]):
        if node in topo.leaves:
            counts[node] = np.bincount(y[assign == node], minlength=len(classes))
        else:
            l, r = topo.children[node]
            counts[node] = counts[l] + counts[r]

    def pairs(c):
        return c * (c - 1) / 2

    n_pairs = pairs(np.bincount(y, minlength=len(classes)).astype(np.float64)).sum()
    if n_pairs == 0:
        raise NoSameClassPairs("no two samples share a class")
    total = 0.0
    for node, c in counts.items():
        size = c.sum()
        if size == 0:
            continue
        lca_pairs = pairs(c.astype(np.float64))
        if node in topo.children:
            for ch in topo.children[node]:
                lca_pairs = lca_pairs - pairs(counts[ch].astype(np.float64))
        total += float((lca_pairs * c / size).sum())
    return total / n_pairs


def leaf_purity(result: ClusteringResult) -> float:
    _, _, table = _contingency(result.assignments, result.labels)
    return float(table.max(axis=1).sum() / table.sum())


def clustering_accuracy(assignments, labels) -> float:
    _, _, table = _contingency(assignments, labels)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / table.sum())


def nmi(assignments, labels) -> float:
    return float(normalized_mutual_info_score(labels, assignments, average_method="arithmetic"))


# -- likelihood --------------------------------------------------------------


def _log_normal(z, mu, sigma2):
    return -0.5 * (LOG_2PI + torch.log(sigma2) + (z - mu) ** 2 / sigma2).sum(-1)


def _iw_chunk(m, x, K: int, rng) -> torch.Tensor:
    """log w_k for K posterior draws: [K, B]."""
    state = infer(m, x, M=K, rng=rng)
    topo = m.topology
    root = topo.root
    z0 = state.z[root]
    log_pz = _log_normal(z0, torch.zeros_like(z0), torch.ones_like(z0))
    log_qz = _log_normal(z0, state.q_mu[root].unsqueeze(0), state.q_sigma2[root].unsqueeze(0))
    # log p(z_i | z_pa) - log q(z_i | z_pa, x) per node, and log p(c | z) per edge
    node_ratio = {root: log_pz - log_qz}
    for n in state.nodes:
        if n == root:
            continue
        node_ratio[n] = (_log_normal(state.z[n], state.p_mu[n], state.p_sigma2[n])
                         - _log_normal(state.z[n], state.q_mu[n], state.q_sigma2[n]))
    per_leaf = []
    data_dims = x.dim() - 1
    for path in topo.paths():
        leaf = path[-1]
        acc = sum(node_ratio[n] for n in path)
        for parent, child in zip(path[:-1], path[1:]):
            r = state.router_p[parent]
            branch = r if topo.children[parent][1] == child else 1 - r
            acc = acc + torch.log(branch)
        out = m.decoders[str(leaf)](state.z[leaf].reshape(-1, state.z[leaf].shape[-1]))
        out = out.view(K, x.shape[0], *out.shape[1:])
        acc = acc - negative_log_likelihood(out, x.unsqueeze(0), m.arch.likelihood, data_dims)
        per_leaf.append(acc)
    return torch.logsumexp(torch.stack(per_leaf), dim=0)


@torch.no_grad()
def iw_log_likelihood(m, x: torch.Tensor, K: int = 1000, rng: Optional[torch.Generator] = None,
                      chunk: int = 100, per_sample: bool = False):
    """Importance-weighted estimate of log p(x).

    Latents are drawn from the posterior for all nodes; the routing decisions
    are summed out inside each weight, so only the latents are importance sampled.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    parts = []
    done = 0
    while done < K:
        k = min(chunk, K - done)
        parts.append(_iw_chunk(m, x, k, rng))
        done += k
    ll = torch.logsumexp(torch.cat(parts), dim=0) - math.log(K)
    return ll if per_sample else float(ll.mean())


# -- evaluation over a dataset ------------------------------------------------


def _batches(x, batch_size):
    for i in range(0, x.shape[0], batch_size):
        yield x[i:i + batch_size]


@torch.no_grad()
def assign_leaves(m, x: torch.Tensor, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Hard leaf per sample and the soft leaf distribution [N, L] (deterministic pass)."""
    m.eval()
    hard, soft = [], []
    for xb in _batches(x, batch_size):
        state = infer(m, xb, M=1, deterministic=True)
        hard.append(hard_assignment(state).numpy())
        soft.append(torch.stack([state.reach_prob[l] for l in m.topology.sorted_leaves], -1).numpy())
    return np.concatenate(hard), np.concatenate(soft)


@torch.no_grad()
def evaluate(m, x: torch.Tensor, y, *, K: int = 1000, mc_samples: int = 1, seed: int = 0,
             iw_max_points: Optional[int] = None, batch_size: int = 256) -> dict:
    """DP, LP, ACC, NMI, LL, RL and ELBO over a dataset (per-example averages)."""
    m.eval()
    y = np.asarray(y)
    assignments, _ = assign_leaves(m, x, batch_size)
    res = ClusteringResult(assignments, m.topology, y)
    out = {
        "DP": dendrogram_purity(res),
        "LP": leaf_purity(res),
        "ACC": clustering_accuracy(assignments, y),
        "NMI": nmi(assignments, y),
    }
    rng = torch.Generator().manual_seed(seed)
    elbo, rl = [], []
    for xb in _batches(x, batch_size):
        elbo.append(per_sample_elbo(m, xb, M=mc_samples, rng=rng))
        state = infer(m, xb, M=mc_samples, rng=rng)
        rec = 0.0
        for leaf in m.topology.sorted_leaves:
            z = state.z[leaf]
            o = m.decoders[str(leaf)](z.reshape(-1, z.shape[-1])).view(*z.shape[:2], *xb.shape[1:])
            rec = rec + state.reach_prob[leaf] * negative_log_likelihood(
                o, xb.unsqueeze(0), m.arch.likelihood, xb.dim() - 1)
        rl.append(rec.mean(0))
    out["ELBO"] = float(torch.cat(elbo).mean())
    out["RL"] = float(torch.cat(rl).mean())
    if K > 0:
        xs = x if iw_max_points is None else x[:iw_max_points]
        lls = [iw_log_likelihood(m, xb, K, rng, per_sample=True) for xb in _batches(xs, batch_size)]
        out["LL"] = float(torch.cat(lls).mean())
    else:
        out["LL"] = float("nan")
    return out
