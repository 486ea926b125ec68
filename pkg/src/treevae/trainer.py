"""The growing loop: train, select a leaf, attach a subtree, fine-tune, prune."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .config import RunConfig
from .data import AugmentationPolicy, augment_pair
from .inference import infer
from .model import TreeModel, build_model, set_trainable
from .objective import anneal_beta, compute_terms
from .topology import new_root_tree

log = logging.getLogger(__name__)

TERMS = ("rec", "kl_root", "kl_nodes", "kl_decisions", "contrastive_embed", "contrastive_router")


class NoEligibleLeaf(RuntimeError):
    pass


class NumericalFailure(FloatingPointError):
    def __init__(self, phase: str, epoch: int, term: str):
        super().__init__(f"non-finite {term} in phase {phase}, epoch {epoch}")
        self.phase, self.epoch, self.term = phase, epoch, term


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # one dict per epoch
    snapshots: list = field(default_factory=list)  # (event, topology dict)
    occupancy: dict = field(default_factory=dict)  # leaf -> expected fraction

    def extend(self, other: "TrainReport") -> None:
        self.rows += other.rows
        self.snapshots += other.snapshots


# -- data-level helpers ------------------------------------------------------


@torch.no_grad()
def reach_over(m: TreeModel, x: torch.Tensor, nodes: Iterable[int], batch_size: int = 1024) -> dict:
    """Reach probability of each requested node for every sample (deterministic pass)."""
    was = m.training
    m.eval()
    nodes = list(nodes)
    out = {n: [] for n in nodes}
    for i in range(0, x.shape[0], batch_size):
        st = infer(m, x[i:i + batch_size], M=1, deterministic=True)
        for n in nodes:
            out[n].append(torch.as_tensor(st.reach_prob[n]).expand(st.d[0].shape[0]))
    m.train(was)
    return {n: torch.cat(v) for n, v in out.items()}


def expected_occupancy(m: TreeModel, x: torch.Tensor) -> dict:
    reach = reach_over(m, x, m.topology.sorted_leaves)
    return {leaf: float(r.sum()) for leaf, r in reach.items()}


def select_growth_leaf(m: TreeModel, x: torch.Tensor, exclude: Iterable[int] = ()) -> int:
    """Eligible leaf with the largest expected sample count; ties go to the smaller id."""
    topo = m.topology
    exclude = set(exclude)
    eligible = [l for l in topo.sorted_leaves if topo.depth[l] < topo.max_depth and l not in exclude]
    if not eligible:
        raise NoEligibleLeaf("every leaf is at maximum depth or marked ineligible")
    counts = expected_occupancy(m, x)
    return max(eligible, key=lambda l: (counts[l], -l))


def filter_subset(reach: torch.Tensor, t: float) -> np.ndarray:
    """Indices (ascending) of samples whose reach probability exceeds ``t``."""
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return np.flatnonzero(reach.detach().cpu().numpy() > t)


def prune_empty(m: TreeModel, x: torch.Tensor, prune_threshold: float, seed: int = 0) -> list[int]:
    """Repeatedly remove the emptiest leaf while its expected share is below the threshold.

    The last two leaves are never removed. Returns the pruned leaves in order.
    """
    pruned = []
    while len(m.topology.leaves) > 2:
        occ = expected_occupancy(m, x)
        total = sum(occ.values())
        leaf = min(occ, key=lambda l: (occ[l], l))
        if occ[leaf] / total >= prune_threshold:
            break
        m.prune(leaf, seed + len(pruned))
        pruned.append(leaf)
    return pruned


# -- training ----------------------------------------------------------------


def _trainable_scope(m: TreeModel, scope: Optional[list]) -> None:
    if scope is None:
        set_trainable(m, m.topology.nodes, include_shared=True, flag=True)
        return
    set_trainable(m, m.topology.nodes, include_shared=True, flag=False)
    parent = scope[0]
    set_trainable(m, scope[1:], include_shared=False, flag=True)
    for bank in (m.routers_q, m.routers_p):
        for p in bank[str(parent)].parameters():
            p.requires_grad_(True)


def train_phase(m: TreeModel, x: torch.Tensor, epochs: int, cfg: RunConfig, *, scope: Optional[list] = None,
                anneal_rate: float = 0.001, gen: Optional[torch.Generator] = None, phase: str = "train",
                aug_rng: Optional[np.random.Generator] = None,
                on_epoch: Optional[Callable[[dict], None]] = None) -> TrainReport:
    """Mini-batch training of the scoped parameters.

    ``scope`` is ``None`` for the full tree or ``[parent, left, right]`` for a
    freshly grown subtree: then only the parent's routers and the children's
    functions are updated and only their loss terms are assembled.
    """
    report = TrainReport()
    if epochs <= 0:
        return report
    sched = cfg.schedule
    gen = gen or torch.Generator().manual_seed(cfg.seed)
    contrastive = cfg.contrastive if cfg.contrastive.enabled else None
    policy = AugmentationPolicy.preset(cfg.contrastive.augment) if contrastive else None
    _trainable_scope(m, scope)
    params = [p for p in m.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=sched.lr, weight_decay=sched.weight_decay)
    n = x.shape[0]
    bs = min(sched.batch_size, n)
    for epoch in range(epochs):
        beta = anneal_beta(epoch, anneal_rate)
        m.apply_modes(True)
        perm = torch.randperm(n, generator=gen)
        sums = dict.fromkeys(TERMS + ("total",), 0.0)
        seen = 0
        for i in range(0, n, bs):
            idx = perm[i:i + bs]
            if len(idx) < 2:
                continue  # batch norm needs two rows
            xb = x[idx]
            if contrastive:
                a, b = augment_pair(xb, policy, aug_rng)
                xb = torch.cat([a, b])
            terms, _ = compute_terms(m, xb, M=sched.mc_samples, rng=gen, beta=beta, scope=scope,
                                     contrastive=contrastive)
            loss = terms.total
            if not torch.isfinite(loss):
                for name in TERMS:
                    if not math.isfinite(float(torch.as_tensor(getattr(terms, name)).detach())):
                        raise NumericalFailure(phase, epoch, name)
                raise NumericalFailure(phase, epoch, "total")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            k = len(idx)
            for name in TERMS:
                sums[name] += k * float(torch.as_tensor(getattr(terms, name)).detach())
            sums["total"] += k * float(loss.detach())
            seen += k
        row = {"phase": phase, "epoch": epoch, "beta": beta, "n_leaves": len(m.topology.leaves)}
        row.update({k: v / max(seen, 1) for k, v in sums.items()})
        row["elbo"] = -(row["rec"] + row["kl_root"] + row["kl_nodes"] + row["kl_decisions"])
        report.rows.append(row)
        if on_epoch:
            on_epoch(row)
    set_trainable(m, m.topology.nodes, include_shared=True, flag=True)
    m.eval()
    return report


def run_growing_loop(cfg: RunConfig, x: torch.Tensor, on_epoch: Optional[Callable[[dict], None]] = None,
                     ) -> tuple[TreeModel, TrainReport]:
    """Grow a tree on ``x`` following ``cfg.schedule``."""
    sched = cfg.schedule
    gen = torch.Generator().manual_seed(cfg.seed)
    aug_rng = np.random.default_rng(cfg.seed)
    m = build_model(new_root_tree(cfg.arch.max_depth), cfg.arch, seed=cfg.seed)
    if cfg.arch.dtype == "float64":
        x = x.double()
    report = TrainReport()
    report.snapshots.append(("init", m.topology.to_dict()))

    def phase(data, epochs, name, scope=None, rate=sched.anneal_rate):
        log.info("phase %s: %d epochs on %d samples, %d leaves", name, epochs, data.shape[0],
                 len(m.topology.leaves))
        report.extend(train_phase(m, data, epochs, cfg, scope=scope, anneal_rate=rate, gen=gen,
                                  phase=name, aug_rng=aug_rng, on_epoch=on_epoch))

    phase(x, sched.n_t, "root")
    step, attempts, skipped, retried = 0, 0, set(), set()
    while len(m.topology.leaves) < sched.max_leaves:
        try:
            leaf = select_growth_leaf(m, x, exclude=skipped)
        except NoEligibleLeaf:
            break
        subset = filter_subset(reach_over(m, x, [leaf])[leaf], sched.subset_threshold)
        if len(subset) < 2:
            skipped.add(leaf)
            continue
        attempts += 1
        m.grow(leaf, seed=cfg.seed * 1009 + attempts)
        report.snapshots.append((f"grow {leaf}", m.topology.to_dict()))
        left, right = m.topology.children[leaf]
        phase(x[torch.from_numpy(subset)], sched.n_t, f"grow-{leaf}", scope=[leaf, left, right])

        # a split that left one child empty is undone now, so the leaf budget goes to real clusters;
        # the region gets one more attempt with a fresh initialization
        occ = expected_occupancy(m, x)
        total = sum(occ.values())
        empty = [c for c in (left, right) if occ[c] / total < sched.prune_threshold]
        if empty:
            child = min(empty, key=lambda c: (occ[c], c))
            survivor = right if child == left else left
            m.prune(child, seed=cfg.seed * 7919 + attempts)
            report.snapshots.append((f"prune {child}", m.topology.to_dict()))
            log.info("split of leaf %d left node %d empty; undone", leaf, child)
            (skipped if leaf in retried else retried).add(survivor)
            continue
        step += 1
        more = len(m.topology.leaves) < sched.max_leaves
        if more and not cfg.contrastive.enabled and sched.finetune_every and step % sched.finetune_every == 0:
            phase(x, sched.finetune_epochs, f"finetune-{step}")

    pruned = prune_empty(m, x, sched.prune_threshold, seed=cfg.seed * 7919)
    for leaf in pruned:
        report.snapshots.append((f"prune {leaf}", m.topology.to_dict()))
    if not cfg.contrastive.enabled:
        phase(x, sched.n_f, "final", rate=sched.final_anneal_rate)
    occ = expected_occupancy(m, x)
    total = sum(occ.values())
    report.occupancy = {leaf: v / total for leaf, v in occ.items()}
    return m, report
