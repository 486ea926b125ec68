"""Binary tree structure backing the latent hierarchy.

Topologies are immutable: every structural operation returns a new value.
Node ids come from a monotone counter and are never reused after pruning.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping


class TopologyError(ValueError):
    pass


class NotALeaf(TopologyError):
    pass


class DepthExceeded(TopologyError):
    pass


class CannotPruneRoot(TopologyError):
    pass


DEFAULT_MAX_DEPTH = 6


@dataclass(frozen=True)
class TreeTopology:
    root: int
    children: Mapping[int, tuple[int, int]]
    parent: Mapping[int, int]
    depth: Mapping[int, int]
    max_depth: int = DEFAULT_MAX_DEPTH
    next_id: int = 0
    nodes: frozenset = field(init=False)
    leaves: frozenset = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "children", MappingProxyType(dict(self.children)))
        object.__setattr__(self, "parent", MappingProxyType(dict(self.parent)))
        object.__setattr__(self, "depth", MappingProxyType(dict(self.depth)))
        nodes = frozenset(self.depth)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "leaves", frozenset(n for n in nodes if n not in self.children))
        if self.next_id <= max(nodes):
            object.__setattr__(self, "next_id", max(nodes) + 1)

    # -- queries ---------------------------------------------------------

    @property
    def internal(self) -> list[int]:
        return sorted(self.children)

    @property
    def sorted_leaves(self) -> list[int]:
        return sorted(self.leaves)

    @property
    def height(self) -> int:
        return max(self.depth.values())

    def is_leaf(self, node: int) -> bool:
        return node in self.leaves

    def sibling(self, node: int) -> int:
        left, right = self.children[self.parent[node]]
        return right if node == left else left

    def side(self, node: int) -> int:
        """0 if ``node`` is the left child of its parent, 1 if right."""
        return self.children[self.parent[node]].index(node)

    def ancestors(self, node: int) -> list[int]:
        """Root-first path ending at ``node`` (inclusive)."""
        path = [node]
        while path[-1] in self.parent:
            path.append(self.parent[path[-1]])
        return path[::-1]

    def subtree(self, node: int) -> list[int]:
        out, stack = [], [node]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(self.children.get(n, ()))
        return sorted(out)

    def order(self) -> list[int]:
        """Parents before children: sorted by (depth, id)."""
        return sorted(self.nodes, key=lambda n: (self.depth[n], n))

    def paths(self) -> list[list[int]]:
        """One root-to-leaf decision path per leaf, ordered by leaf id."""
        return [self.ancestors(leaf) for leaf in self.sorted_leaves]

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        roots = [n for n in self.nodes if n not in self.parent]
        if roots != [self.root]:
            raise TopologyError(f"expected single root {self.root}, found {roots}")
        if self.depth[self.root] != 0:
            raise TopologyError("root depth must be 0")
        for node, (left, right) in self.children.items():
            if left == right:
                raise TopologyError(f"node {node} has duplicate children")
            for child in (left, right):
                if self.parent.get(child) != node:
                    raise TopologyError(f"child {child} does not point back to {node}")
                if self.depth[child] != self.depth[node] + 1:
                    raise TopologyError(f"depth of {child} inconsistent with parent {node}")
        for child, par in self.parent.items():
            if child not in self.children.get(par, ()):
                raise TopologyError(f"{child} lists parent {par} which does not own it")
        if self.height > self.max_depth:
            raise TopologyError(f"height {self.height} exceeds max depth {self.max_depth}")
        if len(self.paths()) != len(self.leaves):
            raise TopologyError("path count differs from leaf count")

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "max_depth": self.max_depth,
            "next_id": self.next_id,
            "leaves": self.sorted_leaves,
            "nodes": [
                {
                    "id": n,
                    "depth": self.depth[n],
                    "parent": self.parent.get(n),
                    "children": list(self.children.get(n, [])),
                }
                for n in sorted(self.nodes)
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "TreeTopology":
        children, parent, depth = {}, {}, {}
        for entry in data["nodes"]:
            n = int(entry["id"])
            depth[n] = int(entry["depth"])
            if entry.get("parent") is not None:
                parent[n] = int(entry["parent"])
            if entry.get("children"):
                left, right = entry["children"]
                children[n] = (int(left), int(right))
        topo = cls(
            root=int(data["root"]),
            children=children,
            parent=parent,
            depth=depth,
            max_depth=int(data.get("max_depth", DEFAULT_MAX_DEPTH)),
            next_id=int(data.get("next_id", 0)),
        )
        topo.validate()
        return topo

    @classmethod
    def from_json(cls, text: str) -> "TreeTopology":
        return cls.from_dict(json.loads(text))

    def canonical(self, node: int | None = None):
        """Unordered nested-tuple shape, for isomorphism checks."""
        node = self.root if node is None else node
        if node not in self.children:
            return ()
        return tuple(sorted((self.canonical(c) for c in self.children[node]), key=repr))


def new_root_tree(max_depth: int = DEFAULT_MAX_DEPTH) -> TreeTopology:
    if max_depth < 1:
        raise DepthExceeded("max_depth must be at least 1")
    return TreeTopology(
        root=0,
        children={0: (1, 2)},
        parent={1: 0, 2: 0},
        depth={0: 0, 1: 1, 2: 1},
        max_depth=max_depth,
        next_id=3,
    )


def grow_at(t: TreeTopology, leaf: int) -> TreeTopology:
    if leaf not in t.nodes:
        raise NotALeaf(f"node {leaf} is not in the tree")
    if leaf not in t.leaves:
        raise NotALeaf(f"node {leaf} is internal")
    if t.depth[leaf] + 1 > t.max_depth:
        raise DepthExceeded(f"growing leaf {leaf} at depth {t.depth[leaf]} exceeds {t.max_depth}")
    left, right = t.next_id, t.next_id + 1
    children = dict(t.children)
    children[leaf] = (left, right)
    parent = dict(t.parent)
    parent[left] = parent[right] = leaf
    depth = dict(t.depth)
    depth[left] = depth[right] = t.depth[leaf] + 1
    return TreeTopology(t.root, children, parent, depth, t.max_depth, t.next_id + 2)


def prune(t: TreeTopology, node: int) -> TreeTopology:
    """Remove ``node``'s subtree and promote its sibling into the parent's slot."""
    if node == t.root:
        raise CannotPruneRoot("the root cannot be pruned")
    if node not in t.nodes:
        raise TopologyError(f"node {node} is not in the tree")
    par = t.parent[node]
    sib = t.sibling(node)
    removed = set(t.subtree(node)) | {par}
    children = {n: c for n, c in t.children.items() if n not in removed}
    parent = {n: p for n, p in t.parent.items() if n not in removed}
    depth = {n: d for n, d in t.depth.items() if n not in removed}
    root = t.root
    if par == t.root:
        root = sib
        del parent[sib]
    else:
        grand = t.parent[par]
        left, right = t.children[grand]
        children[grand] = (sib, right) if left == par else (left, sib)
        parent[sib] = grand
    for n in t.subtree(sib):
        depth[n] -= 1
    return TreeTopology(root, children, parent, depth, t.max_depth, t.next_id)


def full_tree(depth: int, max_depth: int | None = None) -> TreeTopology:
    """Complete binary tree of the given depth, grown leaf by leaf in id order."""
    t = new_root_tree(max_depth or max(depth, 1))
    for _ in range(depth - 1):
        for leaf in t.sorted_leaves:
            t = grow_at(t, leaf)
    return t


def grow_sequence(leaves: Iterable[int], max_depth: int = DEFAULT_MAX_DEPTH) -> TreeTopology:
    t = new_root_tree(max_depth)
    for leaf in leaves:
        t = grow_at(t, leaf)
    return t
