"""Per-label conjunction lattice: node algebra and active-set bookkeeping.

Each label owns a lattice of 2**n_inputs conjunction nodes ordered by
subset inclusion of their member sets; the lattice itself is never
materialized.  Nodes are (label, members-bitmask) pairs.  The empty
conjunction (root, always true) is a member of every label's lattice and
acts as that label's bias feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .features import members_of


class ConjunctionNode(NamedTuple):
    label: int
    members: int  # bitmask over input indices

    @property
    def depth(self) -> int:
        return int(self.members).bit_count()

    def member_tuple(self) -> tuple[int, ...]:
        return members_of(self.members)


def eval_node(node: ConjunctionNode, x_p) -> int:
    """1 iff every member bit of x_p is on; the empty conjunction is 1."""
    n = len(x_p)
    mask = node.members
    k = 0
    while mask:
        if mask & 1:
            if k >= n:
                raise ValueError(f"member index {k} out of range for {n} inputs")
            if not x_p[k]:
                return 0
        mask >>= 1
        k += 1
    return 1


def submasks(mask: int) -> Iterable[int]:
    """All subsets of a bitmask, including 0 and the mask itself."""
    sub = mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


def ancestors(node: ConjunctionNode) -> set[ConjunctionNode]:
    """All subsets of the member set (same label), node included."""
    return {ConjunctionNode(node.label, m) for m in submasks(node.members)}


def prior_weight(node_or_depth, beta: float) -> float:
    """Depth prior d_v = beta ** |v|."""
    depth = node_or_depth.depth if isinstance(node_or_depth, ConjunctionNode) \
        else int(node_or_depth)
    return float(beta) ** depth


@dataclass
class Lattice:
    """Shape parameters of the (virtual) per-label conjunction lattice."""

    n_inputs: int
    n_labels: int
    d_base: float = 2.0

    def __post_init__(self):
        if self.d_base <= 0:
            raise ValueError("d_base must be positive")

    def d(self, node: ConjunctionNode) -> float:
        return prior_weight(node, self.d_base)

    def roots(self) -> list[ConjunctionNode]:
        return [ConjunctionNode(c, 0) for c in range(self.n_labels)]


@dataclass
class ActiveSet:
    """The materialized, ancestor-closed node set the solver works over."""

    n_inputs: int
    n_labels: int
    nodes: set[ConjunctionNode] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node: ConjunctionNode) -> bool:
        return node in self.nodes

    def sorted_nodes(self) -> list[ConjunctionNode]:
        return sorted(self.nodes, key=lambda v: (v.label, v.depth, v.members))

    def add(self, node: ConjunctionNode) -> None:
        """Add a node together with its ancestors, keeping hull(W) = W."""
        self.nodes |= ancestors(node)

    def check_closed(self) -> None:
        for v in self.nodes:
            m = v.members
            while m:
                bit = m & -m
                if ConjunctionNode(v.label, v.members & ~bit) not in self.nodes:
                    raise ValueError(f"active set is not ancestor-closed at {v}")
                m &= ~bit


def descendants_restricted(node: ConjunctionNode, W: ActiveSet) -> set[ConjunctionNode]:
    """D(node) within W: supersets of node.members present in W, same label."""
    if node not in W:
        raise ValueError(f"{node} is not in the active set")
    return {w for w in W.nodes
            if w.label == node.label and (w.members & node.members) == node.members}


def sources_of_complement(W: ActiveSet) -> set[ConjunctionNode]:
    """Minimal nodes outside W: every strict ancestor lies inside W.

    Candidates are one-bit extensions of W's nodes (root included when a
    label has nothing yet); because W is ancestor-closed it is enough to
    check the immediate parents of each candidate.
    """
    W.check_closed()
    by_label: dict[int, set[int]] = {c: set() for c in range(W.n_labels)}
    for v in W.nodes:
        by_label[v.label].add(v.members)
    out: set[ConjunctionNode] = set()
    for label in range(W.n_labels):
        masks = by_label[label]
        bases = masks if masks else {0}
        cands = set()
        for m in bases:
            for k in range(W.n_inputs):
                bit = 1 << k
                if not m & bit:
                    cands.add(m | bit)
        if not masks:
            cands.add(0)
        for cand in cands:
            if cand in masks:
                continue
            ok = True
            m = cand
            while m:
                bit = m & -m
                if (cand & ~bit) not in masks:
                    ok = False
                    break
                m &= ~bit
            if ok:
                out.add(ConjunctionNode(label, cand))
    return out
