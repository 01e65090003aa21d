"""Printing orders for the sub-graphs of a skeleton tree.

Three strategies produce a full permutation of the tree's sub-graphs, all
respecting the bottom-up partial order (a sub-graph prints only after every
sub-graph it rests on):

* ``lpt`` finishes each layer before starting the next, hopping to the
  nearest remaining component of the layer — many retractions, maximal
  levelness;
* ``dpt`` follows one branch upward as far as possible before jumping back
  — near-minimal retractions, but the grown branch can block the nozzle;
* ``greedy_sequence`` is the depth-first walk constrained by per-sub-graph
  collision lists: a sub-graph becomes printable only once nothing unprinted
  could collide with it.

Retractions (transitions onto a sub-graph that does not rest on the previous
one) are routed over the inflated bounding box of everything printed so far;
``validate_sequence`` re-checks any order against both the partial order and
the collision lists.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .pathplan import AirRouter, DEFAULT_NOZZLE_LENGTH, SAFE_MARGIN_PAD

logger = logging.getLogger(__name__)

__all__ = [
    "PrintSequence", "SequenceReport", "SequenceViolation", "SequencingError",
    "Transition", "compare_strategies", "dpt", "format_comparison",
    "greedy_sequence", "lpt", "read_sequence", "validate_sequence",
    "write_sequence",
]


class SequencingError(RuntimeError):
    """No printable sub-graph remains although the part is unfinished."""

    def __init__(self, message: str, blocking: dict | None = None):
        super().__init__(message)
        self.blocking = blocking if blocking is not None else {}


@dataclass
class Transition:
    """Nozzle move between two consecutively printed sub-graphs."""
    src: tuple
    dst: tuple
    contiguous: bool            # dst rests directly on src: no retraction
    air_move: np.ndarray | None  # retraction polyline (None when contiguous)
    air_length: float


@dataclass
class PrintSequence:
    strategy: str
    order: list
    transitions: list

    @property
    def n_retractions(self) -> int:
        return sum(1 for t in self.transitions if not t.contiguous)

    @property
    def air_length(self) -> float:
        return float(sum(t.air_length for t in self.transitions))


@dataclass
class SequenceViolation:
    index: int
    key: tuple
    criterion: int              # 1 = partial order, 2 = collision list
    blocking: list
    detail: str


@dataclass
class SequenceReport:
    strategy: str
    n_subgraphs: int
    retractions: int
    air_length: float
    collision_free: bool
    violations: list = field(default_factory=list)
    runtime_s: float = 0.0


# ---------------------------------------------------------------------------
# Shared helpers


def _start_key(tree, k):
    c = tree.node(k).centroid
    return (k[0], tuple(round(float(x), 12) for x in c), k)


def _near_key(tree, k, ref):
    d = float(np.linalg.norm(tree.node(k).centroid - ref))
    return (round(d, 12), k)


def _ingest_pcgs(tree, pcgs):
    """Map each sub-graph to the unprinted owners whose lists name it."""
    owners: dict = {k: [] for k in tree.nodes}
    if pcgs:
        for owner, lst in pcgs.items():
            if owner not in tree.nodes:
                continue
            for k in set(map(tuple, lst)):
                if k in tree.nodes:
                    owners[k].append(owner)
    for k in owners:
        owners[k].sort()
    return owners


def _transitions(order, tree, nozzle_length: float):
    """Route every consecutive pair; retractions go over the safe box."""
    out = []
    if not order:
        return out
    router = AirRouter(nozzle_length + SAFE_MARGIN_PAD)
    router.expand(tree.node(order[0]).positions())
    for src, dst in zip(order, order[1:]):
        dnode = tree.node(dst)
        if dst in tree.upper.get(src, []):
            out.append(Transition(src, dst, True, None, 0.0))
        else:
            snode = tree.node(src)
            router.expand(dnode.positions())
            spos = snode.positions()
            dpos = dnode.positions()
            i = int(np.argmin(np.linalg.norm(spos - dnode.centroid, axis=1)))
            p_from = spos[i]
            o_from = snode.graph.normals[snode.vertex_ids[i]]
            j = int(np.argmin(np.linalg.norm(dpos - p_from, axis=1)))
            p_to = dpos[j]
            o_to = dnode.graph.normals[dnode.vertex_ids[j]]
            poly, length = router.route(p_from, o_from, p_to, o_to)
            out.append(Transition(src, dst, False, poly, length))
        router.expand(dnode.positions())
    return out


def _nozzle_length(cone) -> float:
    return float(cone.length) if cone is not None else DEFAULT_NOZZLE_LENGTH


# ---------------------------------------------------------------------------
# Strategies


def lpt(tree, cone=None) -> PrintSequence:
    """Layer-priority traversal: finish every layer before the next."""
    order = []
    cur = None
    for layer in sorted({k[0] for k in tree.nodes}):
        remaining = set(tree.layer_keys(layer))
        while remaining:
            if cur is None:
                nxt = min(remaining, key=lambda k: _start_key(tree, k))
            else:
                ref = tree.node(cur).centroid
                nxt = min(remaining, key=lambda k: _near_key(tree, k, ref))
            order.append(nxt)
            remaining.discard(nxt)
            cur = nxt
    return PrintSequence("lpt", order,
                         _transitions(order, tree, _nozzle_length(cone)))


def _branch_walk(tree, pcgs, strategy: str, cone=None) -> PrintSequence:
    """Depth-first bottom-up walk; collision lists gate candidacy."""
    owners = _ingest_pcgs(tree, pcgs)
    lower_left = {k: len(tree.lower.get(k, [])) for k in tree.nodes}
    block_left = {k: len(owners[k]) for k in tree.nodes}
    printed: set = set()
    candidates = {k for k in tree.nodes
                  if lower_left[k] == 0 and block_left[k] == 0}
    order = []
    cur = None

    def ready(k):
        return (k not in printed and lower_left[k] == 0
                and block_left[k] == 0)

    while len(order) < len(tree.nodes):
        if not candidates:
            blocking = {}
            for k in tree.nodes:
                if k in printed or lower_left[k]:
                    continue
                blockers = sorted(o for o in owners[k] if o not in printed)
                if blockers:
                    blocking[k] = blockers
            raise SequencingError(
                "sequencing deadlock: every remaining printable sub-graph "
                f"is inside an unprinted collision list ({len(blocking)} "
                "blocked)", blocking=blocking)
        if cur is None:
            nxt = min(candidates, key=lambda k: _start_key(tree, k))
        else:
            ups = [k for k in tree.upper.get(cur, []) if k in candidates]
            pool = ups if ups else candidates
            ref = tree.node(cur).centroid
            nxt = min(pool, key=lambda k: _near_key(tree, k, ref))
        order.append(nxt)
        printed.add(nxt)
        candidates.discard(nxt)
        for u in tree.upper.get(nxt, []):
            lower_left[u] -= 1
            if ready(u):
                candidates.add(u)
        if pcgs:
            for k in set(map(tuple, pcgs.get(nxt, []))):
                if k in block_left:
                    block_left[k] -= 1
                    if ready(k):
                        candidates.add(k)
        cur = nxt
    return PrintSequence(strategy, order,
                         _transitions(order, tree, _nozzle_length(cone)))


def dpt(tree, cone=None) -> PrintSequence:
    """Depth-priority traversal: chase each branch to its tip first."""
    return _branch_walk(tree, {}, "dpt", cone)


def greedy_sequence(tree, pcgs, cone=None) -> PrintSequence:
    """Depth-priority walk gated by the collision lists."""
    return _branch_walk(tree, pcgs, "greedy", cone)


# ---------------------------------------------------------------------------
# Validation


def validate_sequence(sequence, tree, pcgs=None, cone=None) -> SequenceReport:
    """Check a printing order against both sequencing rules.

    Rule 1: a sub-graph prints only after everything it rests on.
    Rule 2: a sub-graph prints only when no unprinted sub-graph's collision
    list names it.  Violations are collected, never raised; a non-permutation
    order raises ValueError.
    """
    t0 = time.perf_counter()
    order = list(getattr(sequence, "order", sequence))
    keys = set(tree.nodes)
    if len(order) != len(keys) or set(order) != keys:
        dup = sorted({k for k in order if order.count(k) > 1})
        missing = sorted(keys - set(order))
        raise ValueError(
            f"order is not a permutation of the tree's sub-graphs "
            f"(duplicates: {dup[:3]}, missing: {missing[:3]})")

    owners = _ingest_pcgs(tree, pcgs)
    violations = []
    printed: set = set()
    for i, k in enumerate(order):
        unmet = sorted(l for l in tree.lower.get(k, []) if l not in printed)
        if unmet:
            violations.append(SequenceViolation(
                i, k, 1, unmet,
                f"{k} printed before the sub-graphs it rests on: {unmet}"))
        blockers = sorted(o for o in owners[k] if o not in printed)
        if blockers:
            violations.append(SequenceViolation(
                i, k, 2, blockers,
                f"{k} printed while inside the collision list of {blockers}"))
        printed.add(k)

    strategy = getattr(sequence, "strategy", "order")
    transitions = getattr(sequence, "transitions", None)
    if transitions is None:
        transitions = _transitions(order, tree, _nozzle_length(cone))
    retractions = sum(1 for t in transitions if not t.contiguous)
    air = float(sum(t.air_length for t in transitions))
    collision_free = not any(v.criterion == 2 for v in violations)
    return SequenceReport(strategy=strategy, n_subgraphs=len(order),
                          retractions=retractions, air_length=air,
                          collision_free=collision_free,
                          violations=violations,
                          runtime_s=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Strategy comparison


def compare_strategies(tree, pcgs=None, cone=None) -> list:
    """Run all three strategies and validate each against the same inputs."""
    makers = [("lpt", lambda: lpt(tree, cone)),
              ("dpt", lambda: dpt(tree, cone)),
              ("greedy", lambda: greedy_sequence(tree, pcgs or {}, cone))]
    reports = []
    for name, make in makers:
        t0 = time.perf_counter()
        seq = make()
        dt = time.perf_counter() - t0
        rep = validate_sequence(seq, tree, pcgs, cone)
        rep.strategy = name
        rep.runtime_s = dt + rep.runtime_s
        reports.append(rep)
    return reports


def format_comparison(reports) -> str:
    """Plain-text table over the strategy reports."""
    lines = ["strategy    subgraphs  retractions  air-move mm  "
             "collision-free  runtime s"]
    for r in reports:
        lines.append("%-10s %10d %12d %12.3f %15s %10.3f"
                     % (r.strategy, r.n_subgraphs, r.retractions,
                        r.air_length, "yes" if r.collision_free else "NO",
                        r.runtime_s))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Sequence files


def write_sequence(path, seq: PrintSequence) -> None:
    """Stable text format: one sub-graph per line with its entry move."""
    order = list(seq.order)
    with open(path, "w") as f:
        f.write(f"# strategy: {seq.strategy}\n")
        f.write(f"# subgraphs: {len(order)}\n")
        f.write("# layer subgraph entry air_mm\n")
        for i, (layer, idx) in enumerate(order):
            if i == 0:
                entry, air = "start", 0.0
            else:
                t = seq.transitions[i - 1]
                entry = "cont" if t.contiguous else "jump"
                air = t.air_length
            f.write("%d %d %s %.6f\n" % (layer, idx, entry, air))


def read_sequence(path):
    """Parse a sequence file: (strategy, order, annotations)."""
    strategy = "order"
    order = []
    annotations = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# strategy:"):
                    strategy = line.split(":", 1)[1].strip()
                continue
            layer, idx, entry, air = line.split()
            order.append((int(layer), int(idx)))
            annotations.append({"entry": entry, "air_mm": float(air)})
    return strategy, order, annotations
