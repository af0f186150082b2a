"""Backtracking random walk with an auxiliary state, its visit forests, and the
independent geometric branching process they are compared against.

States are addressed by global ids of the flat chain; ``AUX`` (-1) is the
auxiliary state sitting above the root.
"""
from __future__ import annotations

import bisect
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .chain import BudgetExceeded, ProblemInstance
from ._core import _pykernels


class NotATree(ValueError):
    pass


class StepCapExceeded(RuntimeError):
    def __init__(self, message: str, forest: "ParticleForest"):
        super().__init__(message)
        self.forest = forest


class VgbState(NamedTuple):
    level: int
    index: int


AUX = VgbState(-1, 0)
DEFAULT_STEP_CAP = 10**6


@dataclass(slots=True)
class ForestNode:
    label: VgbState
    parent: int  # -1 for children of the auxiliary root
    birth: int
    start: int
    end: int | None = None
    children: list[int] = field(default_factory=list)


@dataclass
class ParticleForest:
    nodes: list[ForestNode] = field(default_factory=list)
    capped: bool = False
    steps: int = 0

    @property
    def roots(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.parent < 0]

    def __len__(self) -> int:
        return len(self.nodes)

    def add(self, label: VgbState, parent: int, start: int = -1) -> int:
        i = len(self.nodes)
        self.nodes.append(ForestNode(label, parent, i, start))
        if parent >= 0:
            self.nodes[parent].children.append(i)
        return i

    def canonical(self) -> tuple:
        """Ordered nested (label, children) tuples; equal iff same ordered forest."""

        def sub(i):
            n = self.nodes[i]
            return (tuple(n.label), tuple(sub(c) for c in n.children))

        return tuple(sub(r) for r in self.roots)


# --------------------------------------------------------------------------- walk kernel


class _Walk:
    """Python-list view of the flat chain for scalar stepping."""

    def __init__(self, instance: ProblemInstance):
        parents = instance.chain.parents
        if parents is None:
            raise NotATree("walk needs a tree-structured chain")
        fc = instance.flat
        self.fc = fc
        self.H = fc.horizon
        off = fc.offset
        lev = np.repeat(np.arange(self.H + 1), np.diff(off[: self.H + 2]))
        par = np.full(fc.n_states, -1, dtype=np.int64)
        for h in range(1, self.H + 1):
            par[off[h] : off[h + 1]] = parents[h] + off[h - 1]
        self.off = off.tolist()
        self.level = lev.tolist()
        self.parent = par.tolist()
        self.row_ptr = fc.row_ptr.tolist()
        self.col = fc.col.tolist()
        self.tcum = fc.tcum.tolist()
        self.look = fc.look.tolist()

    def state(self, gid: int) -> VgbState:
        if gid < 0:
            return AUX
        h = self.level[gid]
        return VgbState(h, gid - self.off[h])

    def gid(self, s: VgbState) -> int:
        return -1 if s.level < 0 else self.off[s.level] + s.index

    def child(self, gid: int, x: float) -> int:
        """Child whose twisted cumulative mass first exceeds x."""
        a, b = self.row_ptr[gid], self.row_ptr[gid + 1]
        k = bisect.bisect_right(self.tcum, x, a, b)
        if k >= b:
            k = b - 1
            while k > a and not self.tcum[k] > self.tcum[k - 1]:
                k -= 1
        return self.col[k]


def _walker(instance: ProblemInstance) -> _Walk:
    c = instance.__dict__.setdefault("_sampler_cache", {})
    if "walk" not in c:
        c["walk"] = _Walk(instance)
    return c["walk"]


def p_up(instance: ProblemInstance, state: VgbState) -> float:
    """Probability of stepping to the parent: Vhat(x) / (Vhat(x) + sum pi Vhat(child))."""
    w = _walker(instance)
    if state.level < 0 or state.level == w.H:
        return 0.0 if state.level < 0 else 1.0
    return 1.0 / (1.0 + w.look[w.gid(state)])


def p_down(instance: ProblemInstance, state: VgbState) -> tuple[list[VgbState], np.ndarray]:
    """Children and their probabilities conditioned on a downward move."""
    w = _walker(instance)
    if state.level < 0:
        return [VgbState(0, 0)], np.ones(1)
    g = w.gid(state)
    a, b = w.row_ptr[g], w.row_ptr[g + 1]
    if a == b:
        return [], np.zeros(0)
    t = np.diff(np.asarray(w.tcum[a:b]), prepend=0.0)
    tot = w.look[g]
    probs = t / tot if tot > 0 else np.zeros_like(t)
    return [w.state(c) for c in w.col[a:b]], probs


def vgb_step_distribution(instance: ProblemInstance, state: VgbState) -> dict[VgbState, float]:
    """Full transition row from ``state`` (neighbors with positive probability)."""
    w = _walker(instance)
    if state.level < 0:
        return {VgbState(0, 0): 1.0}
    up = w.state(w.parent[w.gid(state)])
    if state.level == w.H:
        return {up: 1.0}
    pu = p_up(instance, state)
    kids, probs = p_down(instance, state)
    row = {up: pu}
    for k, p in zip(kids, probs):
        if p > 0:
            row[k] = row.get(k, 0.0) + (1.0 - pu) * float(p)
    return row


def _walk_gids(w: _Walk, K: int, rng: np.random.Generator, step_cap: int) -> tuple[list[int], bool]:
    traj = [-1]
    visits = 1
    x = -1
    H, level, parent, look = w.H, w.level, w.parent, w.look
    steps = 0
    while visits < K + 1:
        if steps >= step_cap:
            return traj, True
        if x < 0:
            x = 0
        elif level[x] == H:
            x = parent[x]
        else:
            t = rng.random() * (1.0 + look[x])
            x = parent[x] if t < 1.0 else w.child(x, t - 1.0)
        traj.append(x)
        steps += 1
        if x < 0:
            visits += 1
    return traj, False


def _parse_levels(levels: Sequence[int], labels: Sequence, to_state=None) -> ParticleForest:
    """Interval parser shared by the public and the gid-level entry points."""
    forest = ParticleForest(steps=len(levels) - 1)
    nodes = forest.nodes
    stack = [-1]
    stack_lab = [labels[0]] if levels else []
    for t in range(1, len(levels)):
        d = levels[t] - levels[t - 1]
        if d == 1:
            lab = labels[t]
            i = forest.add(to_state(lab) if to_state else lab, stack[-1], t)
            stack.append(i)
            stack_lab.append(lab)
        elif d == -1:
            if len(stack) < 2:
                raise ValueError(f"step {t} moves above the auxiliary state")
            i = stack.pop()
            stack_lab.pop()
            if stack_lab[-1] != labels[t]:
                raise ValueError(f"step {t} does not return to the parent")
            nodes[i].end = t - 1
        else:
            raise ValueError(f"step {t} is not a move to a parent or child")
    return forest


def parse_trajectory(states: Sequence[VgbState]) -> ParticleForest:
    """Parse a walk started at AUX into its forest of maximal excursions.

    Each down move into x at time t opens a node for x; the matching return
    to its parent at time t'+1 closes it with interval [t, t'].  Nodes still
    open at the end keep ``end=None``.
    """
    states = [VgbState(*s) for s in states]
    if states and states[0] != AUX:
        raise ValueError("trajectory must start at the auxiliary state")
    return _parse_levels([s.level for s in states], states)


def vgb_walk_forest(
    instance: ProblemInstance,
    K: int,
    rng: np.random.Generator,
    step_cap: int = DEFAULT_STEP_CAP,
    *,
    raise_on_cap: bool = False,
) -> ParticleForest:
    """Walk from AUX until it has been visited K+1 times and parse the visits."""
    w = _walker(instance)
    traj, capped = _walk_gids(w, int(K), rng, int(step_cap))
    forest = _parse_levels([w.level[g] if g >= 0 else -1 for g in traj], traj, w.state)
    forest.capped = capped
    if capped and raise_on_cap:
        raise StepCapExceeded(f"walk hit the cap of {step_cap} steps", forest)
    return forest


def forest_label_counts(forest: ParticleForest) -> dict[int, dict[int, int]]:
    """level -> (state index -> count) census of a forest."""
    out: dict[int, Counter] = {}
    for n in forest.nodes:
        out.setdefault(n.label.level, Counter())[n.label.index] += 1
    return {h: dict(c) for h, c in sorted(out.items())}


def interval_violations(forest: ParticleForest) -> list[str]:
    """Nesting checks: children strictly inside parents, siblings disjoint."""
    bad = []
    nodes = forest.nodes
    for i, n in enumerate(nodes):
        if n.end is None:
            continue
        if n.parent >= 0:
            p = nodes[n.parent]
            if p.end is not None and not (p.start < n.start and n.end < p.end):
                bad.append(f"node {i} not inside its parent")
            if p.label.level != n.label.level - 1:
                bad.append(f"node {i} skips a level")
        last = None
        for c in n.children:
            cn = nodes[c]
            if last is not None and cn.start <= last:
                bad.append(f"children of node {i} overlap")
            last = cn.end if cn.end is not None else float("inf")
    return bad


# --------------------------------------------------------------------------- independent branching


def _smc_ind_levels(instance: ProblemInstance, N: int, rng: np.random.Generator, max_particles: int):
    """Per-level global ids and parent positions of the branching process."""
    fc = instance.flat
    H = fc.horizon
    ids = [np.zeros(int(N), dtype=np.int64)]
    pars = [np.full(int(N), -1, dtype=np.int64)]
    total = int(N)
    for h in range(H):
        cur = ids[-1]
        if cur.size == 0:
            ids.append(cur)
            pars.append(cur)
            continue
        D = rng.geometric(1.0 / (1.0 + fc.look[cur])) - 1
        n = int(D.sum())
        total += n
        if total > max_particles:
            raise BudgetExceeded(f"branching process exceeded {max_particles} particles")
        parent_pos = np.repeat(np.arange(cur.size), D)
        kids, _, _ = _pykernels._children(fc, cur[parent_pos], rng.random(n), True)
        ids.append(kids.astype(np.int64))
        pars.append(parent_pos)
    return ids, pars


def smc_ind_run(
    instance: ProblemInstance, N: int, rng: np.random.Generator, *, max_particles: int = 10**6
) -> ParticleForest:
    """N roots; each particle independently spawns Geom - 1 children drawn from P_down."""
    w = _walker(instance)
    ids, pars = _smc_ind_levels(instance, N, rng, max_particles)
    forest = ParticleForest()
    prev_nodes: list[int] = []
    for h, (g, p) in enumerate(zip(ids, pars)):
        row = []
        for gid, pp in zip(g.tolist(), p.tolist()):
            row.append(forest.add(w.state(gid), prev_nodes[pp] if h > 0 else -1))
        prev_nodes = row
    return forest


def smc_ind_counts(instance: ProblemInstance, N: int, rng: np.random.Generator, *, max_particles: int = 10**6):
    """Per-level bincounts of one branching run (no forest objects)."""
    ids, _ = _smc_ind_levels(instance, N, rng, max_particles)
    sizes = instance.sizes
    off = instance.flat.offset
    return [np.bincount(g - off[h], minlength=sizes[h]) for h, g in enumerate(ids)]


def vgb_counts(instance: ProblemInstance, K: int, rng: np.random.Generator, step_cap: int = DEFAULT_STEP_CAP):
    """Per-level node counts of one walk via its parsed forest; None if capped."""
    forest = vgb_walk_forest(instance, K, rng, step_cap)
    if forest.capped:
        return None
    out = [np.zeros(n, dtype=np.int64) for n in instance.sizes]
    for n in forest.nodes:
        out[n.label.level][n.label.index] += 1
    return out


def smc_ind_expected_counts(instance: ProblemInstance, N: int) -> list[np.ndarray]:
    """E[count of x at level h] = N pi_h(x) Vhat(x) / Vhat(root)."""
    root = float(instance.prm[0][0])
    return [N * m * np.asarray(v) / root for m, v in zip(instance.chain.marginals, instance.prm.values)]


# --------------------------------------------------------------------------- constructive coupling


def _node_draw(w: _Walk, seed: int, pair: int, key: tuple, gid: int) -> list[int]:
    """Children of one node from its own keyed stream: Geom - 1 of them, then labels."""
    if w.level[gid] == w.H:
        return []
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(pair,) + key)))
    look = w.look[gid]
    D = int(rng.geometric(1.0 / (1.0 + look))) - 1
    return [w.child(gid, u * look) for u in rng.random(D).tolist()]


def coupled_pair(instance: ProblemInstance, N: int, seed: int, pair: int) -> tuple[ParticleForest, ParticleForest]:
    """Branching-process forest and walk forest built from the same per-node draws.

    The branching side grows level by level; the walk side explores the same
    children depth first, emitting an actual walk trajectory that is then
    run through the interval parser.
    """
    w = _walker(instance)
    ind = ParticleForest()
    frontier = [(ind.add(w.state(0), -1), (r,), 0) for r in range(N)]
    while frontier:
        nxt = []
        for node, key, gid in frontier:
            for j, c in enumerate(_node_draw(w, seed, pair, key, gid)):
                nxt.append((ind.add(w.state(c), node), key + (j,), c))
        frontier = nxt

    traj = [-1]

    def explore(key, gid):
        for j, c in enumerate(_node_draw(w, seed, pair, key, gid)):
            traj.append(c)
            explore(key + (j,), c)
            traj.append(gid)

    for r in range(N):
        traj.append(0)
        explore((r,), 0)
        traj.append(-1)
    walk = _parse_levels([w.level[g] if g >= 0 else -1 for g in traj], traj, w.state)
    return ind, walk
