"""Synthetic instances: small reference chains and the hard constructions.

Constructions whose binary tree is too large to enumerate also come in a
lumped form, where a state keeps only the statistic that the kernel, the
PRM and the reward depend on (for example the number of ones so far).  The
lumped chain is the image of the tree chain under that statistic, so every
sampler run on it has the same law as the projected tree run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chain import (
    DEFAULT_TREE_BUDGET,
    BudgetExceeded,
    LayeredChain,
    ProblemInstance,
    StepKernel,
    ValueTable,
    ValueTag,
    build_tree_chain,
    tree_prefixes,
)
from .oracle import backward_induction


class ScheduleInvalid(ValueError):
    pass


class SupportMismatch(ValueError):
    pass


def _prm(values) -> ValueTable:
    return ValueTable(tuple(np.asarray(v, dtype=np.float64) for v in values), ValueTag.PRM)


# --------------------------------------------------------------------------- small references


def two_path(exact_prm: bool = False) -> ProblemInstance:
    """Root -> {a, b} uniformly, then a -> a', b -> b'; r* = (2, 1).

    The default PRM is flat (Vhat(a) = Vhat(b) = 1); ``exact_prm`` uses
    Vhat = V* off the root.
    """
    levels = (("⊥",), ("a", "b"), ("a'", "b'"))
    k0 = StepKernel.from_rows([[(0, 0.5), (1, 0.5)]])
    k1 = StepKernel.from_rows([[(0, 1.0)], [(1, 1.0)]])
    r = np.array([2.0, 1.0])
    mid = r.copy() if exact_prm else np.ones(2)
    name = "two-path-exact" if exact_prm else "two-path"
    return ProblemInstance(LayeredChain(levels, (k0, k1)), r, _prm([[1.0], mid, r]), name)


def random_tree(
    depth: int,
    branching: int,
    seed: int,
    *,
    prm_noise: float = 0.5,
    concentration: float = 1.0,
    zero_reward_frac: float = 0.0,
) -> ProblemInstance:
    """Random Dirichlet tree with log-normal rewards and a log-normally perturbed PRM."""
    ss = np.random.SeedSequence(seed)
    kseed, rseed = ss.spawn(2)
    chain = build_tree_chain(branching, depth, int(kseed.generate_state(1)[0]), concentration=concentration)
    rng = np.random.default_rng(rseed)
    r = np.exp(rng.normal(0.0, 1.0, chain.sizes[-1]))
    if zero_reward_frac > 0:
        r[rng.random(r.size) < zero_reward_frac] = 0.0
        if not np.any(r > 0):
            r[0] = 1.0
    base = ProblemInstance(chain, r, _prm([np.ones(n) for n in chain.sizes[:-1]] + [r]))
    vstar = backward_induction(base)
    vals = [np.ones(1)]
    for h in range(1, depth):
        noise = np.exp(prm_noise * rng.standard_normal(chain.sizes[h]))
        v = vstar[h] * noise
        # keep the PRM positive where V* vanishes so the instance stays valid
        v[v <= 0] = noise[v <= 0] * 1e-3
        vals.append(v)
    vals.append(r)
    return ProblemInstance(chain, r, _prm(vals), f"random-tree-d{depth}-b{branching}-s{seed}")


# --------------------------------------------------------------------------- SMC lower bound


def build_smc_lower(
    H: int, lam: float, representation: str = "tree", *, budget: int = DEFAULT_TREE_BUDGET
) -> ProblemInstance:
    """Uniform binary tree with Vhat = r* = (1+lam)^(#ones).

    ``representation="counts"`` lumps each level to the number of ones so
    far (states 0..h), which is exact for every statistic of the ones count
    and for per-coordinate frequencies via :func:`smc_lower_bits`.
    """
    if H < 1 or not lam > 0:
        raise ValueError("need H >= 1 and lam > 0")
    base = 1.0 + lam
    name = f"smc-lower-H{H}-lam{lam:g}"
    if representation == "tree":
        chain = build_tree_chain(2, H, "uniform", budget=budget)
        vals = [base ** tree_prefixes(2, h).sum(axis=1) for h in range(H + 1)]
        return ProblemInstance(chain, vals[H], _prm(vals), name)
    if representation != "counts":
        raise ValueError(f"unknown representation {representation!r}")
    levels = [tuple(str(c) for c in range(h + 1)) for h in range(H + 1)]
    levels[0] = ("⊥",)
    kernels = [StepKernel.from_rows([[(c, 0.5), (c + 1, 0.5)] for c in range(h + 1)]) for h in range(H)]
    vals = [base ** np.arange(h + 1, dtype=np.float64) for h in range(H + 1)]
    return ProblemInstance(LayeredChain(tuple(levels), tuple(kernels)), vals[H], _prm(vals), name + "-counts")


def smc_lower_bits(paths: np.ndarray, representation: str, H: int) -> np.ndarray:
    """Per-coordinate bits (rows = trials) from level-indexed state paths."""
    paths = np.atleast_2d(np.asarray(paths, dtype=np.int64))
    if representation == "counts":
        return np.diff(paths, axis=1)
    final = paths[:, -1]
    shifts = np.arange(H - 1, -1, -1)
    return (final[:, None] >> shifts) & 1


# --------------------------------------------------------------------------- variance blowup


def build_var_blowup(H: int) -> ProblemInstance:
    """Two deterministic branches; branch 0 has mass 2^-n and a PRM spike 2^h up to n = H // 2."""
    if H < 2:
        raise ValueError("need H >= 2")
    n = H // 2
    p0 = 2.0**-n
    levels = [("⊥",)] + [(f"({h},0)", f"({h},1)") for h in range(1, H + 1)]
    kernels = [StepKernel.from_rows([[(0, p0), (1, 1.0 - p0)]])]
    kernels += [StepKernel.from_rows([[(0, 1.0)], [(1, 1.0)]]) for _ in range(1, H)]
    vals = [np.ones(1)]
    for h in range(1, H + 1):
        spike = 2.0**h if h <= n else 2.0 ** max(2 * n - h, 0)
        vals.append(np.array([spike, 1.0]))
    r = np.ones(2)
    return ProblemInstance(LayeredChain(tuple(levels), tuple(kernels)), r, _prm(vals), f"var-blowup-H{H}")


# --------------------------------------------------------------------------- myopic lower bound


@dataclass(frozen=True)
class MyopicConstruction:
    """Biased product target mu and its delayed PRM counterpart muhat.

    ``h_schedule[n-1]`` is the horizon of the level-n construction and
    ``gamma_schedule[n-1]`` its bias; ``ystar`` has length ``h_schedule[-1]``.
    Conditionals are evaluated on bit matrices (one row per sequence).
    """

    N_level: int
    h_schedule: tuple[int, ...]
    gamma_schedule: tuple[float, ...]
    ystar: np.ndarray

    @property
    def horizon(self) -> int:
        return self.h_schedule[-1]

    # conditionals at 1-based position h of each row of Y

    def cond_mu(self, Y: np.ndarray, h: int) -> np.ndarray:
        return self._mu(self.N_level, self.ystar, np.atleast_2d(Y), h)

    def cond_muhat(self, Y: np.ndarray, h: int) -> np.ndarray:
        return self._muhat(self.N_level, self.ystar, np.atleast_2d(Y), h)

    def _bias(self, n, ystar, Y, h):
        g = self.gamma_schedule[n - 1]
        return np.where(Y[:, h - 1] == ystar[h - 1], 0.5 + g, 0.5 - g)

    def _mu(self, n, ystar, Y, h):
        if n == 1:
            return self._bias(1, ystar, Y, h)
        K = self.h_schedule[n - 2] + 2
        i, r = divmod(h - 1, K)
        if r == 0 or r == K - 1:
            return self._bias(n, ystar, Y, h)
        lo = i * K + 1
        return self._mu(n - 1, ystar[lo : lo + K - 2], Y[:, lo : lo + K - 2], r)

    def _muhat(self, n, ystar, Y, h):
        if n == 1:
            H = self.h_schedule[0]
            if h == 1:
                return np.full(Y.shape[0], 0.5)
            if h < H:
                return self._mu(1, ystar, Y, h - 1)
            return 2.0 * self._mu(1, ystar, Y, H - 1) * self._mu(1, ystar, Y, H)
        K = self.h_schedule[n - 2] + 2
        i, r = divmod(h - 1, K)
        if r == 0:
            return np.full(Y.shape[0], 0.5)
        if r < K - 1:
            lo = i * K + 1
            return self._muhat(n - 1, ystar[lo : lo + K - 2], Y[:, lo : lo + K - 2], r)
        return 2.0 * self._mu(n, ystar, Y, i * K + 1) * self._mu(n, ystar, Y, h)

    def log_prefix(self, Y: np.ndarray, which: str = "mu") -> np.ndarray:
        """log mu(y_{1:h}) (or muhat) for h = 0..len, one row per sequence."""
        Y = np.atleast_2d(np.asarray(Y, dtype=np.int64))
        f = self.cond_mu if which == "mu" else self.cond_muhat
        out = np.zeros((Y.shape[0], Y.shape[1] + 1))
        for h in range(1, Y.shape[1] + 1):
            out[:, h] = out[:, h - 1] + np.log(f(Y, h))
        return out

    def log_accuracy(self, Y: np.ndarray) -> np.ndarray:
        """log(muhat/mu) at every prefix length of every row."""
        return self.log_prefix(Y, "muhat") - self.log_prefix(Y, "mu")

    def sample_mu(self, rng: np.random.Generator, n: int) -> np.ndarray:
        H = self.horizon
        Y = np.zeros((n, H), dtype=np.int64)
        for h in range(1, H + 1):
            Y[:, h - 1] = 1
            p1 = self.cond_mu(Y, h)
            Y[:, h - 1] = (rng.random(n) < p1).astype(np.int64)
        return Y

    def instance(self, representation: str = "tree", *, budget: int = DEFAULT_TREE_BUDGET) -> ProblemInstance:
        """pi_ref uniform, r* = 2^H mu(y), Vhat(y_{1:h}) = 2^h muhat(y_{1:h})."""
        H = self.horizon
        tag = "".join(str(int(b)) for b in self.ystar)
        if representation == "tree":
            chain = build_tree_chain(2, H, "uniform", budget=budget)
            vals = []
            for h in range(H + 1):
                Y = tree_prefixes(2, h)
                if h == 0:
                    vals.append(np.ones(1))
                    continue
                lp = self.log_prefix(Y, "muhat")[:, -1] if h < H else self.log_prefix(Y, "mu")[:, -1]
                vals.append(np.exp(lp + h * math.log(2.0)))
            return ProblemInstance(chain, vals[H], _prm(vals), f"myopic-N{self.N_level}-H{H}-{tag}")
        if representation != "lumped":
            raise ValueError(f"unknown representation {representation!r}")
        if self.N_level != 1:
            raise ValueError("lumped representation is available for N_level = 1 only")
        return self._lumped_instance(tag)

    def _lumped_instance(self, tag: str) -> ProblemInstance:
        # level-h state (c, b): c agreements with ystar among y_1..y_h, b = [y_h = ystar_h];
        # dense index 2 (c - b) + b
        H = self.horizon
        g = self.gamma_schedule[0]
        lp, lm = math.log(0.5 + g), math.log(0.5 - g)
        levels = [("⊥",)]
        vals = [np.ones(1)]
        kernels = [StepKernel.from_rows([[(0, 0.5), (1, 0.5)]])]
        for h in range(1, H + 1):
            labels, v = [], []
            for j in range(h):
                for b in (0, 1):
                    c = j + b
                    labels.append(f"{c}:{b}")
                    if h < H:
                        v.append(math.exp(h * math.log(2.0) + math.log(0.5) + j * lp + (h - 1 - j) * lm))
                    else:
                        v.append(math.exp(H * math.log(2.0) + c * lp + (H - c) * lm))
            levels.append(tuple(labels))
            vals.append(np.array(v))
            if h < H:
                rows = []
                for j in range(h):
                    for b in (0, 1):
                        c = j + b
                        rows.append([(2 * c, 0.5), (2 * c + 1, 0.5)])
                kernels.append(StepKernel.from_rows(rows))
        chain = LayeredChain(tuple(levels), tuple(kernels))
        return ProblemInstance(chain, vals[H], _prm(vals), f"myopic-N1-H{H}-{tag}-lumped")

    def decode(self, paths: np.ndarray, representation: str) -> np.ndarray:
        """Bit sequences (rows) from level-indexed state paths."""
        paths = np.atleast_2d(np.asarray(paths, dtype=np.int64))
        H = self.horizon
        if representation == "tree":
            return (paths[:, -1][:, None] >> np.arange(H - 1, -1, -1)) & 1
        agree = paths[:, 1:] % 2
        return np.where(agree == 1, self.ystar[None, :], 1 - self.ystar[None, :])


def build_myopic_lb(
    N_level: int,
    h_schedule: Sequence[int],
    gamma_schedule: Sequence[float],
    ystar: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> MyopicConstruction:
    if N_level not in (1, 2):
        raise ScheduleInvalid("N_level must be 1 or 2")
    hs = tuple(int(x) for x in h_schedule)
    gs = tuple(float(x) for x in gamma_schedule)
    if len(hs) != N_level or len(gs) != N_level:
        raise ScheduleInvalid("schedules must have one entry per level")
    if hs[0] < 2:
        raise ScheduleInvalid("base horizon must be at least 2")
    for n in range(1, N_level):
        K = hs[n - 1] + 2
        if hs[n] % K != 0 or hs[n] < K:
            raise ScheduleInvalid(f"h({n + 1}) = {hs[n]} is not a positive multiple of h({n}) + 2 = {K}")
    if not all(0 < g < 0.5 for g in gs):
        raise ScheduleInvalid("gammas must lie in (0, 1/2)")
    if ystar is None:
        rng = rng or np.random.default_rng(0)
        ystar = rng.integers(0, 2, hs[-1])
    ys = np.asarray(ystar, dtype=np.int64)
    if ys.shape != (hs[-1],) or np.any((ys != 0) & (ys != 1)):
        raise ScheduleInvalid("ystar must be a binary string of length h(N)")
    ys.setflags(write=False)
    return MyopicConstruction(N_level, hs, gs, ys)


def failure_event(construction: MyopicConstruction, output) -> bool | np.ndarray:
    """Membership of each output row in the agreement event F_N(ystar)."""
    O = np.asarray(output, dtype=np.int64)
    single = O.ndim == 1
    O = np.atleast_2d(O)
    res = _event(construction, construction.N_level, construction.ystar, O)
    return bool(res[0]) if single else res


def _event(c: MyopicConstruction, n: int, ystar: np.ndarray, O: np.ndarray) -> np.ndarray:
    H = ystar.size
    if n == 1:
        g = c.gamma_schedule[0]
        agree = np.count_nonzero(O[:, 1 : H - 1] == ystar[1 : H - 1], axis=1)
        return agree >= (0.5 + g / 2) * (H - 2)
    K = c.h_schedule[n - 2] + 2
    blocks = H // K
    inner = np.ones(O.shape[0], dtype=bool)
    for i in range(blocks):
        lo = i * K + 1
        inner &= _event(c, n - 1, ystar[lo : lo + K - 2], O[:, lo : lo + K - 2])
    leaders = np.arange(blocks) * K
    frac = np.count_nonzero(O[:, leaders] == ystar[leaders], axis=1) / blocks
    return inner & (frac >= 0.5 + c.gamma_schedule[n - 1] / 2)


# --------------------------------------------------------------------------- kernel switch


def _as_tree(spec, alphabet: int, horizon: int, budget: int) -> LayeredChain:
    if isinstance(spec, LayeredChain):
        if spec.horizon != horizon or spec.sizes[-1] != alphabet**horizon:
            raise ValueError("kernel chain does not match the requested tree")
        return spec
    return build_tree_chain(alphabet, horizon, spec, budget=budget)


def build_kernel_switch(
    base_kernel_spec,
    perturbed_kernel_spec,
    alpha: float,
    horizon: int,
    alphabet: int = 2,
    *,
    target_kernel_spec="uniform",
    budget: int = DEFAULT_TREE_BUDGET,
    name: str | None = None,
) -> ProblemInstance:
    """Reference, target and perturbation kernels on one tree; interpolated PRM.

    Vhat(a_{1:h}) = (pi*/pi_ref)(a_{1:h}) * (pi_pert/pi*)(a_{1:h})^((1 - h/H) alpha),
    so alpha = 0 gives Vhat = V* and the final level always equals r*.
    Specs are anything :func:`build_tree_chain` accepts, or a prebuilt tree.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    ref = _as_tree(base_kernel_spec, alphabet, horizon, budget)
    tgt = _as_tree(target_kernel_spec, alphabet, horizon, budget)
    pert = _as_tree(perturbed_kernel_spec, alphabet, horizon, budget)
    H = horizon
    vals = []
    for h in range(H + 1):
        pr, pt, pp = ref.marginals[h], tgt.marginals[h], pert.marginals[h]
        if np.any((pt > 0) & ~(pr > 0)):
            raise SupportMismatch(f"target has mass outside the reference support at level {h}")
        if h < H and alpha > 0 and np.any((pt > 0) & ~(pp > 0)):
            raise SupportMismatch(f"perturbation vanishes where the target is positive at level {h}")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(pr > 0, pt / np.where(pr > 0, pr, 1.0), 0.0)
            expo = (1.0 - h / H) * alpha
            if expo == 0:
                v = ratio
            else:
                tilt = np.where(pt > 0, pp / np.where(pt > 0, pt, 1.0), 0.0)
                v = ratio * tilt**expo
        vals.append(v)
    vals[0] = np.ones(1)
    return ProblemInstance(ref, vals[H], _prm(vals), name or f"kswitch-H{H}-a{alpha:g}")
