"""Exact enumeration of values, tilted marginals, divergences and bound formulas.

Scalar reductions use ``math.fsum`` (exactly rounded, order independent), so
every quantity here is a deterministic reference for the statistical tests.
Infinite divergences and constants are returned as ``math.inf``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chain import ProblemInstance, StepKernel, ValueTable, ValueTag


class OracleError(Exception):
    pass


class DegenerateLevel(OracleError):
    pass


class ZeroValueState(OracleError):
    pass


class SelfCheckFailed(OracleError):
    pass


IDENTITY_RTOL = 1e-9


@dataclass(frozen=True)
class LevelDistribution:
    level: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or not abs(math.fsum(p) - 1.0) <= 1e-10:
            raise ValueError(f"level {self.level}: not a probability vector")
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.probs.size


def backward_induction(instance: ProblemInstance) -> ValueTable:
    """V*_H = r*, V*_h = E[V*_{h+1} | x_h]; returns the EXACT_VSTAR table."""
    H = instance.horizon
    vals: list[np.ndarray] = [np.empty(0)] * (H + 1)
    vals[H] = np.array(instance.terminal_reward, dtype=np.float64)
    for h in range(H - 1, -1, -1):
        vals[h] = instance.chain.kernels[h].pull(vals[h + 1])
    return ValueTable(tuple(vals), ValueTag.EXACT_VSTAR)


def partition_function(instance: ProblemInstance) -> float:
    return float(backward_induction(instance)[0][0])


def tilted_marginals(
    instance: ProblemInstance, table: ValueTable | None = None
) -> tuple[list[LevelDistribution], np.ndarray]:
    """Level marginals tilted by ``table`` (pi_h when ``table`` is None).

    Returns the normalized distributions and the per-level normalizers
    ``E_{pi_h}[table]`` (Z at every level for V*, Zhat_h for the PRM).
    """
    marg = instance.chain.marginals
    dists, norms = [], []
    for h, m in enumerate(marg):
        mass = m if table is None else m * table[h]
        z = math.fsum(mass)
        if not z > 0:
            raise DegenerateLevel(f"level {h} has zero tilted mass")
        dists.append(LevelDistribution(h, mass / z))
        norms.append(z)
    return dists, np.array(norms)


def optimal_kernel(
    instance: ProblemInstance, vstar: ValueTable | None = None, *, allow_zero: bool = False
) -> list[StepKernel]:
    """Kernels pi*(x'|x) = pi_ref(x'|x) V*(x') / V*(x).

    Rows of states with V* = 0 raise :class:`ZeroValueState`, unless
    ``allow_zero`` is set, in which case they keep the reference row (such
    states carry no mass under pi*).
    """
    vstar = vstar or backward_induction(instance)
    out = []
    for h, k in enumerate(instance.chain.kernels):
        src = k.source_of_edges()
        denom = vstar[h][src]
        zero = denom <= 0
        if np.any(zero) and not allow_zero:
            i = int(src[np.flatnonzero(zero)[0]])
            raise ZeroValueState(f"V* = 0 at level {h} state {i}")
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(zero, k.probs, k.probs * vstar[h + 1][k.indices] / np.where(zero, 1.0, denom))
        out.append(StepKernel(k.indptr, k.indices, p))
    return out


def pushforward(dist: np.ndarray, kernel: StepKernel, n_targets: int) -> np.ndarray:
    return kernel.push(np.asarray(dist, dtype=np.float64), n_targets)


# --------------------------------------------------------------------------- divergences


@dataclass(frozen=True)
class DivergenceReport:
    chi2: np.ndarray
    chi2_product: np.ndarray
    kl: np.ndarray
    dcov: dict[float, np.ndarray]
    Z: float
    Zhat: np.ndarray
    M_list: tuple[float, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "chi2": _jsonable(self.chi2),
            "chi2_product": _jsonable(self.chi2_product),
            "kl": _jsonable(self.kl),
            "dcov": {repr(float(m)): _jsonable(v) for m, v in self.dcov.items()},
            "Z": _jsonable(self.Z),
            "Zhat": _jsonable(self.Zhat),
        }


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [_jsonable(float(v)) for v in x]
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


def _level_divergences(p: np.ndarray, q: np.ndarray, M_list: Sequence[float]):
    """chi2, KL and D_cov^M of p relative to q on one level."""
    sp = p > 0
    with np.errstate(divide="ignore"):
        ratio = np.where(q[sp] > 0, p[sp] / np.where(q[sp] > 0, q[sp], 1.0), np.inf)
    # relative slack keeps exact ties (ratio == M) on the inclusive side
    dcov = {m: min(math.fsum(p[sp][ratio >= m * (1 - 1e-12)]), 1.0) for m in M_list}
    if np.any(sp & ~(q > 0)):
        return math.inf, math.inf, dcov
    pp, qq = p[sp], q[sp]
    # sum (p-q)^2/q over supp(q); q-mass outside supp(p) contributes q itself
    rest = q[(q > 0) & ~sp]
    chi2 = math.fsum(np.concatenate([(pp - qq) ** 2 / qq, rest]))
    kl = max(math.fsum(pp * np.log(pp / qq)), 0.0)
    return chi2, kl, dcov


def divergence_report(
    instance: ProblemInstance,
    M_list: Sequence[float] = (),
    *,
    vstar: ValueTable | None = None,
    check: bool = True,
) -> DivergenceReport:
    """chi2, KL and D_cov^M of pi*_h relative to pihat_h at every level.

    chi2 is evaluated directly and through the cross-ratio product
    ``E_{pi*}[Vhat/V*] * E_{pi*}[V*/Vhat] - 1``; with ``check`` a relative
    disagreement above 1e-9 raises :class:`SelfCheckFailed`.
    """
    vstar = vstar or backward_induction(instance)
    pstar, zs = tilted_marginals(instance, vstar)
    phat, zhat = tilted_marginals(instance, instance.prm)
    H = instance.horizon
    M_list = tuple(float(m) for m in M_list)
    chi2, chi2p, kl = np.zeros(H + 1), np.zeros(H + 1), np.zeros(H + 1)
    dcov = {m: np.zeros(H + 1) for m in M_list}
    for h in range(H + 1):
        c, k_, d = _level_divergences(pstar[h].probs, phat[h].probs, M_list)
        chi2[h], kl[h] = c, k_
        for m in M_list:
            dcov[m][h] = d[m]
        chi2p[h] = _chi2_product(instance.chain.marginals[h], pstar[h].probs, vstar[h], instance.prm[h])
        if check and math.isfinite(chi2[h]) and math.isfinite(chi2p[h]):
            if abs(chi2[h] - chi2p[h]) > IDENTITY_RTOL * max(abs(chi2[h]), abs(chi2p[h]), 1.0):
                raise SelfCheckFailed(f"level {h}: direct chi2 {chi2[h]!r} vs product form {chi2p[h]!r}")
    return DivergenceReport(chi2, chi2p, kl, dcov, float(zs[0]), zhat, M_list)


def _chi2_product(marg: np.ndarray, pstar: np.ndarray, v: np.ndarray, vhat: np.ndarray) -> float:
    s = pstar > 0
    if np.any(s & ~(vhat > 0)):
        return math.inf
    if np.any((marg > 0) & (vhat > 0) & ~(v > 0)):
        # PRM mass where V* vanishes leaves supp(pi*); the cross-ratio form
        # does not cover that case.
        return math.nan
    a = math.fsum(pstar[s] * vhat[s] / v[s])
    b = math.fsum(pstar[s] * v[s] / vhat[s])
    return a * b - 1.0


# --------------------------------------------------------------------------- coverage


@dataclass(frozen=True)
class CoverageConstants:
    c_act: float
    c_act_hat: float
    c_inf_raw: float
    c_inf_rescaled: float
    act_tail: dict[float, np.ndarray]

    @property
    def c_inf(self) -> float:
        return self.c_inf_raw

    def to_dict(self) -> dict:
        return {
            "c_act": _jsonable(self.c_act),
            "c_act_hat": _jsonable(self.c_act_hat),
            "c_inf_raw": _jsonable(self.c_inf_raw),
            "c_inf_rescaled": _jsonable(self.c_inf_rescaled),
            "act_tail": {repr(float(e)): _jsonable(v) for e, v in self.act_tail.items()},
        }


def _max_step_ratio(instance: ProblemInstance, table: ValueTable) -> float:
    """max over reachable supported transitions of table(x')/table(x)."""
    best = 1.0
    marg = instance.chain.marginals
    for h, k in enumerate(instance.chain.kernels):
        src = k.source_of_edges()
        live = (k.probs > 0) & (marg[h][src] > 0)
        num = table[h + 1][k.indices[live]]
        den = table[h][src[live]]
        if np.any((den <= 0) & (num > 0)):
            return math.inf
        ok = den > 0
        if np.any(ok):
            best = max(best, float(np.max(num[ok] / den[ok])))
    return best


def coverage_constants(
    instance: ProblemInstance, eta_list: Sequence[float] = (), *, vstar: ValueTable | None = None
) -> CoverageConstants:
    """Action coverage for V* and the PRM, worst-case value ratios, action tails.

    Only states reachable under pi_ref enter the maxima.  ``c_inf_raw`` is
    max over states of max(V*/Vhat, Vhat/V*); ``c_inf_rescaled`` is the same
    after multiplying Vhat by the best constant, sqrt(max r / min r) with
    r = V*/Vhat.
    """
    vstar = vstar or backward_induction(instance)
    marg = instance.chain.marginals
    c_act = _max_step_ratio(instance, vstar)
    c_hat = _max_step_ratio(instance, instance.prm)

    raw, rmax, rmin = 1.0, 0.0, math.inf
    for h in range(instance.horizon + 1):
        live = marg[h] > 0
        v, w = vstar[h][live], instance.prm[h][live]
        both = (v > 0) & (w > 0)
        if np.any((v > 0) != (w > 0)):
            raw = rmax = math.inf
            break
        if np.any(both):
            r = v[both] / w[both]
            raw = max(raw, float(np.max(r)), float(np.max(1.0 / r)))
            rmax, rmin = max(rmax, float(np.max(r))), min(rmin, float(np.min(r)))
    resc = math.inf if math.isinf(rmax) else max(1.0, math.sqrt(rmax / rmin))

    # Pr_{pi*}[V*(x_h)/V*(x_{h-1}) >= eta] per level h = 1..H (index 0 unused)
    pstar, _ = tilted_marginals(instance, vstar)
    kstar = optimal_kernel(instance, vstar, allow_zero=True)
    tails = {}
    for eta in eta_list:
        t = np.zeros(instance.horizon + 1)
        for h, k in enumerate(kstar):
            src = k.source_of_edges()
            pv = vstar[h][src]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(pv > 0, vstar[h + 1][k.indices] / np.where(pv > 0, pv, 1.0), 0.0)
            mass = pstar[h].probs[src] * k.probs
            t[h + 1] = math.fsum(mass[ratio >= eta * (1 - 1e-12)])
        tails[float(eta)] = t
    return CoverageConstants(c_act, c_hat, raw, resc, tails)


# --------------------------------------------------------------------------- bounds


@dataclass(frozen=True)
class TheoryBounds:
    thm_3_2: float
    prop_B1_sharp: float
    thm_3_4: float
    thm_B4: float
    thm_3_6: float

    def to_dict(self) -> dict:
        return {k: _jsonable(v) for k, v in self.__dict__.items()}


def _sqrt(x: float) -> float:
    return math.inf if math.isinf(x) else math.sqrt(max(x, 0.0))


def prop_b1_terms(instance: ProblemInstance, vstar: ValueTable | None = None) -> np.ndarray:
    """Per-step sqrt(E[Vhat(x_{h-1})] * E[V*(x_h)^2 / Vhat(x_{h-1})]) / Z under pi_ref."""
    vstar = vstar or backward_induction(instance)
    marg = instance.chain.marginals
    Z = float(vstar[0][0])
    out = np.zeros(instance.horizon + 1)
    for h in range(1, instance.horizon + 1):
        k = instance.chain.kernels[h - 1]
        prev = instance.prm[h - 1]
        m = marg[h - 1]
        live = m > 0
        e_hat = math.fsum(m[live] * prev[live])
        if np.any(live & ~(prev > 0)):
            out[h] = math.inf
            continue
        src = k.source_of_edges()
        w = m[src] * k.probs
        live_e = w > 0
        e_sq = math.fsum(w[live_e] * vstar[h][k.indices[live_e]] ** 2 / prev[src[live_e]])
        out[h] = math.sqrt(e_hat * e_sq) / Z
    return out


def theory_bounds(
    instance: ProblemInstance,
    N: int,
    M: float = 2.0,
    eta: float | None = None,
    *,
    report: DivergenceReport | None = None,
    cov: CoverageConstants | None = None,
) -> TheoryBounds:
    """Evaluate the TV upper-bound formulas at particle count ``N``.

    ``eta`` defaults to C_act.  The per-step prop_B1 terms are normalized by
    Z so that the quantity is scale free and comparable to thm_3_2.
    """
    H = instance.horizon
    vstar = backward_induction(instance)
    report = report or divergence_report(instance, (M,), vstar=vstar)
    if M not in report.dcov:
        report = divergence_report(instance, (M,), vstar=vstar)
    cov = cov or coverage_constants(instance, (), vstar=vstar)
    eta = cov.c_act if eta is None else float(eta)
    if eta not in cov.act_tail:
        cov = coverage_constants(instance, (eta,), vstar=vstar)
    n = float(N)
    sq = [_sqrt(c) for c in report.chi2]
    inner = math.fsum(sq[1:H]) if all(math.isfinite(s) for s in sq[1:H]) else math.inf
    thm_3_2 = _sqrt(cov.c_act / n) * (H + inner)
    terms = prop_b1_terms(instance, vstar)
    prop_b1 = math.fsum(terms[1:]) / math.sqrt(n) if np.all(np.isfinite(terms)) else math.inf
    dc = report.dcov[M]
    thm_3_4 = H * _sqrt(M * cov.c_act / n) + math.fsum(dc[1:H])
    thm_b4 = H * _sqrt(M * eta / n) + math.fsum(dc[1 : H + 1]) + math.fsum(cov.act_tail[eta][1 : H + 1])
    tail = sq[1 : H + 1]
    thm_3_6 = math.fsum(tail) / math.sqrt(n) if all(math.isfinite(s) for s in tail) else math.inf
    return TheoryBounds(thm_3_2, prop_b1, thm_3_4, thm_b4, thm_3_6)


# --------------------------------------------------------------------------- lookahead


def lookahead_values(instance: ProblemInstance, from_level: int, to_level: int) -> np.ndarray:
    """E[Vhat(x_to) | x_from] for every state at ``from_level``."""
    v = np.asarray(instance.prm[to_level], dtype=np.float64)
    for h in range(to_level - 1, from_level - 1, -1):
        v = instance.chain.kernels[h].pull(v)
    return v


def lookahead_second_moment(instance: ProblemInstance, from_level: int, to_level: int) -> float:
    """E_{x ~ pi_from}[ E[Vhat(x_to) | x]^2 ]."""
    v = lookahead_values(instance, from_level, to_level)
    return math.fsum(instance.chain.marginals[from_level] * v * v)
