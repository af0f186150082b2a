"""Empirical final distributions, exact TV, the lower-bound oracle and GOF tests."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as _sps

from .oracle import LevelDistribution


class StatsError(Exception):
    pass


class DimensionMismatch(StatsError, ValueError):
    pass


class MixedConfig(StatsError):
    pass


class InsufficientData(StatsError):
    pass


POOL_MIN_EXPECTED = 5.0
MIN_TOTAL = 50


def _probs(p) -> tuple[int | None, np.ndarray]:
    if isinstance(p, LevelDistribution):
        return p.level, p.probs
    return None, np.asarray(p, dtype=np.float64)


def exact_tv(p, q) -> float:
    """Half the l1 distance between two distributions on the same level."""
    lp, a = _probs(p)
    lq, b = _probs(q)
    if a.shape != b.shape or (lp is not None and lq is not None and lp != lq):
        raise DimensionMismatch(f"cannot compare {a.shape} at level {lp} with {b.shape} at level {lq}")
    return min(1.0, 0.5 * math.fsum(np.abs(a - b)))


def c_lambda(lam: float) -> float:
    return 2.0 * lam * (1.0 + lam) / (2.0 + lam) ** 3


def p_n_oracle(N: int, lam: float) -> float:
    """(1+lam) E_{A ~ Bin(N, 1/2)}[A / (N + lam A)] as a compensated sum over A.

    Also checks the gap p - p_N >= c_lambda / N, raising ArithmeticError if
    floating point ever contradicts it.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    a = np.arange(1, N + 1, dtype=np.float64)
    pN = (1.0 + lam) * math.fsum(_sps.binom.pmf(a, N, 0.5) * (a / (N + lam * a)))
    p = (1.0 + lam) / (2.0 + lam)
    if p - pN < c_lambda(lam) / N - 1e-15:
        raise ArithmeticError(f"gap check failed: p - p_N = {p - pN!r} < c/N = {c_lambda(lam) / N!r}")
    return pN


def binomial_se(p, n: int):
    return np.sqrt(np.asarray(p) * (1.0 - np.asarray(p)) / n)


def tv_halfwidth(probs: np.ndarray, n: int) -> float:
    """Worst-case l1 half-width sum_x SE_x / 2 of a plug-in TV estimate."""
    if n <= 0:
        return math.nan
    return 0.5 * math.fsum(binomial_se(np.asarray(probs, dtype=np.float64), n))


@dataclass(frozen=True)
class EmpiricalFinal:
    """Counts over final states plus dead and restarted trials."""

    counts: np.ndarray
    dead_runs: int = 0
    restarted_runs: int = 0
    restarts: int = 0
    trials: int = 0
    instance_hash: str | None = None

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if np.any(c < 0):
            raise ValueError("counts must be nonnegative")
        if int(c.sum()) + self.dead_runs + self.restarted_runs != self.trials:
            raise ValueError("counts, dead and restarted runs must add up to trials")
        object.__setattr__(self, "counts", c)

    @property
    def completed(self) -> int:
        return int(self.counts.sum())

    @property
    def all_dead(self) -> bool:
        return self.completed == 0

    def distribution(self) -> LevelDistribution | None:
        """Law over completed trials, or None when every trial failed."""
        if self.completed == 0:
            return None
        return LevelDistribution(-1, self.counts / self.completed)

    def distribution_with_failures(self) -> np.ndarray:
        """Law over all trials with dead and restarted runs as one extra outcome."""
        extra = self.dead_runs + self.restarted_runs
        return np.concatenate([self.counts, [extra]]) / max(self.trials, 1)

    def standard_errors(self) -> np.ndarray:
        d = self.distribution()
        if d is None:
            return np.full(self.counts.size, math.nan)
        return binomial_se(d.probs, self.completed)

    def tv_to(self, target) -> tuple[float, float]:
        """(plug-in TV to ``target``, worst-case half-width)."""
        d = self.distribution()
        if d is None:
            return math.nan, math.nan
        _, t = _probs(target)
        return exact_tv(d.probs, t), tv_halfwidth(d.probs, self.completed)

    def merge(self, other: "EmpiricalFinal") -> "EmpiricalFinal":
        if self.instance_hash != other.instance_hash:
            raise MixedConfig(f"instance {self.instance_hash} vs {other.instance_hash}")
        if self.counts.shape != other.counts.shape:
            raise DimensionMismatch("count vectors differ in length")
        return EmpiricalFinal(
            self.counts + other.counts,
            self.dead_runs + other.dead_runs,
            self.restarted_runs + other.restarted_runs,
            self.restarts + other.restarts,
            self.trials + other.trials,
            self.instance_hash,
        )

    __add__ = merge


def empirical_final(
    outputs: Iterable, n_states: int, instance_hash: str | None = None
) -> EmpiricalFinal:
    """Tally final states from runs, trajectories or integer codes.

    Integer codes: a state index, -1 for a dead run, -2 for an exhausted
    restart loop.
    """
    counts = np.zeros(n_states, dtype=np.int64)
    dead = restarted = restarts = trials = 0
    for item in outputs:
        trials += 1
        status = getattr(item, "status", None)
        restarts += int(getattr(item, "restart_count", 0))
        if status == "dead":
            dead += 1
        elif status == "restart":
            restarted += 1
        elif status is not None:
            counts[item.output] += 1
        elif hasattr(item, "output"):
            counts[item.output] += 1
        else:
            code = int(item)
            if code == -1:
                dead += 1
            elif code == -2:
                restarted += 1
            else:
                counts[code] += 1
    return EmpiricalFinal(counts, dead, restarted, restarts, trials, instance_hash)


def from_codes(codes: np.ndarray, n_states: int, restarts: int = 0, instance_hash: str | None = None) -> EmpiricalFinal:
    """Vectorized :func:`empirical_final` for integer code arrays."""
    codes = np.asarray(codes, dtype=np.int64)
    ok = codes >= 0
    counts = np.bincount(codes[ok], minlength=n_states)[:n_states]
    return EmpiricalFinal(
        counts, int(np.sum(codes == -1)), int(np.sum(codes == -2)), int(restarts), int(codes.size), instance_hash
    )


# --------------------------------------------------------------------------- goodness of fit


def _pool_columns(obs: np.ndarray, exp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool columns whose smallest expected cell is below 5 into one tail bucket.

    If the tail bucket itself stays below 5 it is merged into the remaining
    column with the smallest expected total.
    """
    small = exp.min(axis=0) < POOL_MIN_EXPECTED
    if not np.any(small):
        return obs, exp
    keep_o, keep_e = obs[:, ~small], exp[:, ~small]
    tail_o = obs[:, small].sum(axis=1, keepdims=True)
    tail_e = exp[:, small].sum(axis=1, keepdims=True)
    if tail_e.min() < POOL_MIN_EXPECTED and keep_o.shape[1] > 0:
        j = int(np.argmin(keep_e.sum(axis=0)))
        keep_o = keep_o.copy()
        keep_e = keep_e.copy()
        keep_o[:, j] += tail_o[:, 0]
        keep_e[:, j] += tail_e[:, 0]
        return keep_o, keep_e
    return np.hstack([keep_o, tail_o]), np.hstack([keep_e, tail_e])


def gof_chi_square(observed, other=None, *, expected=None) -> float:
    """Pearson chi-square p-value.

    Two-sample (``other`` counts) homogeneity test on the 2 x k table, or a
    one-sample test against ``expected`` probabilities.  Categories with
    expected count below 5 are pooled into a tail bucket first.
    """
    a = np.asarray(observed, dtype=np.float64)
    if (other is None) == (expected is None):
        raise ValueError("give exactly one of other counts or expected probabilities")
    if other is not None:
        b = np.asarray(other, dtype=np.float64)
        if a.shape != b.shape:
            raise DimensionMismatch("count vectors differ in length")
        obs = np.vstack([a, b])
        obs = obs[:, obs.sum(axis=0) > 0]
        G = obs.sum()
        if G < MIN_TOTAL or a.sum() == 0 or b.sum() == 0:
            raise InsufficientData(f"total count {G:g} below {MIN_TOTAL}")
        exp = np.outer(obs.sum(axis=1), obs.sum(axis=0)) / G
        obs, exp = _pool_columns(obs, exp)
        k = obs.shape[1]
        if k < 2:
            raise InsufficientData("fewer than two categories after pooling")
        stat = float(np.sum((obs - exp) ** 2 / exp))
        return float(_sps.chi2.sf(stat, k - 1))
    p = np.asarray(expected, dtype=np.float64)
    if p.shape != a.shape:
        raise DimensionMismatch("expected distribution differs in length")
    n = a.sum()
    if n < MIN_TOTAL:
        raise InsufficientData(f"total count {n:g} below {MIN_TOTAL}")
    if np.any((p <= 0) & (a > 0)):
        return 0.0
    live = p > 0
    obs, exp = _pool_columns(a[live][None, :], (n * p[live] / p[live].sum())[None, :])
    k = obs.shape[1]
    if k < 2:
        raise InsufficientData("fewer than two categories after pooling")
    stat = float(np.sum((obs - exp) ** 2 / exp))
    return float(_sps.chi2.sf(stat, k - 1))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    return float(_sps.spearmanr(x, y).statistic)


def mean_and_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return float(x.mean()) if x.size else math.nan, math.nan
    return math.fsum(x) / x.size, float(np.std(x, ddof=1) / math.sqrt(x.size))
