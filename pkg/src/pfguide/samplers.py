"""Particle samplers: SMC (two output rules), SMC-RS, DMC with restart,
action-level sampling, SIS and Best-of-N.

Every sampler takes a ``numpy.random.Generator`` and is deterministic given
its state.  The per-trial work runs in the active kernel backend (compiled
when available); both backends consume the generator identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._core import kernels as _active
from .chain import ProblemInstance
from .oracle import coverage_constants

RESAMPLING = ("multinomial", "systematic")

OK, DEAD, RESTART = "ok", "dead", "restart"


class SamplerError(Exception):
    pass


class SamplerConfigError(SamplerError, ValueError):
    pass


class AllParticlesDead(SamplerError):
    pass


class MaxRestartsExceeded(SamplerError):
    pass


class AcceptanceAboveOne(SamplerError):
    pass


class ZTildeTooSmall(SamplerError):
    pass


class DegenerateRow(SamplerError):
    pass


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent generator for one trial of a seeded campaign."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(trial),))))


@dataclass(frozen=True)
class SamplerConfig:
    particles: int = 1
    resampling: str = "multinomial"
    eta: float | None = None  # None: use the PRM action coverage
    c_inf: float | None = None  # None: raw value from the oracle
    z_tilde: str | float = "cinf"  # "cinf", "pilot" or an explicit value
    max_restarts: int = 1000
    strict: bool = True
    max_attempts: int = 10**8

    def __post_init__(self):
        if int(self.particles) < 1:
            raise SamplerConfigError("particles must be >= 1")
        if self.resampling not in RESAMPLING:
            raise SamplerConfigError(f"resampling must be one of {RESAMPLING}")
        if self.eta is not None and not self.eta >= 1:
            raise SamplerConfigError("eta must be >= 1")
        if int(self.max_restarts) < 1:
            raise SamplerConfigError("max_restarts must be >= 1")
        if isinstance(self.z_tilde, str):
            if self.z_tilde not in ("cinf", "pilot"):
                raise SamplerConfigError("z_tilde must be 'cinf', 'pilot' or a positive number")
        elif not float(self.z_tilde) > 0:
            raise SamplerConfigError("explicit z_tilde must be positive")

    @property
    def systematic(self) -> bool:
        return self.resampling == "systematic"


@dataclass
class ParticleRun:
    """Record of one sampler call.

    ``parts[h-1]`` and ``ancestors[h-1]`` hold the level-h particles (local
    indices) and the index of each one's parent in the level-(h-1) set.
    ``log_What[h]`` is log of prod_{i<=h} W_i/N, with ``log_What[0] = 0``.
    """

    N: int
    parts: np.ndarray
    ancestors: np.ndarray
    log_W: np.ndarray
    log_What: np.ndarray
    weights: np.ndarray | None = None
    ess: np.ndarray | None = None
    output: int | None = None
    path: np.ndarray | None = None
    status: str = OK
    dead_step: int | None = None
    restart_count: int = 0
    attempts: np.ndarray | None = None
    warnings: int = 0
    inner_runs: int = 1

    @property
    def horizon(self) -> int:
        return self.parts.shape[0]

    @property
    def dead(self) -> bool:
        return self.status == DEAD

    @property
    def restarted(self) -> bool:
        return self.status == RESTART

    @property
    def particles(self) -> list[np.ndarray]:
        return [np.zeros(self.N, dtype=np.int64)] + [p for p in self.parts]

    @property
    def sample(self) -> int:
        if self.status == DEAD:
            raise AllParticlesDead(f"all weights vanished at step {self.dead_step}")
        if self.status == RESTART:
            raise MaxRestartsExceeded(f"no acceptance after {self.restart_count} attempts")
        return int(self.output)


@dataclass(frozen=True)
class Trajectory:
    path: np.ndarray

    @property
    def output(self) -> int:
        return int(self.path[-1])


# --------------------------------------------------------------------------- helpers


def _cache(instance: ProblemInstance) -> dict:
    return instance.__dict__.setdefault("_sampler_cache", {})


def _coverage(instance: ProblemInstance):
    c = _cache(instance)
    if "coverage" not in c:
        c["coverage"] = coverage_constants(instance)
    return c["coverage"]


def resolve_eta(instance: ProblemInstance, config: SamplerConfig) -> float:
    return float(config.eta) if config.eta is not None else max(1.0, _coverage(instance).c_act_hat)


def resolve_c_inf(instance: ProblemInstance, config: SamplerConfig) -> float:
    c = float(config.c_inf) if config.c_inf is not None else _coverage(instance).c_inf_raw
    if not math.isfinite(c):
        raise SamplerConfigError("output rule needs a finite C_inf; supply an override")
    return c


def _local(instance: ProblemInstance, parts: np.ndarray) -> np.ndarray:
    off = instance.flat.offset
    return parts - off[1 : parts.shape[0] + 1, None]


def _cum_log(logW: np.ndarray, N: int, dead_step: int | None) -> np.ndarray:
    out = np.zeros(logW.size + 1)
    lnN = math.log(N)
    acc = 0.0
    for h in range(logW.size):
        if dead_step is not None and h >= dead_step:
            out[h + 1 :] = -math.inf
            break
        acc = acc + (float(logW[h]) - lnN)
        out[h + 1] = acc
    return out


def _log(W: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(W)


def _trace(parts_local: np.ndarray, ancs: np.ndarray, out: int) -> np.ndarray:
    H = parts_local.shape[0]
    path = np.zeros(H + 1, dtype=np.int64)
    j = out
    for h in range(H, 0, -1):
        path[h] = parts_local[h - 1, j]
        j = ancs[h - 1, j]
    return path


def _pass(instance, kind, N, config, rng, backend):
    """Run one kernel pass and wrap it as a ParticleRun."""
    fc = instance.flat
    if kind == "smc":
        dead, out, Wsum, ess, parts, ancs, weights = backend.smc(fc, N, config.systematic, rng)
        attempts = None
    else:
        dead, out, Wsum, parts, ancs = backend.dmc(fc, N, config.systematic, rng)
        ess = weights = attempts = None
    dead_step = None if dead < 0 else int(dead)
    logW = _log(Wsum)
    local = _local(instance, parts)
    run = ParticleRun(
        N=N,
        parts=local,
        ancestors=ancs,
        log_W=logW,
        log_What=_cum_log(logW, N, dead_step),
        weights=weights,
        ess=ess,
        attempts=attempts,
    )
    if dead_step is not None:
        run.status, run.dead_step = DEAD, dead_step
    else:
        run.output = int(local[-1, out])
        run.path = _trace(local, ancs, out)
    return run


# --------------------------------------------------------------------------- samplers


def smc_run(instance: ProblemInstance, config: SamplerConfig, rng: np.random.Generator, *, backend=None) -> ParticleRun:
    """Multinomial or systematic SMC; the output is drawn from the final weighted set.

    A step whose weights all vanish ends the run with ``status == "dead"``.
    """
    return _pass(instance, "smc", int(config.particles), config, rng, backend or _active)


def smc_option2(instance: ProblemInstance, config: SamplerConfig, rng: np.random.Generator, *, backend=None) -> ParticleRun:
    """SMC wrapped in an accept/restart loop.

    Accepts a completed run with probability min(What_H / (2 C_inf Vhat(root)), 1);
    dead runs count as rejections.  After ``max_restarts`` rejected attempts
    the returned run has ``status == "restart"``.
    """
    c_inf = resolve_c_inf(instance, config)
    log_thr = math.log(2.0 * c_inf * float(instance.prm[0][0]))
    backend = backend or _active
    for r in range(int(config.max_restarts)):
        run = _pass(instance, "smc", int(config.particles), config, rng, backend)
        if run.dead:
            continue
        p = math.exp(min(run.log_What[-1] - log_thr, 0.0))
        if rng.random() < p:
            run.restart_count, run.inner_runs = r, r + 1
            return run
    run.status, run.output, run.path = RESTART, None, None
    run.restart_count = run.inner_runs = int(config.max_restarts)
    return run


def smc_rs_run(instance: ProblemInstance, config: SamplerConfig, rng: np.random.Generator, *, backend=None) -> ParticleRun:
    """SMC with per-particle rejection sampling against the twisted kernel.

    Each attempt picks an ancestor uniformly, proposes a child from pi_ref
    and accepts with probability Vhat(child) / (eta Vhat(ancestor)).  In
    strict mode any ratio above one raises :class:`AcceptanceAboveOne`;
    otherwise acceptances are clamped and counted in ``warnings``.
    """
    N = int(config.particles)
    eta = resolve_eta(instance, config)
    backend = backend or _active
    dead, out, Wsum, attempts, overflow, parts, ancs = backend.smc_rs(instance.flat, N, eta, int(config.max_attempts), rng)
    if overflow and config.strict:
        raise AcceptanceAboveOne(f"{overflow} proposals had acceptance ratio above 1 at eta={eta!r}")
    dead_step = None if dead < 0 else int(dead)
    logW = _log(Wsum)
    local = _local(instance, parts)
    run = ParticleRun(
        N=N,
        parts=local,
        ancestors=ancs,
        log_W=logW,
        log_What=_cum_log(logW, N, dead_step),
        ess=np.full(instance.horizon, float(N)),
        attempts=attempts,
        warnings=int(overflow),
    )
    if dead_step is not None:
        run.status, run.dead_step = DEAD, dead_step
    else:
        run.output = int(local[-1, out])
        run.path = _trace(local, ancs, out)
    return run


def resolve_z_tilde(instance, config, rng, backend=None) -> float:
    zt = config.z_tilde
    if zt == "cinf":
        return resolve_c_inf(instance, config) * float(instance.flat.look[0]) * float(instance.prm[0][0])
    if zt == "pilot":
        pilot = _pass(instance, "dmc", int(config.particles), config, rng, backend or _active)
        if pilot.dead:
            raise AllParticlesDead("pilot pass died; cannot set Z_tilde")
        return 2.0 * math.exp(pilot.log_What[-1])
    return float(zt)


def dmc_restart_run(instance: ProblemInstance, config: SamplerConfig, rng: np.random.Generator, *, backend=None) -> ParticleRun:
    """Lookahead-resampled particle system with twisted proposals and restarts.

    Ancestors are resampled with weights sum_x' pi_ref(x'|x) Vhat(x') / Vhat(x);
    children come from the exactly normalized twisted row.  What_H is the
    product of the mean lookahead weights of the sets S_0..S_{H-1}, so its
    mean is Z.  The pass is accepted with probability min(What_H / Z_tilde, 1).
    """
    backend = backend or _active
    z_tilde = resolve_z_tilde(instance, config, rng, backend)
    log_z = math.log(z_tilde)
    warnings = 0
    run = None
    for r in range(int(config.max_restarts)):
        run = _pass(instance, "dmc", int(config.particles), config, rng, backend)
        if run.dead:
            continue
        ratio = run.log_What[-1] - log_z
        if ratio > 0:
            if config.strict:
                raise ZTildeTooSmall(f"What_H / Z_tilde = {math.exp(ratio)!r} > 1")
            warnings += 1
        if rng.random() < math.exp(min(ratio, 0.0)):
            run.restart_count, run.inner_runs, run.warnings = r, r + 1, warnings
            return run
    run.status, run.output, run.path = RESTART, None, None
    run.restart_count = run.inner_runs = int(config.max_restarts)
    run.warnings = warnings
    return run


def _rollouts(instance, n, twisted, rng, backend):
    ok, paths = (backend or _active).rollouts(instance.flat, int(n), bool(twisted), rng)
    off = instance.flat.offset
    return ok, paths - off[: instance.horizon + 1, None]


def action_level_sampler(instance: ProblemInstance, rng: np.random.Generator, *, backend=None) -> Trajectory:
    """One trajectory from the rows pi_ref(x'|x) Vhat(x') / sum pi_ref Vhat."""
    ok, paths = _rollouts(instance, 1, True, rng, backend)
    if not ok:
        raise DegenerateRow("twisted row with zero mass")
    return Trajectory(paths[:, 0].copy())


def sis_run(instance: ProblemInstance, N: int, rng: np.random.Generator, *, backend=None) -> ParticleRun:
    """N independent reference rollouts weighted by r*(x_H) / Vhat(root); no resampling."""
    N = int(N)
    _, paths = _rollouts(instance, N, False, rng, backend)
    H = instance.horizon
    root = float(instance.prm[0][0])
    means = np.array([np.cumsum(instance.prm[h][paths[h]])[-1] / root for h in range(H + 1)])
    with np.errstate(divide="ignore"):
        log_What = np.log(means / N)
    log_What[0] = 0.0
    w = instance.prm[H][paths[H]] / root
    cw = np.cumsum(w)
    run = ParticleRun(
        N=N,
        parts=paths[1:].copy(),
        ancestors=np.tile(np.arange(N, dtype=np.int64), (H, 1)),
        log_W=np.diff(log_What) + math.log(N),
        log_What=log_What,
        weights=w[None, :],
    )
    if not cw[-1] > 0:
        run.status, run.dead_step = DEAD, H - 1
        return run
    j = int(np.searchsorted(cw, rng.random() * cw[-1], side="right"))
    if j >= N:
        j = int(np.flatnonzero(w > 0)[-1])
    run.output = int(paths[H, j])
    run.path = paths[:, j].copy()
    return run


def best_of_n(instance: ProblemInstance, N: int, rng: np.random.Generator, *, backend=None) -> Trajectory:
    """Highest-reward of N reference rollouts; ties go to the lowest index."""
    _, paths = _rollouts(instance, N, False, rng, backend)
    j = int(np.argmax(instance.terminal_reward[paths[-1]]))
    return Trajectory(paths[:, j].copy())


def resample_indices(weights, N: int, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices for N offspring from unnormalized ``weights``."""
    from ._core import _pykernels

    cw = np.cumsum(np.asarray(weights, dtype=np.float64))
    if not cw[-1] > 0:
        raise AllParticlesDead("all weights are zero")
    return _pykernels._resample(cw, int(N), scheme == "systematic", rng)


def smc_ind_run(instance: ProblemInstance, N: int, rng: np.random.Generator, **kw):
    """Independent geometric branching process (see :mod:`pfguide.vgb`)."""
    from .vgb import smc_ind_run as _run

    return _run(instance, N, rng, **kw)

