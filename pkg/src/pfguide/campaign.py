"""Seeded trial campaigns, summaries, sweeps and coupling reports.

Trial ``t`` of a campaign with master seed ``s`` always draws from
``trial_rng(s, t)``; workers receive contiguous trial ranges and results are
concatenated in trial order, so outputs do not depend on the worker count.
"""
from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing as mp
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import samplers as S
from . import vgb as V
from .chain import ProblemInstance, atomic_write_text
from .oracle import backward_induction, coverage_constants, divergence_report, theory_bounds, tilted_marginals
from .stats import InsufficientData, from_codes, gof_chi_square

ALGOS = ("smc", "smc-opt2", "smc-rs", "dmc-restart", "sis", "bon", "action-rs")
DEAD_CODE, RESTART_CODE = -1, -2

SUMMARY_COLUMNS = (
    "instance",
    "instance_hash",
    "algo",
    "N",
    "trials",
    "seed",
    "tv_to_pistar",
    "tv_halfwidth",
    "mean_logWhat",
    "dead_rate",
    "restart_mean",
    "attempts_mean",
)
BOUND_COLUMNS = ("thm_3_2", "prop_B1", "thm_3_4", "thm_B4", "thm_3_6")


class CampaignError(ValueError):
    pass


@dataclass(frozen=True)
class CampaignConfig:
    instance_path: str | None
    algo: str
    sampler: S.SamplerConfig = field(default_factory=S.SamplerConfig)
    trials: int = 1
    seed: int = 0
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise CampaignError(f"unknown algorithm {self.algo!r}; expected one of {ALGOS}")
        if int(self.trials) < 1:
            raise CampaignError("trials must be >= 1")
        if int(self.workers) < 1:
            raise CampaignError("workers must be >= 1")
        if int(self.seed) < 0:
            raise CampaignError("seed must be nonnegative")


@dataclass
class TrialBatch:
    """Per-trial results in trial order.

    ``outputs`` holds the final local state, -1 for dead runs and -2 for
    exhausted restart loops.  ``log_what`` rows are log What_0..What_H (nan
    for samplers without a weight estimate).
    """

    outputs: np.ndarray
    log_what: np.ndarray
    restarts: np.ndarray
    attempts: np.ndarray
    warnings: np.ndarray
    paths: np.ndarray | None = None

    @property
    def trials(self) -> int:
        return int(self.outputs.size)

    @classmethod
    def concat(cls, parts: Sequence["TrialBatch"]) -> "TrialBatch":
        paths = None if parts[0].paths is None else np.concatenate([p.paths for p in parts])
        return cls(
            *(np.concatenate([getattr(p, f) for p in parts]) for f in ("outputs", "log_what", "restarts", "attempts", "warnings")),
            paths=paths,
        )


# --------------------------------------------------------------------------- one trial


def _one(instance: ProblemInstance, algo: str, cfg: S.SamplerConfig, rng, backend):
    """(code, log_what row or None, restarts, attempts, warnings, path or None)."""
    N = int(cfg.particles)
    if algo == "bon":
        t = S.best_of_n(instance, N, rng, backend=backend)
        return t.output, None, 0, 1, 0, t.path
    if algo == "action-rs":
        t = S.action_level_sampler(instance, rng, backend=backend)
        return t.output, None, 0, 1, 0, t.path
    if algo == "smc":
        run = S.smc_run(instance, cfg, rng, backend=backend)
        attempts = 1
    elif algo == "smc-opt2":
        run = S.smc_option2(instance, cfg, rng, backend=backend)
        attempts = run.inner_runs
    elif algo == "smc-rs":
        run = S.smc_rs_run(instance, cfg, rng, backend=backend)
        attempts = int(run.attempts.sum())
    elif algo == "dmc-restart":
        run = S.dmc_restart_run(instance, cfg, rng, backend=backend)
        attempts = run.inner_runs
    else:
        run = S.sis_run(instance, N, rng, backend=backend)
        attempts = 1
    if run.dead:
        code = DEAD_CODE
    elif run.restarted:
        code = RESTART_CODE
    else:
        code = run.output
    return code, run.log_What, run.restart_count, attempts, run.warnings, run.path


def run_trials(
    instance: ProblemInstance,
    algo: str,
    cfg: S.SamplerConfig,
    seed: int,
    start: int,
    stop: int,
    *,
    keep_paths: bool = False,
    backend=None,
) -> TrialBatch:
    T = stop - start
    H = instance.horizon
    out = np.empty(T, dtype=np.int64)
    lw = np.full((T, H + 1), math.nan)
    rs = np.zeros(T, dtype=np.int64)
    at = np.zeros(T, dtype=np.int64)
    wn = np.zeros(T, dtype=np.int64)
    paths = np.full((T, H + 1), -1, dtype=np.int64) if keep_paths else None
    for i in range(T):
        code, row, r, a, w, p = _one(instance, algo, cfg, S.trial_rng(seed, start + i), backend)
        out[i], rs[i], at[i], wn[i] = code, r, a, w
        if row is not None:
            lw[i] = row
        if keep_paths and p is not None:
            paths[i] = p
    return TrialBatch(out, lw, rs, at, wn, paths)


# --------------------------------------------------------------------------- worker pool

_WORKER_STATE: dict = {}


def _init_worker(instance):
    _WORKER_STATE["instance"] = instance


def _worker_call(fn_name: str, args: tuple):
    return _TASKS[fn_name](_WORKER_STATE["instance"], *args)


def _chunks(total: int, workers: int) -> list[tuple[int, int]]:
    n = max(1, min(total, workers * 4))
    edges = np.linspace(0, total, n + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _fan_out(instance: ProblemInstance, fn_name: str, total: int, workers: int, extra: tuple) -> list:
    """Run ``_TASKS[fn_name](instance, *extra, start, stop)`` over trial chunks, in order."""
    ranges = _chunks(total, workers)
    if workers <= 1 or len(ranges) == 1:
        return [_TASKS[fn_name](instance, *extra, a, b) for a, b in ranges]
    ctx = mp.get_context("fork" if sys.platform.startswith("linux") else "spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker, initargs=(instance,)) as ex:
        futs = [ex.submit(_worker_call, fn_name, extra + (a, b)) for a, b in ranges]
        return [f.result() for f in futs]


def _trial_task(instance, algo, cfg, seed, keep_paths, start, stop):
    return run_trials(instance, algo, cfg, seed, start, stop, keep_paths=keep_paths)


def run_campaign(
    instance: ProblemInstance,
    algo: str,
    cfg: S.SamplerConfig,
    trials: int,
    seed: int,
    *,
    workers: int = 1,
    keep_paths: bool = False,
) -> TrialBatch:
    if algo not in ALGOS:
        raise CampaignError(f"unknown algorithm {algo!r}")
    parts = _fan_out(instance, "trials", int(trials), int(workers), (algo, cfg, int(seed), keep_paths))
    return TrialBatch.concat(parts)


# --------------------------------------------------------------------------- summaries


def pistar_final(instance: ProblemInstance) -> np.ndarray:
    dists, _ = tilted_marginals(instance, backward_induction(instance))
    return dists[-1].probs


def summarize(instance: ProblemInstance, batch: TrialBatch, algo: str, N: int, seed: int) -> dict:
    """One summary row (ordered as SUMMARY_COLUMNS) plus JSON-only extras."""
    H = instance.horizon
    emp = from_codes(batch.outputs, instance.sizes[H], int(batch.restarts.sum()), instance.content_hash)
    tv, hw = emp.tv_to(pistar_final(instance))
    final = batch.log_what[:, H]
    fin = final[np.isfinite(final)]
    row = {
        "instance": instance.name,
        "instance_hash": instance.content_hash,
        "algo": algo,
        "N": int(N),
        "trials": batch.trials,
        "seed": int(seed),
        "tv_to_pistar": tv,
        "tv_halfwidth": hw,
        "mean_logWhat": math.fsum(fin) / fin.size if fin.size else math.nan,
        "dead_rate": emp.dead_runs / emp.trials,
        "restart_mean": math.fsum(batch.restarts) / batch.trials,
        "attempts_mean": math.fsum(batch.attempts) / batch.trials,
    }
    extras = {
        "counts": emp.counts.tolist(),
        "dead_runs": emp.dead_runs,
        "restarted_runs": emp.restarted_runs,
        "warnings": int(batch.warnings.sum()),
        "distribution_with_failures": emp.distribution_with_failures().tolist(),
        "pistar": pistar_final(instance).tolist(),
    }
    return {"row": row, "extras": extras}


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
    return x


def dumps(obj) -> str:
    return json.dumps(_json_safe(obj), indent=1, ensure_ascii=False, allow_nan=False) + "\n"


def write_outputs(out: str, csv_text: str, payload: dict) -> tuple[str, str]:
    """Write ``<out>`` (CSV) and ``<out minus .csv>.json`` atomically."""
    json_path = (out[:-4] if out.endswith(".csv") else out) + ".json"
    atomic_write_text(json_path, dumps(payload))
    atomic_write_text(out, csv_text)
    return out, json_path


# --------------------------------------------------------------------------- sweeps


def sweep(
    instance: ProblemInstance,
    algos: Sequence[str],
    N_list: Sequence[int],
    base: S.SamplerConfig,
    trials: int,
    seed: int,
    *,
    workers: int = 1,
    M: float = 2.0,
    bound_eta: float | None = None,
    progress: Callable[[str], None] | None = None,
) -> list[dict]:
    """One row per (algo, N) with the theory-bound columns attached."""
    vstar = backward_induction(instance)
    report = divergence_report(instance, (M,), vstar=vstar)
    cov = coverage_constants(instance, (), vstar=vstar)
    rows = []
    for algo in algos:
        for N in N_list:
            cfg = _with_particles(base, N)
            batch = run_campaign(instance, algo, cfg, trials, seed, workers=workers)
            row = summarize(instance, batch, algo, N, seed)["row"]
            b = theory_bounds(instance, N, M, bound_eta, report=report, cov=cov)
            row.update(
                thm_3_2=b.thm_3_2, prop_B1=b.prop_B1_sharp, thm_3_4=b.thm_3_4, thm_B4=b.thm_B4, thm_3_6=b.thm_3_6
            )
            rows.append(row)
            if progress:
                progress(f"{algo} N={N} tv={row['tv_to_pistar']:.4f}")
    return rows


def _with_particles(cfg: S.SamplerConfig, N: int) -> S.SamplerConfig:
    d = dict(cfg.__dict__)
    d["particles"] = int(N)
    return S.SamplerConfig(**d)


# --------------------------------------------------------------------------- coupling


def _coupling_task(instance, N, seed, step_cap, start, stop):
    """Per-trial state counts of both processes; walk rows are -1 when capped."""
    S_tot = int(instance.flat.n_states)
    ind = np.zeros((stop - start, S_tot), dtype=np.int32)
    walk = np.zeros((stop - start, S_tot), dtype=np.int32)
    capped = np.zeros(stop - start, dtype=bool)
    for i, t in enumerate(range(start, stop)):
        r_ind = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0, t))))
        r_walk = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, t))))
        ind[i] = np.concatenate(V.smc_ind_counts(instance, N, r_ind))
        c = V.vgb_counts(instance, N, r_walk, step_cap)
        if c is None:
            capped[i] = True
            walk[i] = -1
        else:
            walk[i] = np.concatenate(c)
    return ind, walk, capped


def _pair_task(instance, N, seed, start, stop):
    return sum(
        a.canonical() == b.canonical() for a, b in (V.coupled_pair(instance, N, seed, p) for p in range(start, stop))
    )


_TASKS = {"trials": _trial_task, "coupling": _coupling_task, "pairs": _pair_task}


def _histogram(col: np.ndarray) -> dict[int, int]:
    return {int(k): int(v) for k, v in sorted(Counter(col.tolist()).items())}


def coupling_report(
    instance: ProblemInstance,
    N: int,
    trials: int,
    seed: int,
    *,
    pairs: int = 1000,
    workers: int = 1,
    step_cap: int = V.DEFAULT_STEP_CAP,
    alpha: float = 0.01,
) -> dict:
    """Constructive coupling plus per-label count-distribution GOF tests.

    A level's p-value is the Bonferroni-adjusted minimum over its labels
    (m * min p); it passes when above ``alpha / levels``.
    """
    V._walker(instance)  # raises NotATree early
    H = instance.horizon
    off = instance.flat.offset
    equal = sum(_fan_out(instance, "pairs", int(pairs), workers, (int(N), int(seed)))) if pairs else 0
    parts = _fan_out(instance, "coupling", int(trials), workers, (int(N), int(seed), int(step_cap))) if trials else []
    if parts:
        ind = np.concatenate([p[0] for p in parts])
        walk = np.concatenate([p[1] for p in parts])
        capped = np.concatenate([p[2] for p in parts])
    else:
        ind = walk = np.zeros((0, int(instance.flat.n_states)), dtype=np.int32)
        capped = np.zeros(0, dtype=bool)
    walk = walk[~capped]
    levels_n = H + 1
    thr = alpha / levels_n
    rows, levels = [], []
    for h in range(levels_n):
        ps = []
        for x in range(instance.sizes[h]):
            g = int(off[h] + x)
            hv, hi = _histogram(walk[:, g]), _histogram(ind[:, g])
            keys = sorted(set(hv) | set(hi))
            p = None
            if len(keys) == 1 and walk.shape[0] and ind.shape[0]:
                p = 1.0  # both point masses on the same value
            else:
                try:
                    p = gof_chi_square([hv.get(k, 0) for k in keys], [hi.get(k, 0) for k in keys])
                except InsufficientData:
                    p = None
            if p is not None:
                ps.append(p)
            rows.append(
                {"level": h, "label": instance.chain.levels[h][x], "count_histogram_vgb": hv, "count_histogram_smcind": hi, "gof_pvalue": p}
            )
        lp = None if not ps else min(1.0, len(ps) * min(ps))
        levels.append({"level": h, "pvalue": lp, "tests": len(ps), "pass": lp is None or lp > thr})
    return {
        "instance": instance.name,
        "instance_hash": instance.content_hash,
        "N": int(N),
        "trials": int(trials),
        "seed": int(seed),
        "alpha": alpha,
        "threshold": thr,
        "constructive": {"pairs": int(pairs), "equal": int(equal)},
        "cap_hits": int(capped.sum()),
        "cap_hit_rate": float(capped.mean()) if capped.size else 0.0,
        "levels": levels,
        "rows": rows,
        "pass": bool(equal == pairs and all(lv["pass"] for lv in levels)),
    }


COUPLING_COLUMNS = ("level", "label", "gof_pvalue")
