"""Vectorized numpy kernels; reference semantics for the compiled core.

Uniform consumption order per call (shared with the compiled core):

* smc/dmc: for each step after the first, the resampling uniforms (N for
  multinomial, 1 for systematic); then N child uniforms; finally one output
  uniform.
* smc_rs: per step, blocks of 3B uniforms (B = particles still missing):
  ancestor, child and acceptance uniforms; then one output uniform.
* rollouts: n child uniforms per step.

Step totals are returned in linear scale; logarithms are taken by the caller
so both backends share one ``log`` implementation.

Ancestor and child lookups locate the first cumulative entry strictly above
``u * total``; a rounding overshoot falls back to the last positive entry.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def _children(fc, rows, u, twisted):
    pc, pcum, pw, pt, deg = fc.padded
    table = pt if twisted else pcum
    d = deg[rows]
    tot = table[rows, d - 1]
    x = u * tot
    j = np.count_nonzero(table[rows] <= x[:, None], axis=1)
    j = np.minimum(j, d - 1)
    return pc[rows, j], pw[rows, j], tot


def _last_increase(cw):
    prev = np.concatenate([[0.0], cw[:-1]])
    return int(np.flatnonzero(cw > prev)[-1])


def _resample(cw, N, systematic, rng):
    W = cw[-1]
    if systematic:
        u0 = rng.random()
        pos = (u0 + np.arange(N)) / N * W
    else:
        pos = rng.random(N) * W
    idx = np.searchsorted(cw, pos, side="right")
    over = idx >= cw.size
    if over.any():
        idx[over] = _last_increase(cw)
    return idx


def smc(fc, N, systematic, rng):
    """One SMC trial.

    Returns (dead_step, out, Wsum, ess, parts, ancs, weights): ``parts[h]``
    are global ids at level h+1, ``ancs[h]`` index the previous particle
    set, ``dead_step`` is -1 for a completed run.
    """
    H = fc.horizon
    parts = np.zeros((H, N), dtype=np.int64)
    ancs = np.zeros((H, N), dtype=np.int64)
    weights = np.zeros((H, N))
    Wsum = np.zeros(H)
    ess = np.zeros(H)
    prev = np.zeros(N, dtype=np.int64)
    anc = np.arange(N, dtype=np.int64)
    cw = None
    for h in range(H):
        if h > 0:
            anc = _resample(cw, N, systematic, rng)
            prev = parts[h - 1][anc]
        cur, w, _ = _children(fc, prev, rng.random(N), False)
        parts[h], ancs[h], weights[h] = cur, anc, w
        cw = np.cumsum(w)
        W = cw[-1]
        if not W > 0:
            return h, -1, Wsum, ess, parts, ancs, weights
        Wsum[h] = W
        ess[h] = W * W / np.cumsum(w * w)[-1]
    out = int(np.searchsorted(cw, rng.random() * cw[-1], side="right"))
    if out >= N:
        out = _last_increase(cw)
    return -1, out, Wsum, ess, parts, ancs, weights


def smc_rs(fc, N, eta, max_attempts, rng):
    """One SMC-RS trial.

    Returns (dead_step, out, Wsum, attempts, overflow, parts, ancs) where
    Wsum[h] is the summed one-step lookahead over the previous set.
    """
    H = fc.horizon
    parts = np.zeros((H, N), dtype=np.int64)
    ancs = np.zeros((H, N), dtype=np.int64)
    Wsum = np.zeros(H)
    attempts = np.zeros(H, dtype=np.int64)
    overflow = 0
    prev = np.zeros(N, dtype=np.int64)
    for h in range(H):
        s = np.cumsum(fc.look[prev])[-1]
        Wsum[h] = s
        acc = 0
        att = 0
        while acc < N:
            B = N - acc
            buf = rng.random(3 * B)
            a = np.minimum((buf[:B] * N).astype(np.int64), N - 1)
            cur, w, _ = _children(fc, prev[a], buf[B : 2 * B], False)
            ok = buf[2 * B :] * eta < w
            overflow += int(np.count_nonzero(w > eta))
            att += B
            k = int(np.count_nonzero(ok))
            parts[h, acc : acc + k] = cur[ok]
            ancs[h, acc : acc + k] = a[ok]
            acc += k
            if acc < N and att >= max_attempts:
                attempts[h] = att
                return h, -1, Wsum, attempts, overflow, parts, ancs
        attempts[h] = att
        prev = parts[h]
    out = min(int(rng.random() * N), N - 1)
    return -1, out, Wsum, attempts, overflow, parts, ancs


def dmc(fc, N, systematic, rng):
    """One pass of the lookahead-resampled, twisted-proposal particle system.

    Returns (dead_step, out, Wsum, parts, ancs); Wsum[h] is the
    summed lookahead over the set preceding step h+1.
    """
    H = fc.horizon
    parts = np.zeros((H, N), dtype=np.int64)
    ancs = np.zeros((H, N), dtype=np.int64)
    Wsum = np.zeros(H)
    prev = np.zeros(N, dtype=np.int64)
    anc = np.arange(N, dtype=np.int64)
    for h in range(H):
        cw = np.cumsum(fc.look[prev])
        if not cw[-1] > 0:
            return h, -1, Wsum, parts, ancs
        Wsum[h] = cw[-1]
        if h > 0:
            anc = _resample(cw, N, systematic, rng)
            prev = prev[anc]
        cur, _, _ = _children(fc, prev, rng.random(N), True)
        parts[h], ancs[h] = cur, anc
        prev = cur
    out = min(int(rng.random() * N), N - 1)
    return -1, out, Wsum, parts, ancs


def rollouts(fc, n, twisted, rng):
    """n independent trajectories; returns (ok, paths[(H+1), n] global ids)."""
    H = fc.horizon
    paths = np.zeros((H + 1, n), dtype=np.int64)
    for h in range(H):
        cur, _, tot = _children(fc, paths[h], rng.random(n), twisted)
        paths[h + 1] = cur
        if np.any(~(tot > 0)):
            return False, paths
    return True, paths
