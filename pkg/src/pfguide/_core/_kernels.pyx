# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled trial kernels.

Same contracts and uniform consumption order as ``_pykernels``; uniforms are
pulled one at a time from the generator's bit generator, which yields the
same stream as ``Generator.random(n)``.
"""
import numpy as np
cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from numpy.random cimport bitgen_t

cnp.import_array()

NAME = "cython"

ctypedef cnp.int64_t i64


cdef inline bitgen_t* _bitgen(object rng) except NULL:
    return <bitgen_t*> PyCapsule_GetPointer(rng.bit_generator.capsule, "BitGenerator")


cdef inline double _u(bitgen_t* bg) noexcept nogil:
    return bg.next_double(bg.state)


cdef inline i64 _first_above(const double[::1] table, i64 a, i64 b, double x) noexcept nogil:
    # first k in [a, b) with table[k] > x, else b - 1
    cdef i64 k
    for k in range(a, b):
        if table[k] > x:
            return k
    return b - 1


cdef inline i64 _search(double* cw, i64 n, double pos) noexcept nogil:
    # searchsorted(side="right") with overshoot mapped to the last increase
    cdef i64 lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if cw[mid] <= pos:
            lo = mid + 1
        else:
            hi = mid
    if lo >= n:
        lo = n - 1
        while lo > 0 and not (cw[lo] > cw[lo - 1]):
            lo -= 1
    return lo


cdef inline void _resample(bitgen_t* bg, double* cw, i64 N, bint systematic, i64* out) noexcept nogil:
    cdef double W = cw[N - 1], u0
    cdef i64 i
    if systematic:
        u0 = _u(bg)
        for i in range(N):
            out[i] = _search(cw, N, (u0 + <double>i) / <double>N * W)
    else:
        for i in range(N):
            out[i] = _search(cw, N, _u(bg) * W)


def smc(fc, i64 N, bint systematic, rng):
    cdef i64 H = fc.horizon
    cdef const i64[::1] row_ptr = fc.row_ptr
    cdef const i64[::1] col = fc.col
    cdef const double[::1] cum = fc.cum
    cdef const double[::1] wgt = fc.wgt
    parts_a = np.zeros((H, N), dtype=np.int64)
    ancs_a = np.zeros((H, N), dtype=np.int64)
    weights_a = np.zeros((H, N))
    Wsum_a = np.zeros(H)
    ess_a = np.zeros(H)
    cdef i64[:, ::1] parts = parts_a
    cdef i64[:, ::1] ancs = ancs_a
    cdef double[:, ::1] weights = weights_a
    cdef double[::1] Wsum = Wsum_a
    cdef double[::1] ess = ess_a
    cdef double[::1] cw = np.zeros(N)
    cdef i64[::1] anc = np.arange(N, dtype=np.int64)
    cdef i64[::1] prev = np.zeros(N, dtype=np.int64)
    cdef bitgen_t* bg = _bitgen(rng)
    cdef i64 h, i, s, a, b, k, dead = -1, out = -1
    cdef double x, w, acc, sq
    with rng.bit_generator.lock, nogil:
        for h in range(H):
            if h > 0:
                _resample(bg, &cw[0], N, systematic, &anc[0])
                for i in range(N):
                    prev[i] = parts[h - 1, anc[i]]
            acc = 0.0
            sq = 0.0
            for i in range(N):
                s = prev[i]
                a = row_ptr[s]
                b = row_ptr[s + 1]
                x = _u(bg) * cum[b - 1]
                k = _first_above(cum, a, b, x)
                parts[h, i] = col[k]
                ancs[h, i] = anc[i]
                w = wgt[k]
                weights[h, i] = w
                acc = acc + w
                cw[i] = acc
                sq = sq + w * w
            if not acc > 0:
                dead = h
                break
            Wsum[h] = acc
            ess[h] = acc * acc / sq
        if dead < 0:
            out = _search(&cw[0], N, _u(bg) * cw[N - 1])
    return dead, out, Wsum_a, ess_a, parts_a, ancs_a, weights_a


def smc_rs(fc, i64 N, double eta, i64 max_attempts, rng):
    cdef i64 H = fc.horizon
    cdef const i64[::1] row_ptr = fc.row_ptr
    cdef const i64[::1] col = fc.col
    cdef const double[::1] cum = fc.cum
    cdef const double[::1] wgt = fc.wgt
    cdef const double[::1] look = fc.look
    parts_a = np.zeros((H, N), dtype=np.int64)
    ancs_a = np.zeros((H, N), dtype=np.int64)
    Wsum_a = np.zeros(H)
    att_a = np.zeros(H, dtype=np.int64)
    cdef i64[:, ::1] parts = parts_a
    cdef i64[:, ::1] ancs = ancs_a
    cdef double[::1] Wsum = Wsum_a
    cdef i64[::1] attempts = att_a
    cdef i64[::1] prev = np.zeros(N, dtype=np.int64)
    cdef double[::1] buf = np.zeros(3 * N)
    cdef bitgen_t* bg = _bitgen(rng)
    cdef i64 h, i, j, s, a, b, k, B, acc, att, anc, dead = -1, out = -1, overflow = 0
    cdef double x, w, tot
    with rng.bit_generator.lock, nogil:
        for h in range(H):
            tot = 0.0
            for i in range(N):
                tot = tot + look[prev[i]]
            Wsum[h] = tot
            acc = 0
            att = 0
            while acc < N:
                B = N - acc
                for j in range(3 * B):
                    buf[j] = _u(bg)
                for j in range(B):
                    anc = <i64>(buf[j] * N)
                    if anc > N - 1:
                        anc = N - 1
                    s = prev[anc]
                    a = row_ptr[s]
                    b = row_ptr[s + 1]
                    x = buf[B + j] * cum[b - 1]
                    k = _first_above(cum, a, b, x)
                    w = wgt[k]
                    if w > eta:
                        overflow += 1
                    if buf[2 * B + j] * eta < w:
                        parts[h, acc] = col[k]
                        ancs[h, acc] = anc
                        acc += 1
                att += B
                if acc < N and att >= max_attempts:
                    dead = h
                    break
            attempts[h] = att
            if dead >= 0:
                break
            for i in range(N):
                prev[i] = parts[h, i]
        if dead < 0:
            out = <i64>(_u(bg) * N)
            if out > N - 1:
                out = N - 1
    return dead, out, Wsum_a, att_a, overflow, parts_a, ancs_a


def dmc(fc, i64 N, bint systematic, rng):
    cdef i64 H = fc.horizon
    cdef const i64[::1] row_ptr = fc.row_ptr
    cdef const i64[::1] col = fc.col
    cdef const double[::1] tcum = fc.tcum
    cdef const double[::1] look = fc.look
    parts_a = np.zeros((H, N), dtype=np.int64)
    ancs_a = np.zeros((H, N), dtype=np.int64)
    Wsum_a = np.zeros(H)
    cdef i64[:, ::1] parts = parts_a
    cdef i64[:, ::1] ancs = ancs_a
    cdef double[::1] Wsum = Wsum_a
    cdef double[::1] cw = np.zeros(N)
    cdef i64[::1] anc = np.arange(N, dtype=np.int64)
    cdef i64[::1] prev = np.zeros(N, dtype=np.int64)
    cdef i64[::1] tmp = np.zeros(N, dtype=np.int64)
    cdef bitgen_t* bg = _bitgen(rng)
    cdef i64 h, i, s, a, b, k, dead = -1, out = -1
    cdef double x, acc
    with rng.bit_generator.lock, nogil:
        for h in range(H):
            acc = 0.0
            for i in range(N):
                acc = acc + look[prev[i]]
                cw[i] = acc
            if not acc > 0:
                dead = h
                break
            Wsum[h] = acc
            if h > 0:
                _resample(bg, &cw[0], N, systematic, &anc[0])
                for i in range(N):
                    tmp[i] = prev[anc[i]]
                for i in range(N):
                    prev[i] = tmp[i]
            for i in range(N):
                s = prev[i]
                a = row_ptr[s]
                b = row_ptr[s + 1]
                x = _u(bg) * tcum[b - 1]
                k = _first_above(tcum, a, b, x)
                parts[h, i] = col[k]
                ancs[h, i] = anc[i]
            for i in range(N):
                prev[i] = parts[h, i]
        if dead < 0:
            out = <i64>(_u(bg) * N)
            if out > N - 1:
                out = N - 1
    return dead, out, Wsum_a, parts_a, ancs_a


def rollouts(fc, i64 n, bint twisted, rng):
    cdef i64 H = fc.horizon
    cdef const i64[::1] row_ptr = fc.row_ptr
    cdef const i64[::1] col = fc.col
    cdef const double[::1] table = fc.tcum if twisted else fc.cum
    paths_a = np.zeros((H + 1, n), dtype=np.int64)
    cdef i64[:, ::1] paths = paths_a
    cdef bitgen_t* bg = _bitgen(rng)
    cdef i64 h, i, s, a, b, k
    cdef bint ok = True
    cdef double x, tot
    with rng.bit_generator.lock, nogil:
        for h in range(H):
            for i in range(n):
                s = paths[h, i]
                a = row_ptr[s]
                b = row_ptr[s + 1]
                tot = table[b - 1]
                if not tot > 0:
                    ok = False
                x = _u(bg) * tot
                k = _first_above(table, a, b, x)
                paths[h + 1, i] = col[k]
            if not ok:
                break
    return ok, paths_a
