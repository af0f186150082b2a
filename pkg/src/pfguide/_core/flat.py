"""Flat, picklable arrays for the sampling kernels.

All states get a global id ``offset[h] + local``.  Each state owns a CSR row
of outgoing edges holding the cumulative reference probability, the weight
``Vhat(child)/Vhat(state)`` and the cumulative twisted mass
``pi_ref * Vhat(child)/Vhat(state)``.  Level-H states have empty rows.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class FlatChain:
    horizon: int
    offset: np.ndarray  # (H+2,) global id of the first state of each level
    row_ptr: np.ndarray  # (S+1,)
    col: np.ndarray  # (E,) global target ids
    cum: np.ndarray  # (E,) row-local cumulative pi_ref
    wgt: np.ndarray  # (E,) Vhat(target) / Vhat(source)
    tcum: np.ndarray  # (E,) row-local cumulative pi_ref * wgt
    look: np.ndarray  # (S,) sum_row pi_ref * wgt
    vhat: np.ndarray  # (S,)

    @classmethod
    def from_instance(cls, instance) -> "FlatChain":
        chain = instance.chain
        sizes = np.array(chain.sizes, dtype=np.int64)
        offset = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        S = int(offset[-1])
        vhat = np.concatenate([np.asarray(v, dtype=np.float64) for v in instance.prm.values])
        deg = np.zeros(S, dtype=np.int64)
        cols, cums, wgts, tcums = [], [], [], []
        for h, k in enumerate(chain.kernels):
            deg[offset[h] : offset[h + 1]] = np.diff(k.indptr)
            src = k.source_of_edges()
            tgt = k.indices + offset[h + 1]
            v_src = vhat[src + offset[h]]
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(v_src > 0, vhat[tgt] / np.where(v_src > 0, v_src, 1.0), 0.0)
            cols.append(tgt)
            wgts.append(w)
            cums.append(_segment_cumsum(k.probs, k.indptr))
            tcums.append(_segment_cumsum(k.probs * w, k.indptr))
        row_ptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
        col = np.concatenate(cols) if cols else np.zeros(0, np.int64)
        tcum = np.concatenate(tcums) if tcums else np.zeros(0)
        look = np.zeros(S)
        has = deg > 0
        look[has] = tcum[row_ptr[1:][has] - 1]
        return cls(
            int(chain.horizon),
            offset,
            row_ptr,
            col.astype(np.int64),
            np.concatenate(cums),
            np.concatenate(wgts),
            tcum,
            look,
            vhat,
        )

    @property
    def n_states(self) -> int:
        return int(self.row_ptr.size - 1)

    def local(self, gid, level: int):
        return np.asarray(gid) - self.offset[level]

    @functools.cached_property
    def padded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Dense (S, maxdeg) views for the vectorized fallback.

        Returns (col, cum, wgt, tcum, deg); padding uses +inf cumulative
        values so that ``(cum <= x).sum(1)`` locates the first entry above x.
        """
        deg = np.diff(self.row_ptr)
        S = deg.size
        D = int(deg.max(initial=1)) or 1
        pc = np.zeros((S, D), dtype=np.int64)
        pcum = np.full((S, D), np.inf)
        pw = np.zeros((S, D))
        pt = np.full((S, D), np.inf)
        rows = np.repeat(np.arange(S), deg)
        pos = np.arange(self.col.size) - self.row_ptr[rows]
        pc[rows, pos] = self.col
        pcum[rows, pos] = self.cum
        pw[rows, pos] = self.wgt
        pt[rows, pos] = self.tcum
        return pc, pcum, pw, pt, deg


def _segment_cumsum(x: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Sequential cumulative sums restarted at each CSR row (grouped by degree)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    deg = np.diff(indptr)
    for d in np.unique(deg):
        if d == 0:
            continue
        starts = indptr[:-1][deg == d]
        idx = starts[:, None] + np.arange(d)
        out[idx] = np.cumsum(x[idx], axis=1)
    return out
