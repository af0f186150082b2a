"""Layered Markov chains, value tables and guided-generation instances.

States are addressed by ``(level, dense index)``; labels are for display only.
Kernels are stored as one CSR block per step.  Constructors only coerce
shapes and dtypes; semantic checks live in :func:`validate_instance` so that
broken instances can be represented, inspected and reported.
"""
from __future__ import annotations

import enum
import functools
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

ROOT_LABEL = "⊥"
ROW_TOL = 1e-12
DEFAULT_TREE_BUDGET = 2**20


class ChainError(Exception):
    """Base class for chain-model errors."""


class BudgetExceeded(ChainError):
    pass


class InvalidSpec(ChainError):
    pass


class ParseError(ChainError):
    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        ctx = []
        if line is not None:
            ctx.append(f"line {line}")
        if field is not None:
            ctx.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(ctx)})" if ctx else message)
        self.line = line
        self.field = field


class ValidationFailed(ChainError):
    def __init__(self, report: list["Violation"]):
        self.report = report
        head = "; ".join(str(v) for v in report[:5])
        more = f" (+{len(report) - 5} more)" if len(report) > 5 else ""
        super().__init__(f"instance failed validation: {head}{more}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StepKernel:
    """Sparse transition block from level h to level h+1 (CSR layout)."""

    indptr: np.ndarray
    indices: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indptr", _frozen(np.asarray(self.indptr, dtype=np.int64).copy()))
        object.__setattr__(self, "indices", _frozen(np.asarray(self.indices, dtype=np.int64).copy()))
        object.__setattr__(self, "probs", _frozen(np.asarray(self.probs, dtype=np.float64).copy()))
        if self.indptr.ndim != 1 or self.indptr.size < 1:
            raise InvalidSpec("indptr must be a non-empty vector")
        if self.indices.shape != self.probs.shape:
            raise InvalidSpec("indices and probs must have equal length")
        if self.indptr[0] != 0 or self.indptr[-1] != self.indices.size or np.any(np.diff(self.indptr) < 0):
            raise InvalidSpec("indptr is not a valid CSR offset vector")

    @property
    def n_sources(self) -> int:
        return self.indptr.size - 1

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.indptr[i], self.indptr[i + 1]
        return self.indices[a:b], self.probs[a:b]

    def source_of_edges(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_sources, dtype=np.int64), np.diff(self.indptr))

    def row_sums(self) -> np.ndarray:
        return np.array([math.fsum(self.probs[a:b]) for a, b in zip(self.indptr[:-1], self.indptr[1:])])

    def push(self, mass: np.ndarray, n_targets: int, values: np.ndarray | None = None) -> np.ndarray:
        """Push a level-h measure forward: ``out[j] = sum_i mass[i] P[i,j] (values[j])``."""
        w = mass[self.source_of_edges()] * self.probs
        if values is not None:
            w = w * values[self.indices]
        return np.bincount(self.indices, weights=w, minlength=n_targets)[:n_targets]

    def pull(self, values: np.ndarray) -> np.ndarray:
        """Conditional expectation ``out[i] = sum_j P[i,j] values[j]``."""
        out = np.zeros(self.n_sources)
        if self.indices.size == 0:
            return out
        contrib = self.probs * values[self.indices]
        nonempty = np.diff(self.indptr) > 0
        starts = self.indptr[:-1][nonempty]
        out[nonempty] = np.add.reduceat(contrib, starts)
        return out

    def to_lists(self) -> list[list[list]]:
        rows = []
        for i in range(self.n_sources):
            idx, p = self.row(i)
            rows.append([[int(t), float(q)] for t, q in zip(idx, p)])
        return rows

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[tuple[int, float]]]) -> "StepKernel":
        indptr = [0]
        indices: list[int] = []
        probs: list[float] = []
        for r in rows:
            for t, q in r:
                indices.append(int(t))
                probs.append(float(q))
            indptr.append(len(indices))
        return cls(np.array(indptr), np.array(indices, dtype=np.int64), np.array(probs, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class LayeredChain:
    """States ``X_0..X_H`` with one sparse kernel per step."""

    levels: tuple[tuple[str, ...], ...]
    kernels: tuple[StepKernel, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(tuple(str(s) for s in lv) for lv in self.levels))
        object.__setattr__(self, "kernels", tuple(self.kernels))

    @property
    def horizon(self) -> int:
        return len(self.levels) - 1

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(lv) for lv in self.levels)

    @functools.cached_property
    def marginals(self) -> tuple[np.ndarray, ...]:
        """Untilted level marginals pi_h."""
        out = [np.ones(1)]
        for h, k in enumerate(self.kernels):
            out.append(k.push(out[-1], self.sizes[h + 1]))
        return tuple(_frozen(m) for m in out)

    @functools.cached_property
    def parents(self) -> tuple[np.ndarray, ...] | None:
        """Parent index per state when the chain is a tree, else None."""
        par = [np.full(1, -1, dtype=np.int64)]
        for h, k in enumerate(self.kernels):
            n = self.sizes[h + 1]
            p = np.full(n, -1, dtype=np.int64)
            src = k.source_of_edges()
            keep = k.probs > 0
            tgt = k.indices[keep]
            if np.bincount(tgt, minlength=n)[:n].max(initial=0) > 1:
                return None
            p[tgt] = src[keep]
            par.append(_frozen(p))
        return tuple(par)

    def equals(self, other: "LayeredChain") -> bool:
        if self.levels != other.levels or len(self.kernels) != len(other.kernels):
            return False
        return all(
            np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices) and np.array_equal(a.probs, b.probs)
            for a, b in zip(self.kernels, other.kernels)
        )


class ValueTag(str, enum.Enum):
    EXACT_VSTAR = "EXACT_VSTAR"
    PRM = "PRM"


@dataclass(frozen=True, eq=False)
class ValueTable:
    values: tuple[np.ndarray, ...]
    tag: ValueTag

    def __post_init__(self):
        vals = tuple(_frozen(np.asarray(v, dtype=np.float64).copy()) for v in self.values)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "tag", ValueTag(self.tag))

    def __getitem__(self, h: int) -> np.ndarray:
        return self.values[h]

    def __len__(self) -> int:
        return len(self.values)

    def scaled_level(self, h: int, c: float) -> "ValueTable":
        vals = list(self.values)
        vals[h] = vals[h] * c
        return ValueTable(tuple(vals), self.tag)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    chain: LayeredChain
    terminal_reward: np.ndarray
    prm: ValueTable
    name: str = "instance"

    def __post_init__(self):
        object.__setattr__(self, "terminal_reward", _frozen(np.asarray(self.terminal_reward, dtype=np.float64).copy()))

    @property
    def horizon(self) -> int:
        return self.chain.horizon

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.chain.sizes

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "H": self.horizon,
            "levels": [list(lv) for lv in self.chain.levels],
            "kernels": [k.to_lists() for k in self.chain.kernels],
            "terminal_reward": [float(x) for x in self.terminal_reward],
            "prm": [[float(x) for x in lv] for lv in self.prm.values],
        }

    @functools.cached_property
    def content_hash(self) -> str:
        blob = json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"), allow_nan=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @functools.cached_property
    def flat(self):
        """Flattened arrays consumed by the sampling kernels (built once)."""
        from ._core.flat import FlatChain

        return FlatChain.from_instance(self)

    def with_prm(self, prm: ValueTable, name: str | None = None) -> "ProblemInstance":
        return ProblemInstance(self.chain, self.terminal_reward, prm, name or self.name)

    def equals(self, other: "ProblemInstance") -> bool:
        return (
            self.name == other.name
            and self.chain.equals(other.chain)
            and np.array_equal(self.terminal_reward, other.terminal_reward)
            and self.prm.tag == other.prm.tag
            and len(self.prm) == len(other.prm)
            and all(np.array_equal(a, b) for a, b in zip(self.prm.values, other.prm.values))
        )


# --------------------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    code: str
    level: int | None = None
    index: int | None = None
    detail: str = ""

    def __str__(self) -> str:
        where = ""
        if self.level is not None:
            where = f" at level {self.level}" + (f" state {self.index}" if self.index is not None else "")
        return f"{self.code}{where}" + (f": {self.detail}" if self.detail else "")


def _finite_nonneg(values: np.ndarray) -> np.ndarray:
    return np.isfinite(values) & (values >= 0)


def validate_instance(instance: ProblemInstance) -> list[Violation]:
    """Return every violated structural or semantic invariant (empty when valid)."""
    out: list[Violation] = []
    chain = instance.chain
    H = chain.horizon
    sizes = chain.sizes
    if H < 1:
        out.append(Violation("horizon must be positive", detail=f"H={H}"))
        return out
    if sizes[0] != 1:
        out.append(Violation("level 0 must have exactly one state", 0, detail=f"{sizes[0]} states"))
        return out
    if len(chain.kernels) != H:
        out.append(Violation("kernel count mismatch", detail=f"{len(chain.kernels)} kernels for H={H}"))
        return out

    kernels_ok = True
    for h, k in enumerate(chain.kernels):
        if k.n_sources != sizes[h]:
            out.append(Violation("kernel row count mismatch", h, detail=f"{k.n_sources} rows for {sizes[h]} states"))
            kernels_ok = False
            continue
        bad_t = np.flatnonzero((k.indices < 0) | (k.indices >= sizes[h + 1]))
        for e in bad_t:
            i = int(np.searchsorted(k.indptr, e, side="right") - 1)
            out.append(Violation("target index out of range", h, i, f"target {int(k.indices[e])}"))
            kernels_ok = False
        bad_p = np.flatnonzero(~_finite_nonneg(k.probs))
        for e in bad_p:
            i = int(np.searchsorted(k.indptr, e, side="right") - 1)
            out.append(Violation("negative or non-finite probability", h, i, f"{k.probs[e]!r}"))
        sums = k.row_sums()
        for i in np.flatnonzero(~(np.abs(sums - 1.0) <= ROW_TOL)):
            out.append(Violation("row not stochastic", h, int(i), f"sum={sums[i]!r}"))
            kernels_ok = False

    r = instance.terminal_reward
    if r.shape != (sizes[H],):
        out.append(Violation("terminal reward length mismatch", H, detail=f"{r.shape} vs {sizes[H]}"))
        return out
    for i in np.flatnonzero(~_finite_nonneg(r)):
        out.append(Violation("negative or non-finite terminal reward", H, int(i)))

    prm = instance.prm
    if prm.tag is not ValueTag.PRM:
        out.append(Violation("prm table must be tagged PRM", detail=prm.tag.value))
    if len(prm) != H + 1:
        out.append(Violation("prm level count mismatch", detail=f"{len(prm)} levels for H={H}"))
        return out
    for h in range(H + 1):
        v = prm[h]
        if v.shape != (sizes[h],):
            out.append(Violation("prm length mismatch", h, detail=f"{v.shape} vs {sizes[h]}"))
            return out
        for i in np.flatnonzero(~_finite_nonneg(v)):
            out.append(Violation("negative or non-finite prm entry", h, int(i)))
    if not abs(prm[0][0] - 1.0) <= ROW_TOL:
        out.append(Violation("prm root not normalized to 1", 0, 0, f"{prm[0][0]!r}"))
    for i in np.flatnonzero(~(np.abs(prm[H] - r) <= ROW_TOL)):
        out.append(Violation("prm≠r* at level H", H, int(i), f"prm={prm[H][i]!r} r*={r[i]!r}"))

    if not kernels_ok:
        return out
    marg = _reach_mass(chain)
    if not np.any((marg[H] > 0) & (r > 0)):
        out.append(Violation("terminal reward identically zero on reachable support", H))
    for h in range(H):
        for i in np.flatnonzero((marg[h] > 0) & ~(prm[h] > 0)):
            out.append(Violation("prm not positive on reachable state", h, int(i)))
    return out


def _reach_mass(chain: LayeredChain) -> list[np.ndarray]:
    # Recomputed rather than cached: the chain may hold invalid probabilities.
    out = [np.ones(1)]
    for h, k in enumerate(chain.kernels):
        p = np.where(np.isfinite(k.probs) & (k.probs > 0), 1.0, 0.0)
        reach = np.bincount(k.indices, weights=p * (out[-1][k.source_of_edges()] > 0), minlength=chain.sizes[h + 1])
        out.append(reach[: chain.sizes[h + 1]])
    return out


def require_valid(instance: ProblemInstance) -> ProblemInstance:
    report = validate_instance(instance)
    if report:
        raise ValidationFailed(report)
    return instance


# --------------------------------------------------------------------------- tree chains


def prefix_label(prefix: Sequence[int], alphabet_size: int) -> str:
    if len(prefix) == 0:
        return ROOT_LABEL
    if alphabet_size <= 10:
        return "".join(str(a) for a in prefix)
    return ".".join(str(a) for a in prefix)


def tree_prefixes(alphabet_size: int, h: int) -> np.ndarray:
    """All length-h prefixes in dense (lexicographic) order, one per row."""
    if h == 0:
        return np.zeros((1, 0), dtype=np.int64)
    idx = np.arange(alphabet_size**h, dtype=np.int64)
    digits = np.empty((idx.size, h), dtype=np.int64)
    for j in range(h - 1, -1, -1):
        digits[:, j] = idx % alphabet_size
        idx = idx // alphabet_size
    return digits


def build_tree_chain(
    alphabet_size: int,
    horizon: int,
    kernel_spec="uniform",
    *,
    budget: int = DEFAULT_TREE_BUDGET,
    concentration: float = 1.0,
) -> LayeredChain:
    """Build the autoregressive tree over ``alphabet_size`` symbols.

    ``kernel_spec`` is ``"uniform"``, an integer seed for Dirichlet rows,
    a callable mapping a prefix tuple to the next-symbol probabilities, or a
    mapping from prefix tuples to rows.  The child ``a`` of the state with
    dense index ``i`` has dense index ``i * alphabet_size + a``.
    """
    k = int(alphabet_size)
    if k < 1 or horizon < 1:
        raise InvalidSpec("alphabet_size and horizon must be positive")
    if k**horizon > budget:
        raise BudgetExceeded(f"{k}^{horizon} final states exceed budget {budget}")

    levels = [tuple(prefix_label(p, k) for p in tree_prefixes(k, h)) for h in range(horizon + 1)]
    rng = np.random.default_rng(kernel_spec) if isinstance(kernel_spec, (int, np.integer)) and not isinstance(kernel_spec, bool) else None
    kernels = []
    for h in range(horizon):
        n = k**h
        if kernel_spec == "uniform":
            probs = np.full((n, k), 1.0 / k)
        elif rng is not None:
            probs = rng.dirichlet(np.full(k, concentration), size=n)
        elif isinstance(kernel_spec, str) or not (callable(kernel_spec) or isinstance(kernel_spec, Mapping)):
            raise InvalidSpec(f"unknown kernel spec {kernel_spec!r}")
        else:
            lookup = kernel_spec.__getitem__ if isinstance(kernel_spec, Mapping) else kernel_spec
            probs = np.array([np.asarray(lookup(tuple(int(a) for a in p)), dtype=np.float64) for p in tree_prefixes(k, h)])
        probs = np.asarray(probs, dtype=np.float64).reshape(n, k)
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise InvalidSpec(f"step {h}: negative or non-finite conditional probability")
        sums = probs.sum(axis=1)
        if np.any(sums <= 0):
            raise InvalidSpec(f"step {h}: conditional row with zero mass")
        if rng is not None:
            probs = probs / sums[:, None]
        bad = np.flatnonzero(np.abs(np.array([math.fsum(r) for r in probs]) - 1.0) > ROW_TOL)
        if bad.size:
            raise InvalidSpec(f"step {h}: row {int(bad[0])} does not normalize")
        targets = np.arange(n * k, dtype=np.int64).reshape(n, k)
        keep = probs > 0
        indptr = np.concatenate([[0], np.cumsum(keep.sum(axis=1))])
        kernels.append(StepKernel(indptr, targets[keep], probs[keep]))
    return LayeredChain(tuple(levels), tuple(kernels))


# --------------------------------------------------------------------------- file I/O


def _reject_constant(name: str):
    raise ValueError(f"non-finite constant {name} is not permitted")


def _require(obj: dict, key: str, kind, path: str):
    if key not in obj:
        raise ParseError("missing field", field=f"{path}{key}")
    val = obj[key]
    if not isinstance(val, kind) or isinstance(val, bool):
        raise ParseError(f"expected {getattr(kind, '__name__', kind)}", field=f"{path}{key}")
    return val


def _num(x, fld: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ParseError("expected a number", field=fld)
    return float(x)


def instance_from_json_obj(obj) -> ProblemInstance:
    if not isinstance(obj, dict):
        raise ParseError("top-level value must be an object", field="$")
    name = _require(obj, "name", str, "")
    H = _require(obj, "H", int, "")
    levels = _require(obj, "levels", list, "")
    kernels = _require(obj, "kernels", list, "")
    reward = _require(obj, "terminal_reward", list, "")
    prm = _require(obj, "prm", list, "")
    if len(levels) != H + 1:
        raise ParseError(f"expected {H + 1} levels, found {len(levels)}", field="levels")
    for h, lv in enumerate(levels):
        if not isinstance(lv, list):
            raise ParseError("expected a list of labels", field=f"levels[{h}]")
    steps = []
    for h, step in enumerate(kernels):
        if not isinstance(step, list):
            raise ParseError("expected a list of rows", field=f"kernels[{h}]")
        rows = []
        for i, row in enumerate(step):
            if not isinstance(row, list):
                raise ParseError("expected a list of [target, prob] pairs", field=f"kernels[{h}][{i}]")
            pairs = []
            for j, pair in enumerate(row):
                fld = f"kernels[{h}][{i}][{j}]"
                if not (isinstance(pair, list) and len(pair) == 2):
                    raise ParseError("expected [target, prob]", field=fld)
                t, q = pair
                if isinstance(t, bool) or not isinstance(t, int):
                    raise ParseError("target index must be an integer", field=fld)
                pairs.append((t, _num(q, fld)))
            rows.append(pairs)
        steps.append(StepKernel.from_rows(rows))
    r = np.array([_num(x, f"terminal_reward[{i}]") for i, x in enumerate(reward)], dtype=np.float64)
    tables = []
    for h, lv in enumerate(prm):
        if not isinstance(lv, list):
            raise ParseError("expected a list of numbers", field=f"prm[{h}]")
        tables.append(np.array([_num(x, f"prm[{h}][{i}]") for i, x in enumerate(lv)], dtype=np.float64))
    chain = LayeredChain(tuple(tuple(lv) for lv in levels), tuple(steps))
    return ProblemInstance(chain, r, ValueTable(tuple(tables), ValueTag.PRM), name)


def load_instance(path: str | os.PathLike) -> ProblemInstance:
    """Parse and validate an instance file; refuses invalid data."""
    try:
        text = open(path, encoding="utf-8").read()
    except UnicodeDecodeError as exc:
        raise ParseError(f"file is not UTF-8: {exc}") from exc
    try:
        obj = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    except ValueError as exc:
        raise ParseError(str(exc)) from exc
    return require_valid(instance_from_json_obj(obj))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_instance(path: str | os.PathLike, instance: ProblemInstance) -> None:
    require_valid(instance)
    text = json.dumps(instance.to_json_obj(), allow_nan=False, ensure_ascii=False)
    atomic_write_text(path, text + "\n")


def instance_io(path, mode: str, instance: ProblemInstance | None = None):
    if mode == "load":
        return load_instance(path)
    if mode == "save":
        if instance is None:
            raise ValueError("save requires an instance")
        save_instance(path, instance)
        return None
    raise ValueError(f"unknown mode {mode!r}")

