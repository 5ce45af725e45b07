"""Block-partitioned generators of upper block-Hessenberg Markov chains.

A generator is described lazily: ``block(k, l)`` returns the rate block
between level ``k`` and level ``l``.  Only the structural nonzeros
(``l >= k - 1`` and, for a finite bandwidth ``B``, ``l <= k + B``) are ever
requested by the solver, so infinite chains need no materialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import CapabilityError, ContractError, QueryError, StructuralError

ROW_SUM_RTOL = 1e-10
PROB_ATOL = 1e-12


def _readonly(a):
    a.setflags(write=False)
    return a


class BlockGenerator:
    """Lazy, immutable description of an upper block-Hessenberg generator.

    Parameters
    ----------
    level_dim : int or callable
        Number of phases ``M_k`` at level ``k`` (constant or ``k -> int``).
    block_fn : callable
        ``(k, l) -> array_like or None``.  ``None`` means the zero block.
    bandwidth : int or None
        Finite upper bandwidth ``B`` (``Q[k, l] = 0`` for ``l > k + B``), or
        ``None`` when the bandwidth is unbounded.  Unbounded generators need
        a ``tail_hook`` for anything that looks past the truncation level.
    tail_hook : callable, optional
        ``(k, n, v) -> vector`` returning ``sum_{l > n} Q[k, l] v(l)``.
    tail_exact : bool
        Whether ``tail_hook`` returns the exact tail or only an upper bound.
    max_level : int, optional
        Last level of a finite chain.  Row queries above it raise
        :class:`QueryError`; blocks into columns above it are zero.
    """

    def __init__(
        self,
        level_dim,
        block_fn: Callable,
        bandwidth: Optional[int] = 1,
        tail_hook: Optional[Callable] = None,
        tail_exact: bool = True,
        max_level: Optional[int] = None,
        name: str = "generator",
    ):
        if bandwidth is not None and bandwidth < 0:
            raise ContractError("bandwidth must be nonnegative")
        self._dim_fn = (lambda k, m=int(level_dim): m) if np.isscalar(level_dim) else level_dim
        self._block_fn = block_fn
        self.bandwidth = bandwidth
        self.tail_hook = tail_hook
        self.tail_exact = tail_exact
        self.max_level = max_level
        self.name = name
        self._dim = lru_cache(maxsize=None)(self._compute_dim)
        self._block = lru_cache(maxsize=65536)(self._compute_block)

    def __repr__(self):
        bw = "unbounded" if self.bandwidth is None else self.bandwidth
        return f"<BlockGenerator {self.name!r} bandwidth={bw}>"

    # -- queries -----------------------------------------------------------

    def _check_level(self, k):
        if k < 0:
            raise QueryError(f"negative level {k}")
        if self.max_level is not None and k > self.max_level:
            raise QueryError(
                f"level {k} lies beyond the last described level {self.max_level}"
            )

    def _compute_dim(self, k):
        self._check_level(k)
        m = int(self._dim_fn(k))
        if m <= 0:
            raise StructuralError(f"level {k} has nonpositive dimension {m}")
        return m

    def dim(self, k: int) -> int:
        return self._dim(k)

    def _compute_block(self, k, l):
        if self.bandwidth is not None and l > k + self.bandwidth:
            return None
        self._check_level(k)
        if self.max_level is not None and l > self.max_level:
            return None  # a finite chain has no levels above its last one
        self._check_level(l)
        raw = self._block_fn(k, l)
        if raw is None:
            return None
        a = np.array(raw, dtype=float, copy=True)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        expected = (self.dim(k), self.dim(l))
        if a.shape != expected:
            raise StructuralError(
                f"block ({k},{l}) has shape {a.shape}, expected {expected}"
            )
        return _readonly(a)

    def block_or_none(self, k: int, l: int):
        """Block ``Q[k, l]`` or ``None`` when it is a structural zero."""
        return self._block(k, l)

    def block(self, k: int, l: int) -> np.ndarray:
        b = self._block(k, l)
        if b is None:
            return np.zeros((self.dim(k), self.dim(l)))
        return b

    def dims(self, n: int) -> tuple:
        return tuple(self.dim(k) for k in range(n + 1))

    def upper_range(self, k: int, n: int) -> range:
        """Column levels ``l`` with ``k - 1 <= l <= n`` that may be nonzero."""
        hi = n if self.bandwidth is None else min(n, k + self.bandwidth)
        return range(max(0, k - 1), hi + 1)

    def scaled(self, c: float) -> "BlockGenerator":
        """Generator with every rate multiplied by ``c`` (a change of time unit)."""
        if not c > 0:
            raise ContractError("time rescaling factor must be positive")
        fn = self._block_fn
        hook = self.tail_hook

        def block_fn(k, l):
            b = fn(k, l)
            return None if b is None else c * np.asarray(b, dtype=float)

        scaled_hook = None if hook is None else (lambda k, n, v: c * np.asarray(hook(k, n, v)))
        return BlockGenerator(
            self._dim_fn, block_fn, self.bandwidth, scaled_hook, self.tail_exact,
            self.max_level, name=f"{self.name}*{c:g}",
        )


# -- level vectors -------------------------------------------------------------


@dataclass(frozen=True)
class LevelVector:
    """Row vector partitioned level-wise; ``dims[k]`` is the width of level ``k``."""

    data: np.ndarray
    dims: tuple
    kind: str = "probability"
    offsets: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float).ravel()
        dims = tuple(int(m) for m in self.dims)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "offsets", tuple(np.concatenate([[0], np.cumsum(dims)]).astype(int)))
        if self.offsets[-1] != data.size:
            raise ContractError(
                f"level widths sum to {self.offsets[-1]} but vector has {data.size} entries"
            )
        if self.kind not in ("probability", "sub-probability", "signed"):
            raise ContractError(f"unknown interpretation {self.kind!r}")
        if self.kind != "signed" and np.any(data < 0):
            raise ContractError("probability vector has negative entries")
        total = data.sum()
        if self.kind == "probability" and abs(total - 1.0) > PROB_ATOL:
            raise ContractError(f"probability vector sums to {total!r}")
        if self.kind == "sub-probability" and total > 1.0 + PROB_ATOL:
            raise ContractError(f"sub-probability vector sums to {total!r}")

    @classmethod
    def from_segments(cls, segments: Sequence, kind="probability"):
        segs = [np.atleast_1d(np.asarray(s, dtype=float)) for s in segments]
        return cls(np.concatenate(segs) if segs else np.zeros(0), tuple(s.size for s in segs), kind)

    @property
    def n_levels(self) -> int:
        return len(self.dims)

    @property
    def top_level(self) -> int:
        return len(self.dims) - 1

    def segment(self, k: int) -> np.ndarray:
        return self.data[self.offsets[k]:self.offsets[k + 1]]

    @property
    def segments(self) -> list:
        return [self.segment(k) for k in range(self.n_levels)]

    def marginals(self) -> np.ndarray:
        """Level marginals ``pi_k e``."""
        return np.add.reduceat(self.data, self.offsets[:-1]) if self.data.size else np.zeros(0)

    def __len__(self):
        return self.data.size


# -- validation ------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    level: int
    phase: Optional[int]
    col_level: Optional[int]
    value: float
    message: str


@dataclass
class ValidationReport:
    n_max: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return f"valid prefix through level {self.n_max}"
        return "\n".join(v.message for v in self.violations)


def _ones(gen):
    return lambda l: np.ones(gen.dim(l))


def validate_generator(gen: BlockGenerator, n_max: int) -> ValidationReport:
    """Check the structural assumptions on the rows of levels ``0..n_max``.

    Reports nonzero blocks below the first subdiagonal, sign violations,
    nonfinite rates and non-conservative rows (``|row sum|`` above
    ``1e-10`` times the largest rate in the row).
    """
    if n_max < 0:
        raise ContractError("n_max must be nonnegative")
    report = ValidationReport(n_max)
    add = report.violations.append
    for k in range(n_max + 1):
        try:
            mk = gen.dim(k)
            for l in range(0, k - 1):
                b = gen.block_or_none(k, l)
                if b is not None and np.any(b != 0):
                    add(Violation("hessenberg", k, None, l, float(np.abs(b).max()),
                                  f"sub-sub-diagonal block nonzero at ({k},{l})"))
            hi = k + gen.bandwidth if gen.bandwidth is not None else k
            row_sum = np.zeros(mk)
            row_scale = np.zeros(mk)
            for l in range(max(0, k - 1), hi + 1):
                b = gen.block_or_none(k, l)
                if b is None:
                    continue
                if not np.all(np.isfinite(b)):
                    i = int(np.argwhere(~np.isfinite(b))[0][0])
                    add(Violation("finite", k, i, l, float("nan"),
                                  f"nonfinite rate at level {k} phase {i} block ({k},{l})"))
                    continue
                off = b.copy()
                if l == k:
                    diag = np.diag(b)
                    for i in np.flatnonzero(diag > 0):
                        add(Violation("sign", k, int(i), l, float(diag[i]),
                                      f"positive diagonal {diag[i]:g} at level {k} phase {i}"))
                    np.fill_diagonal(off, 0.0)
                neg = np.argwhere(off < 0)
                for i, j in neg:
                    add(Violation("sign", k, int(i), l, float(off[i, j]),
                                  f"negative rate {off[i, j]:g} at level {k} phase {i} "
                                  f"to ({l},{j})"))
                row_sum += b.sum(axis=1)
                row_scale = np.maximum(row_scale, np.abs(b).max(axis=1))
            if gen.bandwidth is None:
                if gen.tail_hook is None or not gen.tail_exact:
                    continue  # conservativity cannot be decided without an exact tail
                tail = np.asarray(gen.tail_hook(k, k, _ones(gen)), dtype=float)
                row_sum += tail
                row_scale = np.maximum(row_scale, np.abs(tail))
            for i in range(mk):
                if abs(row_sum[i]) > ROW_SUM_RTOL * row_scale[i]:
                    add(Violation("row-sum", k, i, None, float(row_sum[i]),
                                  f"row sum {row_sum[i]:g} at level {k} phase {i}"))
        except StructuralError as exc:
            add(Violation("dimension", k, None, None, float("nan"), str(exc)))
    return report


def finite_prefix(gen: BlockGenerator, n: int) -> np.ndarray:
    """Dense northwest-corner truncation over levels ``0..n`` (level-major order)."""
    if n < 0:
        raise ContractError("truncation level must be nonnegative")
    dims = gen.dims(n)
    off = np.concatenate([[0], np.cumsum(dims)])
    Q = np.zeros((off[-1], off[-1]))
    for k in range(n + 1):
        for l in gen.upper_range(k, n):
            b = gen.block_or_none(k, l)
            if b is not None:
                Q[off[k]:off[k + 1], off[l]:off[l + 1]] = b
    return Q


class TailSum(NamedTuple):
    values: np.ndarray
    exact: bool


def tail_weighted_sum(gen: BlockGenerator, v: Callable, k: int, n: int) -> TailSum:
    """``sum_{l > n} Q[k, l] v(l)`` for a level function ``v(l) -> vector``.

    Exact when the bandwidth is finite.  Otherwise the generator's tail hook
    is consulted and the result inherits its exactness flag.
    """
    if k > n:
        raise ContractError(f"tail sum needs k <= n (got k={k}, n={n})")
    if gen.bandwidth is not None:
        acc = np.zeros(gen.dim(k))
        for l in range(n + 1, k + gen.bandwidth + 1):
            b = gen.block_or_none(k, l)
            if b is not None:
                acc += b @ np.asarray(v(l), dtype=float)
        return TailSum(acc, True)
    if gen.tail_hook is None:
        raise CapabilityError(
            f"{gen.name}: unbounded upper bandwidth; supply a tail_hook returning "
            "sum_{l>n} Q[k,l] v_l (exact or an upper bound)"
        )
    values = np.asarray(gen.tail_hook(k, n, v), dtype=float).reshape(gen.dim(k))
    return TailSum(values, bool(gen.tail_exact))


def level_offsets(dims) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(dims)]).astype(int)
