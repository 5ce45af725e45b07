"""Sequential-update solver for the stationary vector of block-Hessenberg chains.

The solver keeps, for the current truncation level ``n``, the bottom block
row ``[U*_{n,0}, ..., U*_{n,n}]`` of ``(-(n)Q)^{-1}`` as one dense
``M_n x (M_0 + ... + M_n)`` array, together with ``u*_n`` (its row sums).
Raising ``n`` by one costs a single ``M_n x M_{n-1}`` by ``M_{n-1} x
sum(M)`` product, so previous work is reused rather than recomputed.

Phase indices are 0-based throughout.
"""

from __future__ import annotations

import io
import itertools
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .block_chain import ROW_SUM_RTOL, BlockGenerator, LevelVector, level_offsets
from .errors import ContractError, ModelError, NumericalBreakdown

log = logging.getLogger(__name__)

PIVOT_RTOL = 1e-13
CLIP_BAND = 1e-12
TIE_RTOL = 1e-12
DEFAULT_EPSILON = 1e-8
DEFAULT_STEP = 10
COLUMN_CHUNK = 128


# -- state -------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverState:
    """Recursion state at truncation level ``n``.

    ``row`` holds ``U*_{n,k}`` for ``k = 0..n`` side by side; ``ustar`` is
    ``u*_n``.  ``last_checkpoint`` is ``(level, approximation)`` from the
    most recent checkpoint of a run, used to resume the stopping test.
    ``killed`` is ``sum_k U*_{n,k} kappa_k`` for generators whose rows lose
    mass at rate ``kappa`` (``None`` while no such row has been met).
    """

    n: int
    dims: tuple
    row: np.ndarray
    ustar: np.ndarray
    last_checkpoint: Optional[tuple] = None
    killed: Optional[np.ndarray] = None
    offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "offsets", level_offsets(self.dims))

    def U(self, k: int) -> np.ndarray:
        """``U*_{n,k}``, an ``M_n x M_k`` view."""
        return self.row[:, self.offsets[k]:self.offsets[k + 1]]

    @property
    def Ustar_nn(self) -> np.ndarray:
        return self.U(self.n)

    @property
    def Ustar_nk(self) -> list:
        return [self.U(k) for k in range(self.n + 1)]

    def with_checkpoint(self, level, approx) -> "SolverState":
        return SolverState(self.n, self.dims, self.row, self.ustar, (level, approx), self.killed)

    # -- serialization ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Self-describing binary form (``.npz``) at full double precision."""
        payload = dict(
            format=np.array("hessolve-state-v1"),
            n=np.array(self.n),
            dims=np.array(self.dims, dtype=np.int64),
            row=self.row,
            ustar=self.ustar,
        )
        if self.last_checkpoint is not None:
            level, approx = self.last_checkpoint
            payload["ckpt_level"] = np.array(level)
            payload["ckpt_data"] = approx.data
            payload["ckpt_dims"] = np.array(approx.dims, dtype=np.int64)
        if self.killed is not None:
            payload["killed"] = self.killed
        buf = io.BytesIO()
        np.savez(buf, **payload)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SolverState":
        with np.load(io.BytesIO(blob), allow_pickle=False) as z:
            if str(z["format"]) != "hessolve-state-v1":
                raise ContractError("not a hessolve solver state")
            ckpt = None
            if "ckpt_level" in z:
                ckpt = (int(z["ckpt_level"]),
                        LevelVector(z["ckpt_data"].copy(), tuple(int(m) for m in z["ckpt_dims"])))
            killed = z["killed"].copy() if "killed" in z else None
            return cls(int(z["n"]), tuple(int(m) for m in z["dims"]),
                       z["row"].copy(), z["ustar"].copy(), ckpt, killed)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SolverState":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# -- block kernel ---------------------------------------------------------------------


def _censored_inverse(bracket: np.ndarray, level: int) -> np.ndarray:
    """Invert a censored block by pivoted LU, rejecting numerically singular input.

    The result is the inverse of a nonsingular M-matrix and therefore
    nonnegative; round-off negatives inside a relative band are clipped.
    """
    scale = np.abs(bracket).max()
    if not np.isfinite(scale):
        raise NumericalBreakdown(f"nonfinite entries in censored block at level {level}", level)
    if scale == 0.0:
        raise ModelError(f"level {level} not transient under censoring (zero block)", level)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(bracket, check_finite=False)
    if np.abs(np.diag(lu)).min() < PIVOT_RTOL * scale:
        raise ModelError(
            f"level {level} not transient under censoring (singular censored block)", level
        )
    inv = scipy.linalg.lu_solve((lu, piv), np.eye(bracket.shape[0]), check_finite=False)
    return _clip_nonnegative(inv, level, "U*")


def _clip_nonnegative(a: np.ndarray, level: int, what: str) -> np.ndarray:
    band = CLIP_BAND * max(1.0, float(np.abs(a).max()))
    low = a.min()
    if low < -band:
        raise NumericalBreakdown(
            f"{what} at level {level} has negative entry {low:.3e} (band {band:.1e})", level
        )
    if low < 0:
        a = np.where(a < 0, 0.0, a)
    return a


def _exit_rates(gen: BlockGenerator, k: int, n: int) -> np.ndarray:
    """``sum_{m > n} Q_{k,m} e``: rate of jumping from level ``k`` past level ``n``."""
    out = np.zeros(gen.dim(k))
    for m in range(n + 1, k + gen.bandwidth + 1):
        b = gen.block_or_none(k, m)
        if b is not None:
            out += b.sum(axis=1)
    return out


def _deficit(gen: BlockGenerator, k: int) -> Optional[np.ndarray]:
    """Killing rates ``-(Q e)_k`` of a non-conservative row, or ``None``.

    Row sums within the validation tolerance count as zero.
    """
    total = np.zeros(gen.dim(k))
    scale = np.zeros(gen.dim(k))
    for l in range(max(0, k - 1), k + gen.bandwidth + 1):
        b = gen.block_or_none(k, l)
        if b is not None:
            total += b.sum(axis=1)
            scale = np.maximum(scale, np.abs(b).max(axis=1))
    kappa = np.where(-total > ROW_SUM_RTOL * scale, -total, 0.0)
    return kappa if kappa.any() else None


def _restore_diagonal(bracket, state, gen, n, down, kappa) -> None:
    """Recompute the diagonal of the censored block from its exact row sums.

    The block's row sums equal the rate of leaving levels ``0..n`` upward or
    by killing, censored through the lower levels.  That quantity is a sum
    of nonnegative terms, whereas forming the diagonal by subtraction cancels
    terms of size ``|Q_{n,n}|`` and the error compounds geometrically from
    level to level.
    """
    carried = np.zeros(state.row.shape[0]) if state.killed is None else state.killed.copy()
    for l in range(max(0, n - gen.bandwidth + 1), n):
        carried += state.U(l) @ _exit_rates(gen, l, n)
    target = _exit_rates(gen, n, n) + down @ carried
    if kappa is not None:
        target += kappa
    np.fill_diagonal(bracket, 0.0)
    np.fill_diagonal(bracket, target - bracket.sum(axis=1))


def init_state(gen: BlockGenerator) -> SolverState:
    """State at level 0: ``U*_{0,0} = (-Q_{0,0})^{-1}`` and ``u*_0 = U*_{0,0} e``."""
    U0 = _censored_inverse(-np.asarray(gen.block(0, 0)), 0)
    kappa = _deficit(gen, 0) if gen.bandwidth is not None else None
    killed = None if kappa is None else U0 @ kappa
    return SolverState(0, (gen.dim(0),), U0, U0.sum(axis=1), killed=killed)


def advance(state: SolverState, gen: BlockGenerator, threads: int = 1) -> SolverState:
    """Raise the truncation level by one.

    ``U*_n = (-Q_{n,n} - Q_{n,n-1} sum_{l<n} U*_{n-1,l} Q_{l,n})^{-1}``,
    ``U*_{n,k} = U*_n Q_{n,n-1} U*_{n-1,k}`` and
    ``u*_n = U*_n (e + Q_{n,n-1} u*_{n-1})``.
    """
    n = state.n + 1
    m = gen.dim(n)
    down = gen.block(n, n - 1)
    lo = 0 if gen.bandwidth is None else max(0, n - gen.bandwidth)
    acc = np.zeros((state.row.shape[0], m))
    for l in range(lo, n):
        b = gen.block_or_none(l, n)
        if b is not None:
            acc += state.U(l) @ b
    bracket = -gen.block(n, n) - down @ acc
    kappa = None
    if gen.bandwidth is not None:
        kappa = _deficit(gen, n)
        _restore_diagonal(bracket, state, gen, n, down, kappa)
    Un = _censored_inverse(bracket, n)
    W = Un @ down

    width = state.row.shape[1]
    row = np.empty((m, width + m))
    # The column partition is fixed so every thread count feeds BLAS the same
    # shapes; otherwise kernel selection can change the last bit.
    chunks = [slice(a, min(a + COLUMN_CHUNK, width)) for a in range(0, width, COLUMN_CHUNK)]

    def work(sl):
        np.matmul(W, state.row[:, sl], out=row[:, sl])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, chunks))
    else:
        for sl in chunks:
            work(sl)
    row[:, width:] = Un

    ustar = Un @ (1.0 + down @ state.ustar)
    if not np.all(np.isfinite(ustar)) or ustar.min() <= -CLIP_BAND:
        raise NumericalBreakdown(f"u*_{n} lost positivity: min {ustar.min():.3e}", n)
    if ustar.min() <= 0:
        raise NumericalBreakdown(f"u*_{n} has a zero entry", n)
    killed = None
    if kappa is not None or state.killed is not None:
        lost = np.zeros(m) if kappa is None else kappa
        if state.killed is not None:
            lost = lost + down @ state.killed
        killed = Un @ lost
    return SolverState(n, state.dims + (m,), row, ustar, state.last_checkpoint, killed)


def advance_to(state: SolverState, gen: BlockGenerator, n: int, threads: int = 1) -> SolverState:
    while state.n < n:
        state = advance(state, gen, threads)
    return state


def solve_state(gen: BlockGenerator, n: int, threads: int = 1) -> SolverState:
    return advance_to(init_state(gen), gen, n, threads)


# -- augmentation & approximation ---------------------------------------------------


def optimal_alpha(state: SolverState, y_n) -> tuple:
    """Closed-form minimizer of ``alpha y / alpha u*`` over probability vectors.

    Returns ``(j_star, alpha)`` with ``alpha`` the indicator of ``j_star``,
    the phase with the smallest ratio ``y(j) / u*(j)``.  Ratios within a
    relative ``1e-12`` of the minimum count as tied; ties go to the smallest
    phase index.
    """
    y = np.asarray(y_n, dtype=float)
    if y.shape != state.ustar.shape:
        raise ContractError(f"y has shape {y.shape}, expected {state.ustar.shape}")
    ratios = y / state.ustar
    best = ratios.min()
    j_star = int(np.flatnonzero(ratios <= best + TIE_RTOL * abs(best))[0])
    alpha = np.zeros_like(y)
    alpha[j_star] = 1.0
    return j_star, alpha


def _check_probability(alpha, width):
    a = np.asarray(alpha, dtype=float).ravel()
    if a.size != width:
        raise ContractError(f"augmentation vector has width {a.size}, expected {width}")
    if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
        raise ContractError("augmentation vector must be a probability vector")
    return a


def approximation(state: SolverState, alpha) -> LevelVector:
    """LBCL-augmented truncation approximation ``alpha U*_{n,k} / alpha u*_n``."""
    a = _check_probability(alpha, state.ustar.size)
    nz = np.flatnonzero(a)
    if nz.size == 1:
        j = nz[0]
        data = state.row[j] / state.ustar[j]
    else:
        data = (a @ state.row) / (a @ state.ustar)
    return LevelVector(data, state.dims)


def tv_distance(p, q) -> float:
    """Sum of absolute differences, the shorter vector padded with zeros."""
    a = p.data if isinstance(p, LevelVector) else np.asarray(p, dtype=float).ravel()
    b = q.data if isinstance(q, LevelVector) else np.asarray(q, dtype=float).ravel()
    if a.size < b.size:
        a, b = b, a
    return float(np.abs(a[: b.size] - b).sum() + np.abs(a[b.size:]).sum())


# -- schedules ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TruncationSchedule:
    """Increasing checkpoint levels ``n_1 < n_2 < ...``.

    ``arithmetic``: ``n_l = first + (l - 1) * step``.
    ``geometric``: ``n_l = max(n_{l-1} + 1, ceil(first * ratio**(l-1)))``.
    """

    kind: str = "arithmetic"
    step: int = DEFAULT_STEP
    ratio: float = 1.5
    first: Optional[int] = None
    cap: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("arithmetic", "geometric"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "arithmetic" and self.step < 1:
            raise ContractError("arithmetic schedule needs step >= 1")
        if self.kind == "geometric" and not self.ratio > 1:
            raise ContractError("geometric schedule needs ratio > 1")
        if self.start < 1:
            raise ContractError("first checkpoint must be >= 1")
        if self.cap is not None and self.cap < self.start:
            raise ContractError("cap must be at least the first checkpoint")

    @property
    def start(self) -> int:
        if self.first is not None:
            return int(self.first)
        return self.step if self.kind == "arithmetic" else DEFAULT_STEP

    @classmethod
    def parse(cls, text: str, cap=None) -> "TruncationSchedule":
        """Parse ``arithmetic:STEP`` or ``geometric:RATIO``."""
        kind, _, arg = text.partition(":")
        try:
            if kind == "arithmetic":
                return cls("arithmetic", step=int(arg or DEFAULT_STEP), cap=cap)
            if kind == "geometric":
                return cls("geometric", ratio=float(arg or 1.5), cap=cap)
        except ValueError as exc:
            raise ContractError(f"bad schedule {text!r}: {exc}") from None
        raise ContractError(f"bad schedule {text!r}")

    def levels(self):
        """Checkpoint levels, stopping after ``cap`` (inclusive) when set."""
        prev = 0
        for l in itertools.count():
            if self.kind == "arithmetic":
                n = self.start + l * self.step
            else:
                n = max(prev + 1, int(np.ceil(self.start * self.ratio ** l)))
            if self.cap is not None and n > self.cap:
                if prev < self.cap:
                    yield self.cap
                return
            yield n
            prev = n


# -- driver -----------------------------------------------------------------------------


@dataclass
class SolveResult:
    pi_hat: LevelVector
    stop_level: int
    converged: bool
    checkpoints: list = field(default_factory=list)
    j_star_history: list = field(default_factory=list)
    r_history: list = field(default_factory=list)
    tv_history: list = field(default_factory=list)
    bound: Optional[float] = None
    bound_history: list = field(default_factory=list)
    y_exact: bool = True
    state: Optional[SolverState] = field(default=None, repr=False)


def _iterate(gen, schedule, epsilon, choose, state=None, threads=1) -> SolveResult:
    if not 0 < epsilon < 1:
        raise ContractError("epsilon must lie in (0,1)")
    if state is None:
        state = init_state(gen)
    prev = state.last_checkpoint
    result = None
    for n in schedule.levels():
        if n <= state.n:
            continue
        state = advance_to(state, gen, n, threads)
        j_star, alpha, r, bound, exact = choose(state)
        approx = approximation(state, alpha)
        if result is None:
            result = SolveResult(approx, n, False)
        result.pi_hat, result.stop_level = approx, n
        result.checkpoints.append(n)
        result.j_star_history.append(j_star)
        result.r_history.append(r)
        result.bound_history.append(bound)
        result.bound = bound
        result.y_exact = result.y_exact and exact
        if prev is not None:
            tv = tv_distance(approx, prev[1])
            result.tv_history.append(tv)
            log.debug("n=%d j*=%s r=%s tv=%.3e", n, j_star, r, tv)
            if tv < epsilon:
                result.converged = True
        state = state.with_checkpoint(n, approx)
        prev = state.last_checkpoint
        if result.converged:
            break
    if result is None:
        raise ContractError("schedule produced no checkpoint beyond the starting state")
    result.state = state
    return result


def run(gen: BlockGenerator, cert, schedule: Optional[TruncationSchedule] = None,
        epsilon: float = DEFAULT_EPSILON, state: Optional[SolverState] = None,
        threads: int = 1) -> SolveResult:
    """Compute the stationary vector with LFP-optimal augmentation.

    At each checkpoint ``n_l`` the drift certificate gives ``y_n``, the
    optimal phase ``j*_n`` and the approximation; iteration stops once two
    consecutive checkpoints are closer than ``epsilon`` in total variation.
    A run that reaches ``schedule.cap`` first returns ``converged=False``.
    Passing a saved ``state`` resumes from it.
    """
    from . import bounds

    schedule = schedule or TruncationSchedule()

    def choose(st):
        y = bounds.compute_y(st, gen, cert)
        j_star, alpha = optimal_alpha(st, y.values)
        E = None
        if cert.beta is not None and cert.phi_bar is not None:
            E, _ = bounds.error_bound(st, cert, alpha, y.values)
        return j_star, alpha, bounds.residual(st, alpha, y.values), E, y.exact

    return _iterate(gen, schedule, epsilon, choose, state, threads)


def run_fixed_alpha(gen: BlockGenerator, schedule: Optional[TruncationSchedule] = None,
                    epsilon: float = DEFAULT_EPSILON,
                    alpha_rule: Optional[Callable] = None, cert=None,
                    state: Optional[SolverState] = None, threads: int = 1) -> SolveResult:
    """Like :func:`run` but with ``alpha_n = alpha_rule(n)`` supplied by the caller.

    No certificate is needed; if one is given, ``r_n`` is still recorded.
    Convergence to the stationary vector is not guaranteed.
    """
    from . import bounds

    schedule = schedule or TruncationSchedule()
    if alpha_rule is None:
        raise ContractError("alpha_rule is required")

    def choose(st):
        alpha = _check_probability(alpha_rule(st.n), st.ustar.size)
        nz = np.flatnonzero(alpha)
        j_star = int(nz[0]) if nz.size == 1 else None
        r, exact = None, True
        if cert is not None:
            y = bounds.compute_y(st, gen, cert)
            r, exact = bounds.residual(st, alpha, y.values), y.exact
        return j_star, alpha, r, None, exact

    return _iterate(gen, schedule, epsilon, choose, state, threads)


def indicator(width: int, j: int) -> np.ndarray:
    a = np.zeros(width)
    a[j] = 1.0
    return a
