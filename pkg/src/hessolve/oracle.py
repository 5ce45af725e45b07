"""Brute-force and closed-form references for checking the solver.

Nothing here touches the solver's recursions or its block factorization:
dense systems are solved by the elimination routine below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .block_chain import BlockGenerator, LevelVector, finite_prefix
from .errors import ModelError, StabilityError

SINGULAR_RTOL = 1e-13


def gauss_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` by Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=float)
    X = np.array(B, dtype=float)
    vector = X.ndim == 1
    if vector:
        X = X[:, None]
    n = A.shape[0]
    scale = np.abs(A).max() if A.size else 0.0
    for j in range(n):
        p = j + int(np.argmax(np.abs(A[j:, j])))
        if not abs(A[p, j]) > SINGULAR_RTOL * scale:
            raise ModelError(f"dense truncation is singular (column {j})")
        if p != j:
            A[[j, p]] = A[[p, j]]
            X[[j, p]] = X[[p, j]]
        f = A[j + 1:, j] / A[j, j]
        A[j + 1:, j:] -= np.outer(f, A[j, j:])
        X[j + 1:] -= np.outer(f, X[j])
    for j in range(n - 1, -1, -1):
        X[j] = (X[j] - A[j, j + 1:] @ X[j + 1:]) / A[j, j]
    return X[:, 0] if vector else X


def gauss_inverse(A) -> np.ndarray:
    return gauss_solve(A, np.eye(np.shape(A)[0]))


@dataclass
class DenseSolveOutput:
    pi_hat: LevelVector
    residual_norm: float


def dense_augmented_solve(gen: BlockGenerator, n: int, alpha_full) -> DenseSolveOutput:
    """``alpha (-(n)Q)^{-1} / alpha (-(n)Q)^{-1} e`` for any augmentation vector.

    ``alpha_full`` may put mass anywhere in levels ``0..n``.  The residual is
    ``|| pi (n)Qbar ||_inf`` for the augmented generator
    ``(n)Qbar = (n)Q - (n)Q e alpha``.
    """
    Q = finite_prefix(gen, n)
    alpha = np.asarray(alpha_full, dtype=float).ravel()
    if alpha.size != Q.shape[0]:
        raise ValueError(f"augmentation vector has {alpha.size} entries, need {Q.shape[0]}")
    x = gauss_solve(-Q.T, alpha)
    x = np.where((x < 0) & (x > -1e-12 * np.abs(x).max()), 0.0, x)
    pi = x / x.sum()
    Qbar = Q - np.outer(Q.sum(axis=1), alpha)
    return DenseSolveOutput(LevelVector(pi, gen.dims(n)), float(np.abs(pi @ Qbar).max()))


def last_block_alpha(gen: BlockGenerator, n: int, alpha_n) -> np.ndarray:
    """Embed a level-``n`` augmentation vector into the full truncation."""
    dims = gen.dims(n)
    full = np.zeros(sum(dims))
    full[sum(dims[:-1]):] = alpha_n
    return full


def censored_expected_sojourn(gen: BlockGenerator, n: int) -> np.ndarray:
    """``(-(n)Q)^{-1}``: expected time in each state before leaving levels ``0..n``."""
    X = gauss_inverse(-finite_prefix(gen, n))
    band = 1e-12 * max(1.0, np.abs(X).max())
    return np.where((X < 0) & (X > -band), 0.0, X)


def mm1_closed_form(lam: float, mu: float, k: int) -> float:
    if not lam < mu:
        raise StabilityError("M/M/1 needs lambda < mu")
    rho = lam / mu
    return (1.0 - rho) * rho ** k


def mminf_poisson(lam: float, mu: float, k: int) -> float:
    a = lam / mu
    return math.exp(-a + k * math.log(a) - math.lgamma(k + 1)) if a > 0 else float(k == 0)


def t_star_identity_check(gen: BlockGenerator, state, pi_ref: LevelVector) -> float:
    """Max deviation in ``pi_n (U*_n)^{-1} = sum_{l>n} pi_l Q_{l,n}``.

    ``(U*_n)^{-1}`` is recovered by re-inverting ``U*_n``; ``pi_ref`` must
    reach well beyond level ``n``.
    """
    n = state.n
    lhs = pi_ref.segment(n) @ gauss_inverse(state.Ustar_nn)
    rhs = np.zeros(gen.dim(n))
    for l in range(n + 1, pi_ref.n_levels):
        b = gen.block_or_none(l, n)
        if b is None:
            if l > n + 1:
                break
            continue
        rhs += pi_ref.segment(l) @ b
    return float(np.abs(lhs - rhs).max())


def random_generator(seed: int, max_dim: int = 3, bandwidth: int = 2,
                     density: float = 0.6, down_dominance: float = 2.0) -> BlockGenerator:
    """Seeded random ergodic upper block-Hessenberg generator.

    Level widths vary in ``1..max_dim``.  Up-blocks are sparse nonnegative
    with at least one positive entry per row in ``Q_{k,k+1}``; every row of
    the down block carries a rate ``down_dominance`` times the row's total
    up-rate, which keeps the chain positive recurrent.  Each block is drawn
    from its own ``(seed, k, l)`` stream so query order never matters.
    """
    def dim(k):
        return int(np.random.default_rng([seed, k, 0xD1]).integers(1, max_dim + 1))

    def draw(k, l):
        rng = np.random.default_rng([seed, k, l, 0xB7])
        mk, ml = dim(k), dim(l)
        a = rng.uniform(0.1, 1.0, (mk, ml)) * (rng.random((mk, ml)) < density)
        if l == k + 1:
            empty = ~a.any(axis=1)
            a[empty, rng.integers(0, ml, empty.sum())] = rng.uniform(0.1, 1.0, empty.sum())
        return a

    def up_total(k):
        return sum(draw(k, l).sum(axis=1) for l in range(k + 1, k + bandwidth + 1))

    def within(k):
        a = draw(k, k)
        np.fill_diagonal(a, 0.0)
        return a

    def down(k):
        rng = np.random.default_rng([seed, k, 0xD0])
        mk, ml = dim(k), dim(k - 1)
        w = rng.uniform(0.2, 1.0, (mk, ml)) * (rng.random((mk, ml)) < density)
        empty = ~w.any(axis=1)
        w[empty, rng.integers(0, ml, empty.sum())] = 1.0
        target = down_dominance * up_total(k) + rng.uniform(0.5, 1.5, mk)
        return w * (target / w.sum(axis=1))[:, None]

    def block(k, l):
        if l > k:
            return draw(k, l)
        if l == k - 1:
            return down(k)
        if l == k:
            a = within(k)
            out = a.sum(axis=1) + up_total(k) + (down(k).sum(axis=1) if k > 0 else 0.0)
            return a - np.diag(out)
        return None

    return BlockGenerator(dim, block, bandwidth=bandwidth, name=f"random(seed={seed})")
