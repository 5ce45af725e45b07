"""Drift certificates, the LFP objective and computable error diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .block_chain import BlockGenerator, LevelVector, tail_weighted_sum
from .errors import CertificateError, ContractError, StabilityError

DRIFT_RTOL = 1e-9
B_HEADROOM = 1.1

V_KINDS = ("affine", "log", "geometric", "custom")


@dataclass(frozen=True)
class DriftCertificate:
    """Witness ``(v, b, C)`` of ``Q v <= -e + b 1_C``.

    ``v`` is given by a closed form selected by ``kind``:

    * ``affine``: ``v(k, i) = a + slope * k + offsets[i]``
    * ``log``: ``v(k, i) = scale * log(k + e)``
    * ``geometric``: ``v(k, i) = scale * ratio**k * weights[i]``
    * ``custom``: ``v(k, i) = func(k, dim)[i]`` (not serializable)

    ``C`` is the set of states ``(k, i)`` with ``k <= C_levels`` and ``i``
    in ``C_phases`` (all phases when ``None``).  ``beta`` and ``phi_bar``
    are optional user inputs that switch on the full error bound.
    """

    kind: str
    params: dict
    b: float
    C_levels: int
    C_phases: Optional[tuple] = None
    v_inf_floor: Optional[float] = None
    beta: Optional[float] = None
    phi_bar: Optional[float] = None
    func: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in V_KINDS:
            raise ContractError(f"unknown Lyapunov kind {self.kind!r}")
        if self.kind == "custom" and self.func is None:
            raise ContractError("custom certificate needs func")
        if not self.b > 0:
            raise ContractError("drift constant b must be positive")
        if self.C_levels < 0 or (self.C_phases is not None and not self.C_phases):
            raise ContractError("the finite set C must be nonempty")
        if self.v_inf_floor is None:
            object.__setattr__(self, "v_inf_floor", self._floor())
        if not self.v_inf_floor > 0:
            raise ContractError("inf v must be bounded away from zero")

    def _floor(self):
        p = self.params
        if self.kind == "affine":
            return p.get("a", 0.0) + min(p.get("offsets") or [0.0])
        if self.kind == "log":
            return p.get("scale", 1.0)
        if self.kind == "geometric":
            return p.get("scale", 1.0) * min(p.get("weights") or [1.0])
        raise ContractError("custom certificate needs an explicit v_inf_floor")

    def level(self, k: int, dim: int) -> np.ndarray:
        """``v_k`` as a vector of width ``dim``."""
        p = self.params
        if self.kind == "affine":
            base = p.get("a", 0.0) + p.get("slope", 0.0) * k
            return base + _phase_vector(p.get("offsets"), dim, 0.0)
        if self.kind == "log":
            return np.full(dim, p.get("scale", 1.0) * math.log(k + math.e))
        if self.kind == "geometric":
            base = p.get("scale", 1.0) * p["ratio"] ** k
            return base * _phase_vector(p.get("weights"), dim, 1.0)
        return np.asarray(self.func(k, dim), dtype=float).reshape(dim)

    def value(self, k: int, i: int, dim: Optional[int] = None) -> float:
        return float(self.level(k, dim if dim is not None else i + 1)[i])

    def in_C(self, k: int, dim: int) -> np.ndarray:
        mask = np.zeros(dim, dtype=bool)
        if k <= self.C_levels:
            if self.C_phases is None:
                mask[:] = True
            else:
                mask[[i for i in self.C_phases if i < dim]] = True
        return mask

    def v_of(self, gen: BlockGenerator) -> Callable:
        return lambda l: self.level(l, gen.dim(l))

    def to_dict(self) -> dict:
        if self.kind == "custom":
            raise ContractError("custom certificates cannot be serialized")
        d = {"kind": self.kind, **self.params, "b": self.b, "C_levels": self.C_levels}
        if self.C_phases is not None:
            d["C_phases"] = list(self.C_phases)
        for key in ("beta", "phi_bar"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DriftCertificate":
        d = dict(d)
        try:
            kind = d.pop("kind")
            b = float(d.pop("b"))
            C_levels = int(d.pop("C_levels"))
        except KeyError as exc:
            raise ContractError(f"certificate lacks field {exc.args[0]!r}") from None
        C_phases = d.pop("C_phases", None)
        beta = d.pop("beta", None)
        phi_bar = d.pop("phi_bar", None)
        return cls(kind, d, b, C_levels,
                   tuple(int(i) for i in C_phases) if C_phases is not None else None,
                   beta=beta, phi_bar=phi_bar)

    def with_bound_inputs(self, beta, phi_bar) -> "DriftCertificate":
        return DriftCertificate(self.kind, self.params, self.b, self.C_levels, self.C_phases,
                                self.v_inf_floor, beta, phi_bar, self.func)


def _phase_vector(values, dim, default):
    if values is None:
        return np.full(dim, default)
    values = np.asarray(values, dtype=float)
    if values.size < dim:
        raise ContractError(f"certificate has {values.size} phase entries, level needs {dim}")
    return values[:dim]


# -- drift check ---------------------------------------------------------------------


@dataclass
class DriftReport:
    checked_prefix: int
    violations: list = field(default_factory=list)
    max_slack: float = -math.inf

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        head = f"drift check through level {self.checked_prefix}: "
        if self.ok:
            return head + f"no violations (max slack {self.max_slack:.6g})"
        lines = [head + f"{len(self.violations)} violation(s)"]
        lines += [f"  level {k} phase {i}: slack {s:.6g}" for k, i, s in self.violations]
        return "\n".join(lines)


def drift(gen: BlockGenerator, cert: DriftCertificate, k: int) -> tuple:
    """``(Q v)_k`` and the row-wise magnitude ``sum_l |Q_{k,l}| v_l``."""
    v = cert.v_of(gen)
    qv = np.zeros(gen.dim(k))
    mag = np.zeros(gen.dim(k))
    for l in range(max(0, k - 1), k + 1):
        b = gen.block(k, l)
        vl = v(l)
        qv += b @ vl
        mag += np.abs(b) @ vl
    tail = tail_weighted_sum(gen, v, k, k).values
    return qv + tail, mag + np.abs(tail)


def check_drift(gen: BlockGenerator, cert: DriftCertificate, n_max: int) -> DriftReport:
    """Evaluate ``Q v <= -1 + b 1_C`` row by row on levels ``0..n_max``."""
    report = DriftReport(n_max)
    for k in range(n_max + 1):
        qv, mag = drift(gen, cert, k)
        target = -1.0 + cert.b * cert.in_C(k, qv.size)
        slack = qv - target
        report.max_slack = max(report.max_slack, float(slack.max()))
        for i in np.flatnonzero(slack > DRIFT_RTOL * np.maximum(1.0, mag)):
            report.violations.append((k, int(i), float(slack[i])))
    return report


# -- LFP objective and error bound ---------------------------------------------------


class YVector(NamedTuple):
    values: np.ndarray
    exact: bool


def compute_y(state, gen: BlockGenerator, cert: DriftCertificate) -> YVector:
    """``y_n = v_n + sum_k U*_{n,k} sum_{l>n} Q_{k,l} v_l``.

    With a finite bandwidth ``B`` only ``k > n - B`` contribute.  When the
    generator's tail hook only bounds the tail, the result is the upper
    variant and ``exact`` is False.
    """
    n = state.n
    v = cert.v_of(gen)
    y = np.array(v(n), dtype=float)
    lo = 0 if gen.bandwidth is None else max(0, n + 1 - gen.bandwidth)
    exact = True
    for k in range(lo, n + 1):
        tail = tail_weighted_sum(gen, v, k, n)
        exact = exact and tail.exact
        if np.any(tail.values):
            y += state.U(k) @ tail.values
    return YVector(y, exact)


def residual(state, alpha, y_n) -> float:
    """LFP objective ``r_n(alpha) = alpha y_n / alpha u*_n``."""
    a = np.asarray(alpha, dtype=float)
    y = np.asarray(y_n, dtype=float)
    if a.shape != y.shape or y.shape != state.ustar.shape:
        raise ContractError("alpha, y_n and u*_n must have the same width")
    return float(a @ y / (a @ state.ustar))


def error_bound(state, cert: DriftCertificate, alpha, y_n) -> tuple:
    """``(E, 2 r_n)`` where ``E = 2 (r_n + 2 b / (alpha u* beta phi_bar))``.

    ``E`` is ``None`` unless the certificate carries ``beta`` and ``phi_bar``.
    """
    r = residual(state, alpha, y_n)
    if cert.beta is None or cert.phi_bar is None:
        return None, 2.0 * r
    au = float(np.asarray(alpha, dtype=float) @ state.ustar)
    E = 2.0 * (r + (1.0 / au) * 2.0 * cert.b / (cert.beta * cert.phi_bar))
    return E, 2.0 * r


def condition2_partial(gen: BlockGenerator, cert: DriftCertificate, pi_hat: LevelVector) -> list:
    """Partial sums ``sum_{k<=n} pi_k Delta_k v_k`` with ``Delta_k = |diag Q_{k,k}|``."""
    sums, total = [], 0.0
    for k in range(pi_hat.n_levels):
        delta = np.abs(np.diag(gen.block(k, k)))
        total += float(pi_hat.segment(k) @ (delta * cert.level(k, gen.dim(k))))
        sums.append(total)
    return sums


# -- certificates for the built-in models ----------------------------------------------


def bmap_certificate(spec, horizon: Optional[int] = None, scale: Optional[float] = None,
                     beta=None, phi_bar=None) -> DriftCertificate:
    """Scan-built certificate with ``v(k, i) = scale * log(k + e)``.

    The drift of ``log(k + e)`` tends to ``-mu``, so the default
    ``scale = max(1, 2 / mu)`` pushes it to at most ``-2``.  ``C`` is every
    level up to the last one whose drift exceeds ``-1`` within ``horizon``;
    ``b`` covers the worst drift there with 10% headroom.
    """
    from .models import bmap_generator

    gen = bmap_generator(spec)
    M = gen.dim(0)
    if horizon is None:
        horizon = max(1000, 10 * (len(spec.D) - 1) * M)
    if scale is None:
        scale = max(1.0, 2.0 / spec.mu)
    probe = DriftCertificate("log", {"scale": scale}, 1.0, 0)
    worst = []
    for k in range(horizon + 1):
        worst.append(float(drift(gen, probe, k)[0].max()))
    worst = np.array(worst)
    bad = np.flatnonzero(worst > -1.0)
    K = int(bad[-1]) if bad.size else 0
    if K > 0.9 * horizon:
        raise CertificateError(
            f"no level in the last 10% of the horizon {horizon} has drift <= -1 "
            f"(worst drift at the horizon {worst[-1]:.4g}); the model may not be ergodic"
        )
    b = B_HEADROOM * max(float(worst[: K + 1].max()) + 1.0, 0.0) + 1e-6
    return DriftCertificate("log", {"scale": scale}, b, K, beta=beta, phi_bar=phi_bar)


def retrial_constants(spec) -> dict:
    """Constants of the geometric drift function for the M/M/s retrial queue."""
    lam, mu, s, eta = spec.lam, spec.mu, spec.s, spec.eta
    rho = lam / (s * mu)
    if not rho < 1:
        raise StabilityError(f"retrial queue unstable: rho = {rho:g} >= 1")
    alpha = (1.0 + 1.0 / rho) / 2.0
    g_lo, g_hi = 1.0 / alpha, 1.0 - rho * (alpha - 1.0)
    gamma = (g_lo + g_hi) / 2.0
    c = s * mu * (1.0 - rho * (alpha - 1.0) - gamma)
    decay = eta * (1.0 - 1.0 / (gamma * alpha))
    K = max(math.ceil((c + lam * (1.0 / gamma - 1.0)) / decay), 1) - 1
    b = max(
        max(alpha ** k * (1.0 - (k * decay + lam * (1.0 - 1.0 / gamma)) / c) for k in range(K + 1)),
        0.0,
    )
    return dict(rho=rho, alpha=alpha, gamma=gamma, gamma_interval=(g_lo, g_hi), c=c, b=b, K=K)


def retrial_certificate(spec, beta=None, phi_bar=None) -> DriftCertificate:
    """Certificate from the geometric function ``alpha^k / c`` (``/ (c gamma)`` at phase s).

    It satisfies ``Q v <= -c v + b 1_C`` with ``c v >= e``, hence the
    normalized drift condition with the same ``v``, ``b`` and ``C``.
    """
    k = retrial_constants(spec)
    weights = [1.0] * spec.s + [1.0 / k["gamma"]]
    return DriftCertificate(
        "geometric", {"scale": 1.0 / k["c"], "ratio": k["alpha"], "weights": weights},
        k["b"], k["K"], beta=beta, phi_bar=phi_bar,
    )


def counterexample_certificate(spec, beta=None, phi_bar=None) -> DriftCertificate:
    """Affine certificate ``v(k, 0) = A (k + 1)``, ``v(k, 1) = A (k + 4)``.

    Needs ``d > 3 w + u``; then ``A = 1 / min(u, d - 3 w - u)`` makes the
    drift at most ``-1`` above level 0.
    """
    d, u, w = spec.d, spec.u, spec.w
    margin = min(u, d - 3.0 * w - u)
    if not margin > 0:
        raise CertificateError("affine certificate needs d > 3 w + u")
    A = 1.0 / margin
    b = B_HEADROOM * (1.0 + A * (3.0 * w + u))
    return DriftCertificate("affine", {"a": A, "slope": A, "offsets": [0.0, 3.0 * A]}, b, 0,
                            beta=beta, phi_bar=phi_bar)


def affine_certificate(a, slope, b, C_levels, offsets=None, C_phases=None,
                       beta=None, phi_bar=None) -> DriftCertificate:
    params = {"a": a, "slope": slope}
    if offsets is not None:
        params["offsets"] = list(offsets)
    return DriftCertificate("affine", params, b, C_levels, C_phases, beta=beta, phi_bar=phi_bar)


def mm1_certificate(lam: float, mu: float, beta=None, phi_bar=None) -> DriftCertificate:
    """``v_k = (k + 1) / (mu - lam)``, ``b = mu / (mu - lam)``, ``C = {level 0}``.

    The drift is exactly ``-1`` above level 0; at level 0 it is
    ``lam / (mu - lam) = b - 1``.
    """
    if not lam < mu:
        raise StabilityError("M/M/1 needs lambda < mu")
    g = 1.0 / (mu - lam)
    return affine_certificate(g, g, mu * g, 0, beta=beta, phi_bar=phi_bar)
