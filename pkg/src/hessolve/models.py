"""Concrete generators: BMAP/M/inf, M/M/s retrial, the two-phase counterexample.

Also reads and writes the plain-text model file format::

    # M/M/1 queue, lambda = 1, mu = 2
    name: mm1
    levels: 2                 # explicitly described levels 0..levels-1
    dim: 1                    # default phase count; `dim K: M` overrides level K
    block 0 0: -1
    block 0 1: 1
    block 1 0: 2
    block 1 1: -3
    block 1 2: 1
    repeat_from: 1            # levels >= `levels` copy the pattern at this level
    repeat_period: 1          # optional; pattern level = k0 + (k - k0) mod period
    certificate:
      kind: affine
      a: 1
      slope: 1
      b: 2
      C_levels: 0

Block entries are separated by commas and rows by semicolons.  An entry is
either a number or an affine expression ``a + b*k`` in the row level ``k``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse.csgraph import connected_components

from .block_chain import BlockGenerator, validate_generator
from .bounds import DriftCertificate
from .errors import ModelFileError, SpecError, StabilityError


# -- specs -----------------------------------------------------------------------------


@dataclass(frozen=True)
class BMAPSpec:
    """BMAP matrices ``D = [D_0, ..., D_mmax]`` and exponential service rate ``mu``."""

    D: tuple
    mu: float

    def __post_init__(self):
        D = tuple(np.array(d, dtype=float, ndmin=2) for d in self.D)
        object.__setattr__(self, "D", D)
        if len(D) < 2:
            raise SpecError("a BMAP needs D_0 and at least one arrival matrix")
        M = D[0].shape[0]
        if any(d.shape != (M, M) for d in D):
            raise SpecError("all D_m must be square of the same order")
        if not self.mu > 0:
            raise SpecError("service rate must be positive")
        off = D[0] - np.diag(np.diag(D[0]))
        if np.any(np.diag(D[0]) >= 0) or np.any(off < 0):
            raise SpecError("D_0 needs a negative diagonal and nonnegative off-diagonal")
        if any(np.any(d < 0) for d in D[1:]):
            raise SpecError("arrival matrices D_m (m >= 1) must be nonnegative")
        total = sum(D)
        scale = max(1.0, np.abs(total).max())
        if np.any(np.abs(total.sum(axis=1)) > 1e-10 * scale):
            raise SpecError("sum of D_m must have zero row sums")
        arrivals = sum(D[1:]).sum(axis=1)
        if not np.any(arrivals > 0):
            raise SpecError("the BMAP generates no arrivals")
        adj = (total - np.diag(np.diag(total))) > 0
        if M > 1 and connected_components(adj, directed=True, connection="strong")[0] != 1:
            raise SpecError("background generator sum(D_m) is reducible")

    @property
    def M(self) -> int:
        return self.D[0].shape[0]

    @property
    def mmax(self) -> int:
        return len(self.D) - 1

    @classmethod
    def poisson(cls, lam, mu) -> "BMAPSpec":
        """Single-phase Poisson arrivals: the M/M/inf queue."""
        return cls(([[-lam]], [[lam]]), mu)


@dataclass(frozen=True)
class RetrialSpec:
    lam: float
    mu: float
    s: int
    eta: float

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0 and self.eta > 0):
            raise SpecError("retrial rates must be positive")
        if int(self.s) != self.s or self.s < 1:
            raise SpecError("server count must be a positive integer")
        object.__setattr__(self, "s", int(self.s))

    @property
    def rho(self) -> float:
        return self.lam / (self.s * self.mu)

    def require_stable(self):
        if not self.rho < 1:
            raise StabilityError(f"retrial queue unstable: rho = {self.rho:g} >= 1")


@dataclass(frozen=True)
class CounterexampleSpec:
    """Rates of the two-phase chain whose last-phase augmentation fails to converge."""

    d: float = 10.0
    u: float = 1.0
    w: float = 1.0

    def __post_init__(self):
        if not (self.d > 0 and self.u > 0 and self.w > 0):
            raise SpecError("counterexample rates must be positive")


# -- built-in generators -----------------------------------------------------------------


def mm1_generator(lam: float, mu: float) -> BlockGenerator:
    if not (lam > 0 and mu > 0):
        raise SpecError("M/M/1 rates must be positive")

    def block(k, l):
        if l == k + 1:
            return [[lam]]
        if l == k:
            return [[-lam - (mu if k > 0 else 0.0)]]
        if l == k - 1:
            return [[mu]]
        return None

    return BlockGenerator(1, block, bandwidth=1, name=f"mm1(lambda={lam:g},mu={mu:g})")


def bmap_generator(spec: BMAPSpec) -> BlockGenerator:
    """``Q_{k,l} = D_{l-k}`` above the diagonal, ``D_0 - k mu I`` on it, ``k mu I`` below."""
    D, mu, M = spec.D, spec.mu, spec.M
    eye = np.eye(M)

    def block(k, l):
        if l > k:
            return D[l - k] if l - k <= spec.mmax else None
        if l == k:
            return D[0] - k * mu * eye
        if l == k - 1:
            return k * mu * eye
        return None

    return BlockGenerator(M, block, bandwidth=spec.mmax, name=f"bmap(M={M},mmax={spec.mmax})")


def retrial_generator(spec: RetrialSpec) -> BlockGenerator:
    """Level = orbit size, phase = busy servers ``0..s``."""
    lam, mu, s, eta = spec.lam, spec.mu, spec.s, spec.eta
    M = s + 1
    idx = np.arange(s)

    def block(k, l):
        if l == k - 1:
            B = np.zeros((M, M))
            B[idx, idx + 1] = k * eta
            return B
        if l == k + 1:
            B = np.zeros((M, M))
            B[s, s] = lam
            return B
        if l == k:
            B = np.zeros((M, M))
            B[idx, idx + 1] = lam
            B[idx + 1, idx] = (idx + 1) * mu
            psi = lam + np.arange(M) * mu + k * eta
            psi[s] = lam + s * mu
            B[np.arange(M), np.arange(M)] = -psi
            return B
        return None

    return BlockGenerator(M, block, bandwidth=1,
                          name=f"retrial(s={s},lambda={lam:g},mu={mu:g},eta={eta:g})")


def counterexample_generator(spec: CounterexampleSpec = CounterexampleSpec()) -> BlockGenerator:
    d, u, w = spec.d, spec.u, spec.w
    up = np.array([[u, 0.0], [u, u]])

    def down(k):
        if k % 2 == 1:
            return np.array([[d, 0.0], [0.0, d]])
        return np.array([[d, 0.0], [0.0, 0.0]])

    def block(k, l):
        if l == k + 1:
            return up
        if l == k - 1:
            return down(k)
        if l == k:
            B = np.array([[0.0, w], [0.0, 0.0]])
            out = up.sum(axis=1) + (down(k).sum(axis=1) if k > 0 else 0.0)
            B[[0, 1], [0, 1]] = -(B.sum(axis=1) + out)
            return B
        return None

    return BlockGenerator(2, block, bandwidth=1, name=f"counterexample(d={d:g},u={u:g},w={w:g})")


# -- model files ---------------------------------------------------------------------------

_TERM = re.compile(r"[+-]?[^+-]+")
_NUM = r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"


def parse_entry(text: str) -> tuple:
    """Parse ``a``, ``b*k``, ``a + b*k`` (any order of terms) into ``(a, b)``."""
    s = re.sub(r"\s+", "", text)
    if not s:
        raise ValueError("empty entry")
    # keep exponent signs attached to their mantissa
    s = re.sub(r"([eE])([+-])", lambda m: m.group(1) + {"+": "P", "-": "M"}[m.group(2)], s)
    a = b = 0.0
    for term in _TERM.findall(s):
        term = term.replace("P", "+").replace("M", "-")
        sign = -1.0 if term.startswith("-") else 1.0
        body = term.lstrip("+-")
        if re.fullmatch(_NUM, body):
            a += sign * float(body)
        elif body == "k":
            b += sign
        elif m := (re.fullmatch(rf"({_NUM})\*k", body) or re.fullmatch(rf"k\*({_NUM})", body)):
            b += sign * float(m.group(1))
        else:
            raise ValueError(f"cannot parse entry {text.strip()!r}")
    return a, b


def _parse_block(text, line):
    rows = []
    for row in text.split(";"):
        try:
            rows.append([parse_entry(e) for e in row.split(",")])
        except ValueError as exc:
            raise ModelFileError(str(exc), line) from None
    if len({len(r) for r in rows}) != 1:
        raise ModelFileError("block rows have differing lengths", line)
    arr = np.array(rows, dtype=float)
    return arr[..., 0], arr[..., 1]


def _parse_value(text, line):
    text = text.strip()
    try:
        if text.startswith("["):
            return json.loads(text)
        return float(text) if re.search(r"[.eE]", text) else int(text)
    except ValueError:
        if re.fullmatch(r"[A-Za-z_][\w-]*", text):
            return text
        raise ModelFileError(f"bad value {text!r}", line) from None


@dataclass
class ModelFile:
    levels: int
    dims: dict
    default_dim: Optional[int]
    blocks: dict
    lines: dict
    repeat_from: Optional[int] = None
    repeat_period: int = 1
    name: str = "file"
    certificate: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def parse_model_text(text: str) -> ModelFile:
    mf = ModelFile(levels=-1, dims={}, default_dim=None, blocks={}, lines={})
    in_cert = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        indented = line[0].isspace()
        if in_cert and indented:
            key, sep, val = line.strip().partition(":")
            if not sep:
                raise ModelFileError("expected `key: value` in certificate section", lineno)
            mf.certificate[key.strip()] = _parse_value(val, lineno)
            continue
        in_cert = False
        key, sep, val = line.strip().partition(":")
        if not sep:
            raise ModelFileError(f"expected `key: value`, got {line.strip()!r}", lineno)
        words = key.split()
        try:
            if words[0] == "block" and len(words) == 3:
                k, l = int(words[1]), int(words[2])
                if (k, l) in mf.blocks:
                    raise ModelFileError(f"block ({k},{l}) declared twice", lineno)
                mf.blocks[(k, l)] = _parse_block(val, lineno)
                mf.lines[(k, l)] = lineno
            elif words[0] == "dim" and len(words) == 2:
                mf.dims[int(words[1])] = int(val)
            elif key == "dim":
                mf.default_dim = int(val)
            elif key == "levels":
                mf.levels = int(val)
            elif key == "repeat_from":
                mf.repeat_from = int(val)
            elif key == "repeat_period":
                mf.repeat_period = int(val)
            elif key == "name":
                mf.name = val.strip()
            elif key == "certificate":
                if val.strip():
                    raise ModelFileError("certificate section takes indented lines", lineno)
                mf.certificate, in_cert = {}, True
            else:
                raise ModelFileError(f"unknown key {key!r}", lineno)
        except ValueError as exc:
            raise ModelFileError(f"bad integer in {line.strip()!r}: {exc}", lineno) from None
    if mf.levels < 1:
        raise ModelFileError("missing or nonpositive `levels`")
    if mf.repeat_from is not None and not 0 <= mf.repeat_from < mf.levels:
        raise ModelFileError("repeat_from must name a described level (0 <= k0 < levels)")
    if mf.repeat_period < 1:
        raise ModelFileError("repeat_period must be >= 1")
    return mf


def _generator_from_file(mf: ModelFile) -> BlockGenerator:
    P, k0, p = mf.levels, mf.repeat_from, mf.repeat_period

    def pattern_level(k):
        if k < P:
            return k
        if k0 is None:
            return None
        return k0 + (k - k0) % p

    def level_dim(k):
        pk = pattern_level(k)
        m = mf.dims.get(pk, mf.default_dim)
        if m is None:
            raise ModelFileError(f"no dimension declared for level {pk}")
        return m

    for k in range(P):
        level_dim(k)
    offsets = [l - k for k, l in mf.blocks]
    B = max(max(offsets, default=0), 0)
    for (k, l), (a, _) in mf.blocks.items():
        line = mf.lines[(k, l)]
        if k >= P:
            raise ModelFileError(f"block ({k},{l}) lies beyond the described levels", line)
        if l >= P and k0 is None:
            raise ModelFileError(f"block ({k},{l}) references undeclared level {l}", line)
        if l < 0 or l < k - 1:
            raise ModelFileError(f"block ({k},{l}) lies below the first subdiagonal", line)
        if a.shape != (level_dim(k), level_dim(l)):
            raise ModelFileError(
                f"block ({k},{l}) is {a.shape[0]}x{a.shape[1]}, declared dims are "
                f"{level_dim(k)}x{level_dim(l)}", line)

    def block(k, l):
        pk = pattern_level(k)
        entry = mf.blocks.get((pk, pk + (l - k)))
        if entry is None:
            return None
        a, b = entry
        return a + b * k

    return BlockGenerator(level_dim, block, bandwidth=B,
                          max_level=None if k0 is not None else P - 1, name=mf.name)


def load_model(path_or_text, from_text: bool = False):
    """Parse a model file; return ``(generator, certificate or None)``.

    The generator is validated on its first ``3 * levels`` levels (only the
    described ones without a repeat rule); failures raise
    :class:`ModelFileError` carrying the report.
    """
    if from_text:
        text = path_or_text
    else:
        with open(path_or_text) as fh:
            text = fh.read()
    mf = parse_model_text(text)
    gen = _generator_from_file(mf)
    n_check = 3 * mf.levels - 1 if mf.repeat_from is not None else mf.levels - 1
    report = validate_generator(gen, n_check)
    if not report.ok:
        raise ModelFileError(f"model fails validation:\n{report}", report=report)
    cert = None
    if mf.certificate is not None:
        try:
            cert = DriftCertificate.from_dict(mf.certificate)
        except ValueError as exc:
            raise ModelFileError(f"bad certificate: {exc}") from None
    return gen, cert


def parse_certificate_text(text: str) -> DriftCertificate:
    """Certificate from a model file, a bare ``certificate:`` section or JSON."""
    if text.lstrip().startswith("{"):
        data = json.loads(text)
    elif re.search(r"^\s*levels\s*:", text, re.M):
        data = parse_model_text(text).certificate
        if data is None:
            raise ModelFileError("model file has no certificate section")
    else:
        data = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line or line == "certificate:":
                continue
            key, sep, val = line.partition(":")
            if not sep:
                raise ModelFileError(f"expected `key: value`, got {line!r}", lineno)
            data[key.strip()] = _parse_value(val, lineno)
    try:
        return DriftCertificate.from_dict(data)
    except ValueError as exc:
        raise ModelFileError(f"bad certificate: {exc}") from None


def load_certificate(path) -> DriftCertificate:
    with open(path) as fh:
        return parse_certificate_text(fh.read())


def load_generator(path) -> BlockGenerator:
    return load_model(path)[0]


# -- canonical file emitters -------------------------------------------------------------------


def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def _aff(a, b) -> str:
    if b == 0:
        return _num(a)
    kterm = "k" if b == 1 else ("-k" if b == -1 else f"{_num(b)}*k")
    if a == 0:
        return kterm
    if kterm.startswith("-"):
        return f"{_num(a)} - {kterm[1:]}"
    return f"{_num(a)} + {kterm}"


def _block_line(k, l, a, b=None) -> str:
    a = np.atleast_2d(a)
    b = np.zeros_like(a) if b is None else np.atleast_2d(b)
    rows = [", ".join(_aff(x, y) for x, y in zip(ra, rb)) for ra, rb in zip(a, b)]
    return f"block {k} {l}: " + "; ".join(rows)


def _cert_lines(cert: Optional[DriftCertificate]) -> list:
    if cert is None:
        return []
    out = ["certificate:"]
    for key, val in cert.to_dict().items():
        if isinstance(val, (list, tuple)):
            val = json.dumps([float(x) for x in val])
        elif isinstance(val, str):
            pass
        else:
            val = _num(val) if key != "C_levels" else str(int(val))
        out.append(f"  {key}: {val}")
    return out


def mm1_model_text(lam, mu, cert=None) -> str:
    lines = ["# M/M/1 queue", "name: mm1", "levels: 2", "dim: 1",
             _block_line(0, 0, -lam), _block_line(0, 1, lam),
             _block_line(1, 0, mu), _block_line(1, 1, -lam - mu), _block_line(1, 2, lam),
             "repeat_from: 1"]
    return "\n".join(lines + _cert_lines(cert)) + "\n"


def bmap_model_text(spec: BMAPSpec, cert=None) -> str:
    M, I = spec.M, np.eye(spec.M)
    lines = ["# BMAP/M/inf queue", "name: bmap", "levels: 2", f"dim: {M}"]
    for l in range(spec.mmax + 1):
        lines.append(_block_line(0, l, spec.D[l]))
    lines.append(_block_line(1, 0, np.zeros((M, M)), spec.mu * I))
    lines.append(_block_line(1, 1, spec.D[0], -spec.mu * I))
    for m in range(1, spec.mmax + 1):
        lines.append(_block_line(1, 1 + m, spec.D[m]))
    lines.append("repeat_from: 1")
    return "\n".join(lines + _cert_lines(cert)) + "\n"


def retrial_model_text(spec: RetrialSpec, cert=None) -> str:
    gen = retrial_generator(spec)
    s, M = spec.s, spec.s + 1
    down_b = np.zeros((M, M))
    down_b[np.arange(s), np.arange(s) + 1] = spec.eta
    diag_a = np.array(gen.block(0, 0))
    diag_b = np.zeros((M, M))
    diag_b[np.arange(s), np.arange(s)] = -spec.eta
    lines = [f"# M/M/{s} retrial queue", "name: mms-retrial", "levels: 2", f"dim: {M}",
             _block_line(0, 0, gen.block(0, 0)), _block_line(0, 1, gen.block(0, 1)),
             _block_line(1, 0, np.zeros((M, M)), down_b),
             _block_line(1, 1, diag_a, diag_b), _block_line(1, 2, gen.block(1, 2)),
             "repeat_from: 1"]
    return "\n".join(lines + _cert_lines(cert)) + "\n"


def counterexample_model_text(spec: CounterexampleSpec = CounterexampleSpec(), cert=None) -> str:
    gen = counterexample_generator(spec)
    lines = ["# two-phase counterexample chain", "name: counterexample", "levels: 3", "dim: 2"]
    for k in range(3):
        for l in gen.upper_range(k, k + 1):
            lines.append(_block_line(k, l, gen.block(k, l)))
    lines += ["repeat_from: 1", "repeat_period: 2"]
    return "\n".join(lines + _cert_lines(cert)) + "\n"
