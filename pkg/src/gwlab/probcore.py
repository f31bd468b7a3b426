"""Finite-probability primitives: pmfs, information measures, Gaussian tails, types.

Everything downstream (solvers, tilted densities, the simulator) builds on the
containers and measures defined here.  All logarithms are base 2; rates are in
bits, and exp(x) means 2**x throughout the package.  The conventions
0*log(0) = 0 and 0*log(0/0) = 0 apply everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

LOG2E = math.log2(math.e)

PMF_ATOL = 1e-12           # absolute tolerance on pmf sums
MODEL_SUM_ATOL = 1e-9      # looser tolerance for JSON inputs


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class SupportViolationError(DomainError):
    """q places mass where the reference p has none."""


class SchemaError(ValueError):
    """A serialized source model violates the JSON schema."""


class InfeasibleError(RuntimeError):
    """Requested operating point cannot be met by any code/channel."""


def _as_prob_array(values, ndim, name):
    arr = np.asarray(values, dtype=float)
    if arr.ndim != ndim:
        raise DomainError(f"{name}: expected {ndim}-D array, got shape {arr.shape}")
    if arr.size == 0:
        raise DomainError(f"{name}: empty array")
    if np.any(arr < 0):
        raise DomainError(f"{name}: negative entries")
    if abs(arr.sum() - 1.0) > PMF_ATOL:
        raise DomainError(f"{name}: entries sum to {arr.sum()!r}, not 1 within {PMF_ATOL}")
    return arr


@dataclass(frozen=True, eq=False)
class Pmf:
    """Probability mass function on a finite alphabet."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _as_prob_array(self.probs, 1, "Pmf"))

    @property
    def alphabet_size(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def normalize(cls, weights) -> "Pmf":
        """Explicit renormalization; the constructor never renormalizes silently."""
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise DomainError("normalize: weights must be non-negative with positive sum")
        return cls(w / w.sum())

    @classmethod
    def uniform(cls, k: int) -> "Pmf":
        return cls(np.full(k, 1.0 / k))


@dataclass(frozen=True, eq=False)
class JointPmf:
    """Joint pmf on a finite product alphabet X x Y."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _as_prob_array(self.probs, 2, "JointPmf"))

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    def marginal_x(self) -> Pmf:
        return Pmf(self.probs.sum(axis=1))

    def marginal_y(self) -> Pmf:
        return Pmf(self.probs.sum(axis=0))

    def support(self) -> list[tuple[int, int]]:
        """Exactly the strictly positive cells, row-major order."""
        xs, ys = np.nonzero(self.probs > 0)
        return list(zip(xs.tolist(), ys.tolist()))

    @classmethod
    def normalize(cls, weights) -> "JointPmf":
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise DomainError("normalize: weights must be non-negative with positive sum")
        return cls(w / w.sum())

    @classmethod
    def product(cls, px: Pmf, py: Pmf) -> "JointPmf":
        return cls(np.outer(px.probs, py.probs))


@dataclass(frozen=True, eq=False)
class SortedSupport:
    """Support cells of a joint pmf sorted by decreasing probability.

    Ties are broken by lexicographic (x, y) order so the parametrization is
    deterministic.
    """

    pairs: tuple[tuple[int, int], ...]
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        if len(self.pairs) != self.probs.shape[0]:
            raise DomainError("SortedSupport: pairs/probs length mismatch")
        if np.any(np.diff(self.probs) > 0):
            raise DomainError("SortedSupport: probabilities not non-increasing")

    @property
    def m(self) -> int:
        return len(self.pairs)


def sorted_support(j: JointPmf) -> SortedSupport:
    cells = [(-p, x, y) for (x, y) in j.support() for p in (j.probs[x, y],)]
    cells.sort()
    pairs = tuple((x, y) for (_, x, y) in cells)
    probs = np.array([-c[0] for c in cells])
    return SortedSupport(pairs=pairs, probs=probs)


@dataclass(frozen=True, eq=False)
class DistortionMeasure:
    """Single-letter distortion matrix over source x reproduction alphabets.

    Every source letter must have a zero-distortion reproduction, which keeps
    rate-distortion functions finite down to D = 0.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.size == 0:
            raise DomainError("DistortionMeasure: matrix must be 2-D and non-empty")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise DomainError("DistortionMeasure: entries must be finite and non-negative")
        if not np.all((m == 0).any(axis=1)):
            raise DomainError("DistortionMeasure: some source letter has no zero-distortion reproduction")
        if not np.any(m > 0):
            raise DomainError("DistortionMeasure: all-zero matrix is degenerate")
        object.__setattr__(self, "matrix", m)

    @property
    def n_source(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_repr(self) -> int:
        return self.matrix.shape[1]

    @property
    def d_max(self) -> float:
        return float(self.matrix.max())

    @property
    def d_min_positive(self) -> float:
        return float(self.matrix[self.matrix > 0].min())

    @classmethod
    def hamming(cls, k: int) -> "DistortionMeasure":
        return cls(1.0 - np.eye(k))


@dataclass(frozen=True, eq=False)
class TiltedTable:
    """Per-symbol tilted information density values with their moments."""

    values: np.ndarray          # (|X|, |Y|)
    mean: float
    variance: float
    third_abs_moment: float

    @classmethod
    def from_values(cls, values: np.ndarray, p_xy: JointPmf) -> "TiltedTable":
        v = np.asarray(values, dtype=float)
        if v.shape != p_xy.shape:
            raise DomainError("TiltedTable: values/pmf shape mismatch")
        w = p_xy.probs
        mean = float(np.sum(w * v))
        centered = v - mean
        var = float(np.sum(w * centered**2))
        third = float(np.sum(w * np.abs(centered) ** 3))
        return cls(values=v, mean=mean, variance=var, third_abs_moment=third)


# ---------------------------------------------------------------------------
# information measures
# ---------------------------------------------------------------------------

def entropy(p: Pmf | np.ndarray) -> float:
    """Shannon entropy in bits."""
    probs = p.probs if isinstance(p, Pmf) else np.asarray(p, dtype=float)
    return float(-special.xlogy(probs, probs).sum() / math.log(2))


def entropy_joint(j: JointPmf) -> float:
    return float(-special.xlogy(j.probs, j.probs).sum() / math.log(2))


def binary_entropy(delta: float) -> float:
    """h(delta) in bits; h(0) = h(1) = 0."""
    if not 0.0 <= delta <= 1.0:
        raise DomainError(f"binary_entropy: {delta!r} outside [0, 1]")
    return float(-(special.xlogy(delta, delta) + special.xlogy(1.0 - delta, 1.0 - delta)) / math.log(2))


def kl_divergence(q, p) -> float:
    """D(q || p) in bits; requires supp(q) within supp(p)."""
    qa = q.probs if isinstance(q, (Pmf, JointPmf)) else np.asarray(q, dtype=float)
    pa = p.probs if isinstance(p, (Pmf, JointPmf)) else np.asarray(p, dtype=float)
    if qa.shape != pa.shape:
        raise DomainError("kl_divergence: shape mismatch")
    if np.any((qa > 0) & (pa == 0)):
        raise SupportViolationError("kl_divergence: q puts mass outside supp(p)")
    return float(special.rel_entr(qa, pa).sum() / math.log(2))


def mutual_information(j: JointPmf) -> float:
    """I(X;Y) = D(P_XY || P_X x P_Y) in bits."""
    px = j.probs.sum(axis=1)
    py = j.probs.sum(axis=0)
    return float(special.rel_entr(j.probs, np.outer(px, py)).sum() / math.log(2))


def mutual_information_channel(px: np.ndarray, channel: np.ndarray) -> float:
    """I(p, W) for channel rows W[x, y] = P(y|x), in bits."""
    joint = px[:, None] * channel
    out = joint.sum(axis=0)
    return float(special.rel_entr(joint, np.outer(px, out)).sum() / math.log(2))


def conditional_mutual_information(pw, px_given_w, pxhat_given_xw) -> float:
    """sum_w P(w) I(X; Xhat | W=w) in bits.

    Shapes: pw (|W|,), px_given_w (|W|, |X|), pxhat_given_xw (|W|, |X|, |Xhat|).
    """
    pw = pw.probs if isinstance(pw, Pmf) else np.asarray(pw, dtype=float)
    pxw = np.asarray(px_given_w, dtype=float)
    ch = np.asarray(pxhat_given_xw, dtype=float)
    if pxw.shape[0] != pw.shape[0] or ch.shape[:2] != pxw.shape:
        raise DomainError("conditional_mutual_information: inconsistent shapes")
    joint = pw[:, None, None] * pxw[:, :, None] * ch          # (w, x, xh)
    out = joint.sum(axis=1, keepdims=True)                    # (w, 1, xh)
    ref = joint.sum(axis=2, keepdims=True) * out / np.maximum(pw, 1e-300)[:, None, None]
    return float(special.rel_entr(joint, ref).sum() / math.log(2))


# ---------------------------------------------------------------------------
# Gaussian tails
# ---------------------------------------------------------------------------

def q_function(t: float) -> float:
    """Complementary cdf of the standard Gaussian."""
    return float(0.5 * special.erfc(t / math.sqrt(2.0)))


def q_inverse(eps: float) -> float:
    """Inverse of q_function on (0, 1)."""
    if not 0.0 < eps < 1.0:
        raise DomainError(f"q_inverse: {eps!r} outside (0, 1)")
    return float(-special.ndtri(eps))


def log2_q_function(t: float) -> float:
    """log2 Q(t), stable for large t where Q underflows."""
    return float(special.log_ndtr(-t) / math.log(2))


# ---------------------------------------------------------------------------
# types / empirical distributions
# ---------------------------------------------------------------------------

def empirical_counts(x_seq, y_seq, nx: int | None = None, ny: int | None = None) -> np.ndarray:
    """Joint count matrix of a sequence pair; denominators exactly n."""
    xs = np.asarray(x_seq, dtype=int)
    ys = np.asarray(y_seq, dtype=int)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size == 0:
        raise DomainError("empirical_counts: sequences must be equal-length, 1-D, non-empty")
    nx = int(xs.max()) + 1 if nx is None else nx
    ny = int(ys.max()) + 1 if ny is None else ny
    if np.any(xs < 0) or np.any(ys < 0) or np.any(xs >= nx) or np.any(ys >= ny):
        raise DomainError("empirical_counts: symbol outside alphabet")
    counts = np.zeros((nx, ny), dtype=np.int64)
    np.add.at(counts, (xs, ys), 1)
    return counts


def empirical_type(x_seq, y_seq, nx: int | None = None, ny: int | None = None) -> JointPmf:
    counts = empirical_counts(x_seq, y_seq, nx, ny)
    return JointPmf(counts / counts.sum())


# ---------------------------------------------------------------------------
# JSON source-model schema
# ---------------------------------------------------------------------------

def load_source_model(source) -> tuple[JointPmf, DistortionMeasure, DistortionMeasure]:
    """Parse {"px_y": [[...]], "dx": [[...]], "dy": [[...]]} into model objects.

    `source` may be a path, a JSON string, or an already-decoded dict.
    """
    if isinstance(source, dict):
        doc = source
    else:
        path = Path(source)
        if path.exists():
            text = path.read_text()
        elif isinstance(source, str) and source.lstrip().startswith("{"):
            text = source
        else:
            raise SchemaError(f"source model not found: {source}")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from exc

    for key in ("px_y", "dx", "dy"):
        if key not in doc:
            raise SchemaError(f"missing key {key!r}")

    def _matrix(key):
        try:
            arr = np.array(doc[key], dtype=float)
        except ValueError as exc:
            raise SchemaError(f"{key}: ragged or non-numeric rows") from exc
        if arr.ndim != 2:
            raise SchemaError(f"{key}: expected a 2-D row-major array")
        if np.any(arr < 0):
            raise SchemaError(f"{key}: negative entries")
        return arr

    pxy = _matrix("px_y")
    if abs(pxy.sum() - 1.0) > MODEL_SUM_ATOL:
        raise SchemaError(f"px_y: sum deviates from 1 by {abs(pxy.sum() - 1.0):.3g}")
    # tiny residual is repaired to meet the strict in-memory invariant
    pxy = pxy / pxy.sum()
    dx = _matrix("dx")
    dy = _matrix("dy")
    nx, ny = pxy.shape
    if dx.shape[0] != nx:
        raise SchemaError(f"dx: {dx.shape[0]} rows but |X| = {nx}")
    if dy.shape[0] != ny:
        raise SchemaError(f"dy: {dy.shape[0]} rows but |Y| = {ny}")
    try:
        return JointPmf(pxy), DistortionMeasure(dx), DistortionMeasure(dy)
    except DomainError as exc:
        raise SchemaError(str(exc)) from exc
