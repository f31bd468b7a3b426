"""Closed-form ground truth for the doubly symmetric binary source.

X uniform binary, Y a BSC(p) corruption of X, Hamming distortion on both
reconstructions with a common level D.  Everything here is analytic and is
used to cross-check the numerical solvers; the sum-rate curve reproduces the
finite-blocklength figure data.

The tilted-density values are derived from the optimal reproduction
distribution of the joint problem (the backward channel X = Xhat + Z1,
Y = Yhat + Z2 with (Xhat, Yhat) doubly symmetric with crossover
q = (p - 2D(1-D)) / (1 - 4D(1-D)) and Z_i ~ Bern(D)), which is the unique
choice consistent with the expectation identity E[i_XY] = R_XY.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gray_wyner import GWPoint
from .probcore import (
    DistortionMeasure,
    DomainError,
    JointPmf,
    TiltedTable,
    binary_entropy,
    q_inverse,
)


def joint_pmf(p: float) -> JointPmf:
    """Source law: P(0,0)=P(1,1)=(1-p)/2, P(0,1)=P(1,0)=p/2."""
    if not 0.0 <= p <= 0.5:
        raise DomainError(f"crossover {p!r} outside [0, 1/2]")
    return JointPmf([[(1 - p) / 2, p / 2], [p / 2, (1 - p) / 2]])


def hamming() -> DistortionMeasure:
    return DistortionMeasure.hamming(2)


def p1(p: float) -> float:
    """Critical distortion 1/2 - sqrt(1-2p)/2 separating the two R_XY branches."""
    if not 0.0 <= p <= 0.5:
        raise DomainError(f"crossover {p!r} outside [0, 1/2]")
    return 0.5 - 0.5 * math.sqrt(1.0 - 2.0 * p)


@dataclass(frozen=True)
class DsbsParams:
    """Crossover p, common distortion D, and coarse level delta with D <= delta <= p1."""

    p: float
    D: float
    delta: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 0.5:
            raise DomainError(f"crossover {self.p!r} outside [0, 1/2]")
        if not 0.0 <= self.D <= self.delta <= p1(self.p):
            raise DomainError("need 0 <= D <= delta <= p1(p)")


def joint_rd_closed(p: float, D: float) -> float:
    """R_XY(D, D) for the symmetric two-constraint problem, both branches."""
    if not 0.0 <= p <= 0.5:
        raise DomainError(f"crossover {p!r} outside [0, 1/2]")
    if not 0.0 <= D <= 0.5:
        raise DomainError(f"distortion {D!r} outside [0, 1/2]")
    knee = p1(p)
    if D <= knee:
        return 1.0 + binary_entropy(p) - 2.0 * binary_entropy(D)

    def f(x):
        return -x * math.log2(x) if x > 0 else 0.0

    return f(1.0 - p) - 0.5 * (f(2.0 * D - p) + f(2.0 * (1.0 - D) - p))


def tilted_closed(p: float, D: float) -> tuple[float, float]:
    """(diagonal, off-diagonal) values of the joint (D,D)-tilted density, D <= p1.

    Equal to -log2 P_XY(x, y) - 2 h(D); see the module docstring for the
    derivation from the optimal backward channel.
    """
    if not 0.0 < p <= 0.5:
        raise DomainError(f"crossover {p!r} outside (0, 1/2]")
    if not 0.0 <= D <= p1(p):
        raise DomainError(f"distortion {D!r} outside [0, p1]")
    shift = 2.0 * binary_entropy(D)
    diag = math.log2(2.0 / (1.0 - p)) - shift
    off = math.log2(2.0 / p) - shift
    return diag, off


def tilted_table(p: float, D: float) -> TiltedTable:
    diag, off = tilted_closed(p, D)
    vals = np.array([[diag, off], [off, diag]])
    return TiltedTable.from_values(vals, joint_pmf(p))


def variance_closed(p: float, D: float) -> float:
    """Var of the joint (D,D)-tilted density; D-free because the D-dependence
    of the tilted values is a constant shift.

    Computed both ways (centering at 1 + h(p) on the unshifted values, and at
    R_XY on the full values); the two agree identically.
    """
    diag, off = tilted_closed(p, D)
    center_paper = 1.0 + binary_entropy(p)
    shift = 2.0 * binary_entropy(D)
    v_paper = (1 - p) * (diag + shift - center_paper) ** 2 \
        + p * (off + shift - center_paper) ** 2
    rate = joint_rd_closed(p, D)
    v_mean = (1 - p) * (diag - rate) ** 2 + p * (off - rate) ** 2
    if abs(v_paper - v_mean) > 1e-12:
        raise AssertionError("variance centerings disagree; closed forms inconsistent")
    return v_mean


def pangloss_triplet(p: float, D: float, delta: float) -> GWPoint:
    """The boundary triplet R0 = R_XY(delta, delta), R1 = R2 = h(delta) - h(D).

    Multipliers come from the joint problem: lambda = 1 on the sum-rate face
    and gamma = nu = log2((1-D)/D) while D < 1/2.
    """
    DsbsParams(p, D, delta)   # domain check
    r0 = joint_rd_closed(p, delta)
    r = binary_entropy(delta) - binary_entropy(D)
    nu = math.log2((1.0 - D) / D) if 0.0 < D < 0.5 else math.inf
    return GWPoint(r0=r0, r1=r, r2=r, d1=D, d2=D,
                   lambda1=1.0, lambda2=1.0, gamma1=nu, gamma2=nu,
                   channel=None, on_boundary=True, note="closed-form triplet")


def r_sum(n: int, eps: float, point: GWPoint, V: float) -> float:
    """Finite-blocklength sum rate (R0+R1+R2) + sqrt(V/n) Q^{-1}(eps)."""
    if n < 1:
        raise DomainError(f"blocklength {n!r} < 1")
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps {eps!r} outside (0, 1)")
    first_order = point.r0 + point.r1 + point.r2
    return first_order + math.sqrt(V / n) * q_inverse(eps)


def figure_rows(p: float, D: float, delta: float, eps_list=(0.01, 0.99),
                n_min: int = 10, n_max: int = 10_000, n_points: int = 50):
    """Sum-rate curve rows (n, one column per eps, first-order sum) on a log grid."""
    point = pangloss_triplet(p, D, delta)
    v = variance_closed(p, D)
    first_order = point.r0 + point.r1 + point.r2
    grid = np.unique(np.round(np.logspace(math.log10(n_min), math.log10(n_max),
                                          n_points)).astype(int))
    rows = []
    for n in grid:
        rows.append((int(n), *(r_sum(int(n), e, point, v) for e in eps_list),
                     first_order))
    return rows
