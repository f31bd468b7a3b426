"""Alternating-minimization solvers for rate-distortion functions.

Covers the standard, conditional (side information at both ends), and
two-constraint joint problems, plus the joint (D1,D2)-tilted information
density and per-branch conditional tilted densities.  All solvers work in
bits and handle the distortion constraint by bisecting the Lagrange slope of
the exponential-tilt fixed point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .probcore import (
    DistortionMeasure,
    DomainError,
    JointPmf,
    Pmf,
    TiltedTable,
    entropy,
)

LN2 = math.log(2)

# distortion-target tolerance for slope bisection
_DIST_TOL = 1e-11
_RATE_TOL = 1e-12
_MAX_BA_ITERS = 100_000
_SLOPE_CAP = 4096.0
_Q_FLOOR = 1e-8     # revive boundary-collapsed output letters between slope probes


@dataclass(eq=False)
class RDSolution:
    """Converged point of a (conditional) rate-distortion solve."""

    rate: float
    channel: np.ndarray           # (x, xh) or (w, x, xh)
    output_marginal: np.ndarray   # (xh,) or (w, xh)
    slope: float                  # -dR/dD at the solution, bits per distortion unit
    iterations: int
    converged: bool
    distortion: float


@dataclass(eq=False)
class JointRDSolution:
    """Converged point of the two-constraint joint rate-distortion solve."""

    rate: float
    channel: np.ndarray           # (x, y, xh, yh)
    output_marginal: np.ndarray   # (xh, yh)
    nu1: float
    nu2: float
    iterations: int
    converged: bool
    distortion_x: float
    distortion_y: float


def _check_level(D, name="D"):
    if D < 0:
        raise DomainError(f"{name} = {D!r} is negative (infeasible)")


# ---------------------------------------------------------------------------
# unconditional solver
# ---------------------------------------------------------------------------

def _ba_fixed_slope(px, dmat, slope, q0, tol=_RATE_TOL, max_iters=_MAX_BA_ITERS):
    """Exponential-tilt fixed point at a fixed slope; returns (channel, q, R, D, iters).

    The start point is floored away from the simplex boundary: letters killed
    by an earlier probe at a different slope must be able to revive.
    """
    with np.errstate(under="ignore"):
        tilt = np.exp2(-slope * dmat)
    q = np.maximum(q0, _Q_FLOOR)
    q = q / q.sum()
    iters = 0
    prev = None
    while iters < max_iters:
        iters += 1
        w = q[None, :] * tilt
        w /= w.sum(axis=1, keepdims=True)
        q_new = px @ w
        delta = np.abs(q_new - q).max()
        q = q_new
        if prev is not None and delta < tol:
            break
        prev = delta
    w = q[None, :] * tilt
    w /= w.sum(axis=1, keepdims=True)
    joint = px[:, None] * w
    rate = float(special.rel_entr(joint, np.outer(px, q)).sum() / LN2)
    dist = float((joint * dmat).sum())
    return w, q, rate, dist, iters


def _lossless_channel(dmat):
    """Deterministic zero-distortion rows (first zero entry per source letter)."""
    ch = np.zeros_like(dmat)
    idx = np.argmax(dmat == 0, axis=1)
    ch[np.arange(dmat.shape[0]), idx] = 1.0
    return ch


def rate_distortion(p: Pmf, d: DistortionMeasure, D: float,
                    tol: float = _RATE_TOL, max_iters: int = _MAX_BA_ITERS) -> RDSolution:
    """R(D) = min I(X;Xhat) subject to E[d] <= D, by slope bisection."""
    _check_level(D)
    px = p.probs
    dmat = d.matrix
    if dmat.shape[0] != px.shape[0]:
        raise DomainError("rate_distortion: distortion rows do not match alphabet")

    if D == 0.0:
        ch = _lossless_channel(dmat)
        q = px @ ch
        return RDSolution(rate=entropy(p), channel=ch, output_marginal=q,
                          slope=math.inf, iterations=0, converged=True, distortion=0.0)

    # distortion achievable at zero rate: best constant reproduction letter
    rate0_dist = float((px @ dmat).min())
    if D >= rate0_dist - 1e-15:
        best = int(np.argmin(px @ dmat))
        q = np.zeros(dmat.shape[1])
        q[best] = 1.0
        ch = np.tile(q, (px.shape[0], 1))
        return RDSolution(rate=0.0, channel=ch, output_marginal=q,
                          slope=0.0, iterations=0, converged=True, distortion=rate0_dist)

    q = np.full(dmat.shape[1], 1.0 / dmat.shape[1])
    s_lo, s_hi = 0.0, 1.0
    total = 0
    while s_hi < _SLOPE_CAP:
        _, q, _, dist, it = _ba_fixed_slope(px, dmat, s_hi, q, tol, max_iters)
        total += it
        if dist <= D:
            break
        s_lo = s_hi
        s_hi *= 2.0
    sol = None
    for _ in range(200):
        s = 0.5 * (s_lo + s_hi)
        ch, q, rate, dist, it = _ba_fixed_slope(px, dmat, s, q, tol, max_iters)
        total += it
        sol = (ch, q, rate, dist, s)
        if abs(dist - D) <= _DIST_TOL:
            break
        if dist > D:
            s_lo = s
        else:
            s_hi = s
    ch, q, rate, dist, s = sol
    if dist > D + 1e-9:   # land on the feasible side of the bracket
        ch, q, rate, dist, it = _ba_fixed_slope(px, dmat, s_hi, q, tol, max_iters)
        total += it
        s = s_hi
    return RDSolution(rate=max(rate, 0.0), channel=ch, output_marginal=q,
                      slope=s, iterations=total,
                      converged=total < max_iters * 200, distortion=dist)


# ---------------------------------------------------------------------------
# conditional solver (common side information W)
# ---------------------------------------------------------------------------

def _cond_ba_fixed_slope(pw, px_g_w, dmat, slope, q0, tol=_RATE_TOL, max_iters=_MAX_BA_ITERS):
    """Per-w tilt fixed point at a common slope.

    pw: (nw,), px_g_w: (nw, nx), q0: (nw, nxh).  Returns channel (nw, nx, nxh).
    """
    with np.errstate(under="ignore"):
        tilt = np.exp2(-slope * dmat)[None, :, :]    # (1, nx, nxh)
    q = np.maximum(q0, _Q_FLOOR)
    q = q / q.sum(axis=1, keepdims=True)
    iters = 0
    while iters < max_iters:
        iters += 1
        w = q[:, None, :] * tilt
        w /= w.sum(axis=2, keepdims=True)
        q_new = np.einsum("wx,wxh->wh", px_g_w, w)
        delta = np.abs(q_new - q).max()
        q = q_new
        if delta < tol:
            break
    w = q[:, None, :] * tilt
    w /= w.sum(axis=2, keepdims=True)
    joint = pw[:, None, None] * px_g_w[:, :, None] * w          # (w, x, xh)
    ref = (pw[:, None] * q)[:, None, :] * px_g_w[:, :, None]
    rate = float(special.rel_entr(joint, ref).sum() / LN2)
    dist = float((joint * dmat[None, :, :]).sum())
    return w, q, rate, dist, iters


class _CondRDState:
    """Warm-start container for repeated conditional solves."""

    __slots__ = ("slope", "q")

    def __init__(self):
        self.slope = None
        self.q = None


def _cond_rate_distortion_core(pw, px_g_w, dmat, D, state=None,
                               tol=_RATE_TOL, max_iters=_MAX_BA_ITERS,
                               dist_tol=_DIST_TOL):
    """Slope-bisected conditional RD; pw rows with zero mass must be padded upstream."""
    nw, nx = px_g_w.shape
    nxh = dmat.shape[1]
    if D == 0.0:
        ch = np.tile(_lossless_channel(dmat)[None, :, :], (nw, 1, 1))
        q = np.einsum("wx,wxh->wh", px_g_w, ch)
        joint = pw[:, None, None] * px_g_w[:, :, None] * ch
        ref = (pw[:, None] * q)[:, None, :] * px_g_w[:, :, None]
        rate = float(special.rel_entr(joint, ref).sum() / LN2)
        return rate, ch, q, 0.0, math.inf, 0

    rate0_dist = float((pw * np.einsum("wx,xh->wh", px_g_w, dmat).min(axis=1)).sum())
    if D >= rate0_dist - 1e-15:
        best = np.argmin(np.einsum("wx,xh->wh", px_g_w, dmat), axis=1)
        q = np.zeros((nw, nxh))
        q[np.arange(nw), best] = 1.0
        ch = np.tile(q[:, None, :], (1, nx, 1))
        return 0.0, ch, q, rate0_dist, 0.0, 0

    if state is not None and state.q is not None and state.q.shape == (nw, nxh):
        q = state.q.copy()
    else:
        q = np.full((nw, nxh), 1.0 / nxh)

    total = 0
    s_guess = state.slope if (state is not None and state.slope) else 1.0
    s_lo, s_hi = 0.0, max(1.0, s_guess)
    while s_hi < _SLOPE_CAP:
        _, q, _, dist, it = _cond_ba_fixed_slope(pw, px_g_w, dmat, s_hi, q, tol, max_iters)
        total += it
        if dist <= D:
            break
        s_lo = s_hi
        s_hi *= 2.0
    sol = None
    for _ in range(200):
        s = 0.5 * (s_lo + s_hi)
        ch, q, rate, dist, it = _cond_ba_fixed_slope(pw, px_g_w, dmat, s, q, tol, max_iters)
        total += it
        sol = (ch, q, rate, dist, s)
        if abs(dist - D) <= dist_tol:
            break
        if dist > D:
            s_lo = s
        else:
            s_hi = s
    ch, q, rate, dist, s = sol
    if dist > D + 1e-9:
        ch, q, rate, dist, it = _cond_ba_fixed_slope(pw, px_g_w, dmat, s_hi, q, tol, max_iters)
        total += it
        s = s_hi
    if state is not None:
        state.slope, state.q = s, q.copy()
    return max(rate, 0.0), ch, q, dist, s, total


def conditional_rate_distortion(p_xw: JointPmf, d: DistortionMeasure, D: float,
                                tol: float = _RATE_TOL,
                                max_iters: int = _MAX_BA_ITERS) -> RDSolution:
    """min sum_w P(w) I(X;Xhat|W=w) under the single global constraint E[d] <= D.

    `p_xw.probs[x, w]` is the joint law of (X, W); the per-w subproblems share
    one Lagrange slope (waterfilling over a common multiplier).
    """
    _check_level(D)
    probs = p_xw.probs
    pw = probs.sum(axis=0)
    nx, nw = probs.shape
    px_g_w = np.where(pw[None, :] > 0, probs / np.maximum(pw[None, :], 1e-300),
                      probs.sum(axis=1, keepdims=True)).T        # (nw, nx); dead w padded
    if d.matrix.shape[0] != nx:
        raise DomainError("conditional_rate_distortion: distortion rows do not match |X|")
    rate, ch, q, dist, s, iters = _cond_rate_distortion_core(pw, px_g_w, d.matrix, D,
                                                             tol=tol, max_iters=max_iters)
    return RDSolution(rate=rate, channel=ch, output_marginal=q, slope=s,
                      iterations=iters, converged=True, distortion=dist)


# ---------------------------------------------------------------------------
# joint two-constraint solver
# ---------------------------------------------------------------------------

def _joint_ba_fixed_slopes(pxy_flat, dxf, dyf, s1, s2, q0, tol, max_iters):
    with np.errstate(under="ignore"):
        tilt = np.exp2(-s1 * dxf - s2 * dyf)
    q = np.maximum(q0, _Q_FLOOR)
    q = q / q.sum()
    iters = 0
    while iters < max_iters:
        iters += 1
        w = q[None, :] * tilt
        w /= w.sum(axis=1, keepdims=True)
        q_new = pxy_flat @ w
        delta = np.abs(q_new - q).max()
        q = q_new
        if delta < tol:
            break
    w = q[None, :] * tilt
    w /= w.sum(axis=1, keepdims=True)
    joint = pxy_flat[:, None] * w
    rate = float(special.rel_entr(joint, np.outer(pxy_flat, q)).sum() / LN2)
    d1 = float((joint * dxf).sum())
    d2 = float((joint * dyf).sum())
    return w, q, rate, d1, d2, iters


def joint_rate_distortion(p_xy: JointPmf, dx: DistortionMeasure, dy: DistortionMeasure,
                          D1: float, D2: float, tol: float = _RATE_TOL,
                          max_iters: int = _MAX_BA_ITERS) -> JointRDSolution:
    """R_XY(D1, D2) = min I(XY; XhatYhat) s.t. E[d_X] <= D1, E[d_Y] <= D2.

    Two-multiplier alternating minimization over the product reproduction
    alphabet; the slopes are located by alternating 1-D bisections until both
    distortion targets are met (or a constraint goes slack).
    """
    _check_level(D1, "D1")
    _check_level(D2, "D2")
    nx, ny = p_xy.shape
    nxh, nyh = dx.matrix.shape[1], dy.matrix.shape[1]

    # degenerate lossless branches
    if D1 == 0.0 and D2 == 0.0:
        ch = np.zeros((nx, ny, nxh, nyh))
        ix = np.argmax(dx.matrix == 0, axis=1)
        iy = np.argmax(dy.matrix == 0, axis=1)
        for x in range(nx):
            for y in range(ny):
                ch[x, y, ix[x], iy[y]] = 1.0
        out = np.einsum("xy,xyab->ab", p_xy.probs, ch)
        from .probcore import entropy_joint
        return JointRDSolution(rate=entropy_joint(p_xy), channel=ch, output_marginal=out,
                               nu1=math.inf, nu2=math.inf, iterations=0, converged=True,
                               distortion_x=0.0, distortion_y=0.0)
    if D1 == 0.0 or D2 == 0.0:
        return _joint_rd_one_lossless(p_xy, dx, dy, D1, D2, tol, max_iters)

    pflat = p_xy.probs.reshape(-1)
    dxf = np.repeat(np.repeat(dx.matrix[:, None, :, None], ny, 1), nyh, 3).reshape(nx * ny, nxh * nyh)
    dyf = np.repeat(np.repeat(dy.matrix[None, :, None, :], nx, 0), nxh, 2).reshape(nx * ny, nxh * nyh)

    q = np.full(nxh * nyh, 1.0 / (nxh * nyh))
    s1, s2 = 1.0, 1.0
    total = 0
    res = None

    def solve_axis(target, s_other, axis, q):
        # bisect the slope on one axis with the other held fixed
        nonlocal total
        lo, hi = 0.0, None
        s = 1.0
        # check slack at zero slope first
        args0 = (0.0, s_other) if axis == 1 else (s_other, 0.0)
        w, q, r, e1, e2, it = _joint_ba_fixed_slopes(pflat, dxf, dyf, *args0, q, tol, max_iters)
        total += it
        mine = e1 if axis == 1 else e2
        if mine <= target:
            return 0.0, (w, q, r, e1, e2)
        hi_val = 1.0
        while hi_val < _SLOPE_CAP:
            args = (hi_val, s_other) if axis == 1 else (s_other, hi_val)
            w, q, r, e1, e2, it = _joint_ba_fixed_slopes(pflat, dxf, dyf, *args, q, tol, max_iters)
            total += it
            mine = e1 if axis == 1 else e2
            if mine <= target:
                break
            lo = hi_val
            hi_val *= 2.0
        hi = hi_val
        best = (w, q, r, e1, e2)
        s = hi
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            args = (mid, s_other) if axis == 1 else (s_other, mid)
            w, q, r, e1, e2, it = _joint_ba_fixed_slopes(pflat, dxf, dyf, *args, q, tol, max_iters)
            total += it
            mine = e1 if axis == 1 else e2
            best, s = (w, q, r, e1, e2), mid
            if abs(mine - target) <= _DIST_TOL:
                break
            if mine > target:
                lo = mid
            else:
                hi = mid
        return s, best

    converged = False
    for _ in range(80):
        s2, res = solve_axis(D2, s1, axis=2, q=q)
        q = res[1]
        s1, res = solve_axis(D1, s2, axis=1, q=q)
        q = res[1]
        e1, e2 = res[3], res[4]
        ok1 = e1 <= D1 + _DIST_TOL * 10 and (s1 == 0.0 or abs(e1 - D1) <= 1e-9)
        ok2 = e2 <= D2 + _DIST_TOL * 10 and (s2 == 0.0 or abs(e2 - D2) <= 1e-9)
        if ok1 and ok2:
            converged = True
            break
    w, q, rate, e1, e2 = res
    return JointRDSolution(rate=max(rate, 0.0),
                           channel=w.reshape(nx, ny, nxh, nyh),
                           output_marginal=q.reshape(nxh, nyh),
                           nu1=s1, nu2=s2, iterations=total, converged=converged,
                           distortion_x=e1, distortion_y=e2)


def _joint_rd_one_lossless(p_xy, dx, dy, D1, D2, tol, max_iters):
    """D1 = 0 (or D2 = 0): rate = H(X) + R_{Y|X}(D2), reproduction Xhat = X."""
    nx, ny = p_xy.shape
    nxh, nyh = dx.matrix.shape[1], dy.matrix.shape[1]
    if D1 == 0.0:
        cond = conditional_rate_distortion(JointPmf(p_xy.probs.T), dy, D2,
                                           tol=tol, max_iters=max_iters)
        # cond.channel: (w=x, y, yh)
        ch = np.zeros((nx, ny, nxh, nyh))
        ix = np.argmax(dx.matrix == 0, axis=1)
        for x in range(nx):
            ch[x, :, ix[x], :] = cond.channel[x]
        rate = entropy(p_xy.marginal_x()) + cond.rate
        out = np.einsum("xy,xyab->ab", p_xy.probs, ch)
        return JointRDSolution(rate=rate, channel=ch, output_marginal=out,
                               nu1=math.inf, nu2=cond.slope, iterations=cond.iterations,
                               converged=cond.converged, distortion_x=0.0,
                               distortion_y=cond.distortion)
    sol = _joint_rd_one_lossless(JointPmf(p_xy.probs.T), dy, dx, D2, D1, tol, max_iters)
    return JointRDSolution(rate=sol.rate,
                           channel=np.transpose(sol.channel, (1, 0, 3, 2)),
                           output_marginal=sol.output_marginal.T,
                           nu1=sol.nu2, nu2=sol.nu1, iterations=sol.iterations,
                           converged=sol.converged, distortion_x=sol.distortion_y,
                           distortion_y=sol.distortion_x)


# ---------------------------------------------------------------------------
# tilted densities
# ---------------------------------------------------------------------------

def joint_tilted_density(sol: JointRDSolution, p_xy: JointPmf,
                         dx: DistortionMeasure, dy: DistortionMeasure,
                         D1: float, D2: float) -> TiltedTable:
    """Joint (D1,D2)-tilted information density table.

    i(x,y) = -log sum_{xh,yh} P*(xh,yh) 2^(nu1 (D1 - d_X) + nu2 (D2 - d_Y)).
    Degenerate D = 0 levels switch to the lossless branches (the conditional
    density given the losslessly reproduced coordinate).
    """
    nx, ny = p_xy.shape
    if D1 == 0.0 and D2 == 0.0:
        with np.errstate(divide="ignore"):
            vals = -np.log2(p_xy.probs)
        return TiltedTable.from_values(np.where(p_xy.probs > 0, vals, 0.0), p_xy)
    if D1 == 0.0 or D2 == 0.0:
        return _joint_tilted_one_lossless(sol, p_xy, dx, dy, D1, D2)
    if not (sol.nu1 > 0 or sol.nu2 > 0) or not math.isfinite(sol.nu1) or not math.isfinite(sol.nu2):
        raise DomainError("joint_tilted_density: solution is missing finite slopes")
    out = sol.output_marginal           # (xh, yh)
    ex = np.exp2(sol.nu1 * (D1 - dx.matrix))     # (x, xh)
    ey = np.exp2(sol.nu2 * (D2 - dy.matrix))     # (y, yh)
    s = np.einsum("ab,xa,yb->xy", out, ex, ey)
    vals = -np.log2(s)
    return TiltedTable.from_values(vals, p_xy)


def _joint_tilted_one_lossless(sol, p_xy, dx, dy, D1, D2):
    px = p_xy.probs.sum(axis=1)
    py = p_xy.probs.sum(axis=0)
    if D1 == 0.0:
        # -log E_{P*_{Yhat|X=x}} 2^(nu2 (D2 - d_Y(y, Yhat))) - log P_X(x)
        cond_out = np.einsum("xyab->xb", sol.channel * p_xy.probs[:, :, None, None])
        cond_out /= np.maximum(cond_out.sum(axis=1, keepdims=True), 1e-300)
        ey = np.exp2(sol.nu2 * (D2 - dy.matrix))       # (y, yh)
        s = np.einsum("xb,yb->xy", cond_out, ey)
        with np.errstate(divide="ignore"):
            vals = -np.log2(s) - np.log2(px)[:, None]
        return TiltedTable.from_values(np.where(p_xy.probs > 0, vals, 0.0), p_xy)
    t = _joint_tilted_one_lossless(
        JointRDSolution(rate=sol.rate, channel=np.transpose(sol.channel, (1, 0, 3, 2)),
                        output_marginal=sol.output_marginal.T, nu1=sol.nu2, nu2=sol.nu1,
                        iterations=sol.iterations, converged=sol.converged,
                        distortion_x=sol.distortion_y, distortion_y=sol.distortion_x),
        JointPmf(p_xy.probs.T), dy, dx, D2, D1)
    return TiltedTable.from_values(t.values.T, p_xy)


def conditional_d_tilted(w: int, out_marginal: np.ndarray, d: DistortionMeasure,
                         D: float, gamma_over_lambda: float) -> np.ndarray:
    """Per-x conditional tilted density j(x, D | w) for one conditioning symbol.

    j(x, D | w) = -log sum_xh P*_{Xhat|W}(xh | w) 2^(ratio (D - d(x, xh))).
    `w` only labels diagnostics; the computation uses the supplied row.
    """
    if not gamma_over_lambda > 0:
        raise DomainError(f"conditional_d_tilted: ratio must be positive (w={w})")
    q = np.asarray(out_marginal, dtype=float)
    if q.shape[0] != d.matrix.shape[1]:
        raise DomainError(f"conditional_d_tilted: marginal length mismatch (w={w})")
    s = np.einsum("h,xh->x", q, np.exp2(gamma_over_lambda * (D - d.matrix)))
    return -np.log2(s)
