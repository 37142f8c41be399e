"""Unstable tubes, stable holonomies, and product densities on them.

A tube chart thickens a standard pair's curve by a two dimensional disk of
ambient shifts, giving a parallel family of leaves.  This module estimates
how far center-stable structure extends around a point (`cs_radius`), matches
points across leaves by orbit shadowing (`holonomy_point`), differentiates
the match either directly or through a virtual-wall reduction
(`holonomy_jacobian`), tabulates both over the tube (`build_holonomy_table`),
and assembles the product density on the tube: the mollified disk factor
`q_density`, the leafwise density `G0_eval`, the singularity-avoiding
refinement `build_H1`, and the globally extended `build_G`.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.optimize import brentq

from . import dynamics as dyn
from . import front
from . import norms
from .calibration import load_calibration
from .curves import StandardPair
from .errors import (
    AmbiguousMatch,
    NoCrossing,
    NotGoodCurve,
    NotInProduct,
    OutOfDisk,
)

__all__ = [
    "TubeChart",
    "MatchResult",
    "HolonomyTable",
    "H1Set",
    "ApproxDensity",
    "build_tube",
    "cs_radius",
    "stable_match",
    "holonomy_point",
    "holonomy_jacobian",
    "build_holonomy_table",
    "q_density",
    "G0_eval",
    "build_H1",
    "build_G",
    "dump_diagnostics",
]

_HALF_PI = math.pi / 2.0


def _calib():
    c = load_calibration()["hyperbolicity"]
    return c["lambda_per_collision"], c["c_tr"]


# ---------------------------------------------------------------------------
# center-stable radius


def _layer_gap(rho, k0=5):
    """Distance in rho to the boundary of its own homogeneity layer."""
    a = abs(rho)
    edge0 = _HALF_PI - 1.0 / k0**2
    if a < edge0:
        return edge0 - a
    if a >= _HALF_PI:
        return 0.0
    k = int(1.0 / math.sqrt(_HALF_PI - a))
    lo = _HALF_PI - 1.0 / k**2
    hi = _HALF_PI - 1.0 / (k + 1) ** 2
    return min(a - lo, hi - a)


def _one_step_tag(table, cp, k0):
    """Wall and layer of the image collision, or None at a tangency."""
    if abs(cp.rho) >= _HALF_PI:
        return None
    try:
        rec = dyn.billiard_map(table, cp)
    except Exception:
        return None
    p = rec.point
    return (p.wall, dyn.homogeneity_index(p.rho, k0))


def _one_step_sing_dist(table, cp, cap, k0=5):
    """Map-plane distance from cp to the one-step singular set, capped.

    Marches in the four coordinate directions until the image wall or
    layer changes (or the point itself turns grazing), then bisects the
    last step.  Anything beyond `cap` is reported as `cap`.
    """
    base = _one_step_tag(table, cp, k0)
    if base is None:
        return 0.0
    best = cap
    for dq, dr in ((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)):
        step = best / 6.0
        if step <= 0.0:
            break
        t_prev, t, hit = 0.0, step, None
        while t <= best * (1.0 + 1e-12):
            probe = dyn.CollisionPoint(cp.wall, cp.q + dq * t, cp.rho + dr * t)
            if _one_step_tag(table, probe, k0) != base:
                hit = t
                break
            t_prev = t
            t += step
        if hit is None:
            continue
        lo, hi = t_prev, hit
        while hi - lo > 0.05 * hi:
            mid = 0.5 * (lo + hi)
            probe = dyn.CollisionPoint(cp.wall, cp.q + dq * mid, cp.rho + dr * mid)
            if _one_step_tag(table, probe, k0) != base:
                hi = mid
            else:
                lo = mid
        best = min(best, hi)
    return best


def cs_radius(table, point, n_max=10, lam=None, k0=5):
    """Estimated center-stable reach of a flow point.

    Projects the point to its last collision and walks the forward orbit;
    at step n the one-step singularity distance and the distance to the
    current homogeneity-layer boundary are inflated by lambda^n, and the
    minimum over steps is returned.  `lam` defaults to the calibrated
    per-collision expansion rate.
    """
    if lam is None:
        lam, _ = _calib()
    cp, _ = dyn.project_to_map(table, point)
    best = 2.0
    cur = cp
    for n in range(n_max + 1):
        scale = lam**n
        gap = _layer_gap(cur.rho, k0)
        cap = min(best / scale, 2.0)
        d = min(_one_step_sing_dist(table, cur, cap, k0), gap)
        best = min(best, scale * d)
        if n < n_max:
            if abs(cur.rho) >= _HALF_PI:
                break
            try:
                cur = dyn.billiard_map(table, cur).point
            except Exception:
                break
    return best


# ---------------------------------------------------------------------------
# tube chart


@dataclass(frozen=True)
class TubeChart:
    """A parallel tube of leaves over a standard pair's curve.

    Leaves are ambient shifts of the base curve by vectors in the disk of
    radius `eps` spanned by `e1`, `e2`, both orthogonal to the curve
    tangent `axis` at `center_s`.  All three are unit vectors in the flat
    (x, y, xi) metric.
    """

    pair: StandardPair
    eps: float
    center_s: float
    center: np.ndarray
    axis: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @property
    def curve(self):
        return self.pair.curve

    @property
    def table(self):
        return self.pair.curve.table

    def point3(self, s):
        p = self.curve.point_at(float(s))
        return np.array([p.x, p.y, p.xi])

    def tangent3(self, s):
        t = np.asarray(self.curve._tangent3(float(s)), dtype=float)
        return t / np.linalg.norm(t)

    def cos_psi(self, s):
        """Cosine of the leaf-tangent angle against the disk normal."""
        return float(np.dot(self.tangent3(s), self.axis))

    def leaf_point(self, s, z1, z2):
        """Phase point at arc parameter s on the leaf shifted by (z1, z2)."""
        p = self.point3(s) + z1 * self.e1 + z2 * self.e2
        return dyn.PhasePoint(p[0] % 1.0, p[1] % 1.0, p[2] % 1.0)

    def _rel(self, r):
        """Min-image displacement of a phase point from the tube center."""
        v = np.array([r.x, r.y, r.xi]) - self.center
        return v - np.round(v)

    def decompose(self, r):
        """Chart coordinates (s, z1, z2) of a phase point near the tube.

        Solves for the arc parameter where the displacement from the base
        curve is normal to the axis, then reads the disk coordinates.
        Raises NotInProduct when the point has no axial foothold over the
        curve.
        """
        v = self._rel(r)
        tgt = self.center + v

        def axial(s):
            return float(np.dot(self.axis, tgt - self.point3(s)))

        ell = self.curve.length
        a0, a1 = axial(0.0), axial(ell)
        if a0 == 0.0:
            s = 0.0
        elif a1 == 0.0:
            s = ell
        elif a0 * a1 > 0.0:
            raise NotInProduct("no axial foothold over the base curve")
        else:
            s = brentq(axial, 0.0, ell, xtol=1e-14)
        d = tgt - self.point3(s)
        return float(s), float(np.dot(self.e1, d)), float(np.dot(self.e2, d))

    def mu_U(self):
        """Tube measure: axial projection length times disk area, normalized."""
        ss = np.linspace(0.0, self.curve.length, 257)
        cos = np.array([self.cos_psi(s) for s in ss])
        L = float(simpson(cos, x=ss))
        leb = self.table.area
        return L * math.pi * self.eps**2 / leb


def build_tube(pair, eps, center_s=None):
    """Erect the parallel tube of half-width `eps` over a standard pair.

    The disk sits at the curve midpoint unless `center_s` is given.
    Raises NotGoodCurve when the curve failed validation, when leaves
    could leave the admissible region (clearance below eps0 after the
    shift), or when the tangent tilts beyond 60 degrees from the axis
    somewhere along the curve.
    """
    curve = pair.curve
    if not curve.good:
        raise NotGoodCurve("base curve failed admissibility validation")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    eps0 = curve.params["eps0"]
    if curve.min_wall_distance() - eps < eps0:
        raise NotGoodCurve("shifted leaves would fall below the clearance floor")
    if center_s is None:
        center_s = 0.5 * curve.length
    p = curve.point_at(center_s)
    center = np.array([p.x, p.y, p.xi])
    t3 = np.asarray(curve._tangent3(center_s), dtype=float)
    axis = t3 / np.linalg.norm(t3)
    seed = np.array([1.0, 0.0, 0.0])
    if abs(axis[0]) > 0.9:
        seed = np.array([0.0, 1.0, 0.0])
    e1 = seed - np.dot(seed, axis) * axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    chart = TubeChart(pair, float(eps), float(center_s), center, axis, e1, e2)
    ss = np.linspace(0.0, curve.length, 129)
    cos = np.array([chart.cos_psi(s) for s in ss])
    if cos.min() < 0.5:
        raise NotGoodCurve("leaf tangent tilts beyond 60 degrees from the axis")
    return chart


# ---------------------------------------------------------------------------
# shadowing match


@dataclass(frozen=True)
class MatchResult:
    """Outcome of a stable match onto a target curve.

    `sigma` is the matched arc parameter, `residual` the smallest orbit
    mismatch along the compared footprints, `dists` the full mismatch
    sequence, and `evals` the number of candidate orbits examined.
    """

    sigma: float
    residual: float
    dists: tuple
    evals: int


def _wall_periods(table):
    return [2.0 * math.pi * s.radius for s in table.scatterers]


def _ref_orbit(table, x, n, k0=5):
    cp, _ = dyn.project_to_map(table, x)
    out = []
    cur = cp
    for k in range(n + 1):
        out.append((cur.wall, dyn.homogeneity_index(cur.rho, k0), cur.q, cur.rho))
        if k < n:
            cur = dyn.billiard_map(table, cur).point
    return out


def _orbit_offset(table, pers, ref, y, depth, k0=5):
    """Signed q-offset of y's footprint orbit at `depth`, None off-pattern."""
    try:
        cp, _ = dyn.project_to_map(table, y)
    except Exception:
        return None
    cur = cp
    dq = 0.0
    for k in range(depth + 1):
        w, _lay, q0, r0 = ref[k]
        if cur.wall != w:
            return None
        per = pers[cur.wall]
        dq = cur.q - q0
        dq -= per * round(dq / per)
        if math.hypot(dq, cur.rho - r0) > 0.3:
            return None
        if k < depth:
            try:
                cur = dyn.billiard_map(table, cur).point
            except Exception:
                return None
    return dq


def _orbit_dists(table, pers, ref, y, depth, k0=5):
    """Footprint mismatch sequence with a layer-mismatch surcharge.

    A wall mismatch disqualifies the candidate outright, but a layer
    mismatch only inflates that step's distance by 1.5: deep into the
    orbit the certified layer of the reference is itself at the mercy of
    roundoff, and a hard rejection would discard true matches.
    """
    try:
        cp, _ = dyn.project_to_map(table, y)
    except Exception:
        return None
    cur = cp
    out = []
    for k in range(depth + 1):
        w, lay, q0, r0 = ref[k]
        if cur.wall != w:
            return None
        per = pers[cur.wall]
        dq = cur.q - q0
        dq -= per * round(dq / per)
        d = math.hypot(dq, cur.rho - r0)
        if dyn.homogeneity_index(cur.rho, k0) != lay:
            d *= 1.5
        out.append(d)
        if d > 0.3:
            return None
        if k < depth:
            try:
                cur = dyn.billiard_map(table, cur).point
            except Exception:
                return None
    return out


def _sign_brackets(D, depth, center, w0, wmax, lo, hi, want_all=False):
    """Grow a window around `center` until the offset changes sign.

    Returns the sign-change cell nearest the center, or with `want_all`
    every disjoint cell found at the first window that has one.
    """
    w = w0
    while w <= wmax * 1.0001:
        a = max(lo, center - w)
        b = min(hi, center + w)
        ss = np.linspace(a, b, 9)
        vs = [D(depth, float(s)) for s in ss]
        cells = []
        for i in range(8):
            if vs[i] is not None and vs[i + 1] is not None and vs[i] * vs[i + 1] <= 0:
                if cells and cells[-1][1] == float(ss[i]) and vs[i] == 0.0:
                    continue  # same root shared by two adjacent cells
                cells.append((float(ss[i]), float(ss[i + 1]), vs[i], vs[i + 1]))
        if cells:
            if want_all:
                return cells
            cells.sort(key=lambda c: abs(0.5 * (c[0] + c[1]) - center))
            return [cells[0]]
        if a <= lo and b >= hi:
            break
        w *= 4.0
    return []


def default_match_depth(tol, lam=None):
    """Comparison horizon: enough steps for the contraction to pass `tol`."""
    if lam is None:
        lam, _ = _calib()
    return int(math.ceil(math.log(1.0 / tol) / math.log(lam))) + 2


def stable_match(table, x, target_eval, s_lo, s_hi, center, span0,
                 tol=1e-7, n_match=None, n_start=0, k0=5, want_all=False):
    """Match the forward orbit of x onto a parametrized target curve.

    `target_eval(s)` must return the phase point of the target at arc
    parameter s in [s_lo, s_hi].  The match descends through comparison
    depths: at each depth the signed footprint offset is bisected to a
    sign change, the localized root seeding the bracket of the next
    depth.  Returns a MatchResult, or a list of them under `want_all`
    when several level-zero crossings complete; returns None when no
    crossing survives to the full horizon within `tol`.
    """
    if n_match is None:
        n_match = default_match_depth(tol)
    pers = _wall_periods(table)
    ref = _ref_orbit(table, x, n_match, k0)
    evals = [0]

    def D(depth, s):
        evals[0] += 1
        return _orbit_offset(table, pers, ref, target_eval(s), depth, k0)

    def descend(a, b, fa, fb, depth0):
        ctr, w0 = 0.5 * (a + b), (b - a)
        for depth in range(depth0, n_match + 1):
            cells = _sign_brackets(D, depth, ctr, w0, (s_hi - s_lo), s_lo, s_hi)
            if not cells:
                return None
            a, b, fa, fb = cells[0]
            target = max((b - a) * 0.02, 1e-14)
            while b - a > target:
                m = 0.5 * (a + b)
                fm = D(depth, m)
                if fm is None:
                    if abs(fa) < abs(fb):
                        b = m
                    else:
                        a = m
                    continue
                if fa * fm <= 0:
                    b, fb = m, fm
                else:
                    a, fa = m, fm
            ctr = 0.5 * (a + b)
            w0 = max(4.0 * (b - a), 1e-12)
            if b - a < 1e-13:
                break
        ds = _orbit_dists(table, pers, ref, target_eval(ctr), n_match, k0)
        if ds is None or min(ds) > tol:
            return None
        return MatchResult(ctr, min(ds), tuple(ds), evals[0])

    first = _sign_brackets(D, n_start, center, span0, (s_hi - s_lo),
                           s_lo, s_hi, want_all=want_all)
    if not first:
        return [] if want_all else None
    results = []
    for cell in first:
        r = descend(*cell, n_start)
        if r is not None:
            results.append(r)
    if want_all:
        return results
    return results[0] if results else None


def holonomy_point(chart, s, z, tol=1e-7, n_match=None, guess=None,
                   span0=None, n_start=0):
    """Stable holonomy of the base point at arc s onto the leaf at z.

    Returns a MatchResult whose sigma is the arc parameter on the leaf.
    A `guess` close to the answer lets the search start from a narrow
    `span0` and a deeper `n_start`; if that fails, a full search runs
    before giving up.  Raises NoCrossing when no shadowing partner exists
    on the leaf within the transversality window, and AmbiguousMatch when
    two separated partners both survive the full horizon.
    """
    z1, z2 = float(z[0]), float(z[1])
    x = chart.curve.point_at(float(s))
    _, ctr = _calib()
    wide = 2.0 * (abs(z1) + abs(z2)) / math.sin(ctr) + 10.0 * chart.eps

    def on_leaf(t):
        return chart.leaf_point(t, z1, z2)

    table = chart.table
    ell = chart.curve.length
    if guess is not None:
        out = stable_match(table, x, on_leaf, 0.0, ell, float(guess),
                           wide if span0 is None else float(span0),
                           tol=tol, n_match=n_match, n_start=n_start)
        if out is None:
            out = stable_match(table, x, on_leaf, 0.0, ell, float(s), wide,
                               tol=tol, n_match=n_match)
        if out is None:
            raise NoCrossing("no shadowing partner on the leaf")
        return out
    results = stable_match(table, x, on_leaf, 0.0, ell, float(s), wide,
                           tol=tol, n_match=n_match, want_all=True)
    if not results:
        raise NoCrossing("no shadowing partner on the leaf")
    if len(results) > 1:
        sigmas = sorted(r.sigma for r in results)
        if sigmas[-1] - sigmas[0] > 100.0 * tol:
            raise AmbiguousMatch("two separated shadowing partners survive")
    return min(results, key=lambda r: r.residual)


# ---------------------------------------------------------------------------
# holonomy Jacobian


def _fd_jacobian(chart, s, z, delta, tol):
    base = holonomy_point(chart, s, z, tol=tol)
    w = 32.0 * delta
    hi = holonomy_point(chart, s + delta, z, tol=tol,
                        guess=base.sigma + delta, span0=w, n_start=2)
    lo = holonomy_point(chart, s - delta, z, tol=tol,
                        guess=base.sigma - delta, span0=w, n_start=2)
    return (hi.sigma - lo.sigma) / (2.0 * delta)


def _virtual_wall(chart):
    """Circular reference wall behind the curve for the lift reduction.

    Curvature is half the smallest scatterer curvature; the arc sits one
    curve length upstream of the tube center, facing the flow.
    """
    table = chart.table
    b_min = min(1.0 / sc.radius for sc in table.scatterers)
    kw = 0.5 * b_min
    rw = 1.0 / kw
    ell = chart.curve.length
    p = chart.curve.point_at(chart.center_s)
    ang = 2.0 * math.pi * p.xi
    v = np.array([math.cos(ang), math.sin(ang)])
    pos = np.array([p.x, p.y])
    foot = pos - ell * v
    center = foot - rw * v
    return center, rw, kw, v, 5.0 * ell


def _wall_trace(wall, pos, ang):
    """Trace (r, phi, tau) of a flow point pulled back to the wall."""
    center, rw, _kw, v0, r_max = wall
    v = np.array([math.cos(ang), math.sin(ang)])
    d = pos - center
    vd = float(np.dot(v, d))
    disc = vd * vd - (float(np.dot(d, d)) - rw * rw)
    if disc < 0.0:
        raise NoCrossing("pullback ray misses the reference wall")
    tau = vd - math.sqrt(disc)
    w = d - tau * v
    nhat = w / rw
    r = rw * math.atan2(float(np.cross(v0, nhat)), float(np.dot(v0, nhat)))
    if abs(r) > r_max:
        raise NoCrossing("pullback lands beyond the reference arc")
    cphi = float(np.dot(nhat, v))
    sphi = float(np.cross(nhat, v))
    if cphi <= 0.0:
        raise NoCrossing("pullback leaves the wall tangentially")
    return r, math.atan2(sphi, cphi), tau


def _trace_frame(chart, wall, s, z1, z2, h=1e-6):
    """Trace coordinates and their arc derivatives at one leaf point."""
    out = []
    for t in (s - h, s, s + h):
        p3 = chart.point3(t) + z1 * chart.e1 + z2 * chart.e2
        ang = 2.0 * math.pi * p3[2]
        out.append(_wall_trace(wall, p3[:2], ang))
    (r0, f0, t0), (r1, f1, t1), (r2, f2, t2) = out
    dr = (r2 - r0) / (2.0 * h)
    m = (f2 - f0) / (r2 - r0)
    taup = (t2 - t0) / (r2 - r0)
    return r1, f1, t1, m, taup, dr


def holonomy_jacobian(chart, s, z, method="fd", delta=3e-7, tol=1e-7):
    """Arc-length derivative of the leaf holonomy at the base point.

    `method="fd"` differentiates the matched parameter directly.
    `method="formula"` lifts both curves back to the virtual reference
    wall and combines the two lift Jacobians with the trace-to-trace
    stretch, so only the matched positions, never their derivative along
    the base, enter from the shadowing side.
    """
    z1, z2 = float(z[0]), float(z[1])
    if z1 == 0.0 and z2 == 0.0:
        return 1.0
    if method == "fd":
        return _fd_jacobian(chart, s, z, delta, tol)
    if method != "formula":
        raise ValueError("method must be 'fd' or 'formula'")
    wall = _virtual_wall(chart)
    base = holonomy_point(chart, s, z, tol=tol)
    hi = holonomy_point(chart, s + delta, z, tol=tol, guess=base.sigma + delta)
    lo = holonomy_point(chart, s - delta, z, tol=tol, guess=base.sigma - delta)
    k_w = wall[2]
    _r1, f1, tau1, m1, tp1, _ = _trace_frame(chart, wall, float(s), 0.0, 0.0)
    _r2, f2, tau2, m2, tp2, _ = _trace_frame(chart, wall, base.sigma, z1, z2)
    b1 = (m1 + k_w) / math.cos(f1)
    b2 = (m2 + k_w) / math.cos(f2)
    j1 = front.jacobian_gamma_to_W(tau1, tp1, f1, b1, k_w)
    j2 = front.jacobian_gamma_to_W(tau2, tp2, f2, b2, k_w)
    r2_hi = _wall_trace(wall, *_leaf_pos_ang(chart, hi.sigma, z1, z2))[0]
    r2_lo = _wall_trace(wall, *_leaf_pos_ang(chart, lo.sigma, z1, z2))[0]
    r1_hi = _wall_trace(wall, *_leaf_pos_ang(chart, float(s) + delta, 0.0, 0.0))[0]
    r1_lo = _wall_trace(wall, *_leaf_pos_ang(chart, float(s) - delta, 0.0, 0.0))[0]
    dr2dr1 = (r2_hi - r2_lo) / (r1_hi - r1_lo)
    stretch = math.sqrt(1.0 + m2 * m2) / math.sqrt(1.0 + m1 * m1)
    return (j2 / j1) * stretch * dr2dr1


def _leaf_pos_ang(chart, s, z1, z2):
    p3 = chart.point3(s) + z1 * chart.e1 + z2 * chart.e2
    return p3[:2], 2.0 * math.pi * p3[2]


# ---------------------------------------------------------------------------
# holonomy table


def _z_stencil(eps):
    """Thirteen probe shifts: center, two radii on axes, one diagonal ring."""
    pts = [(0.0, 0.0)]
    for r in (0.475 * eps, 0.95 * eps):
        pts += [(r, 0.0), (-r, 0.0), (0.0, r), (0.0, -r)]
    d = 0.7 * eps / math.sqrt(2.0)
    pts += [(d, d), (-d, d), (-d, -d), (d, -d)]
    return pts


_QUAD_TERMS = 5  # z1, z2, z1^2, z1 z2, z2^2


def _quad_design(zs):
    z = np.asarray(zs, dtype=float)
    return np.column_stack([z[:, 0], z[:, 1], z[:, 0] ** 2,
                            z[:, 0] * z[:, 1], z[:, 1] ** 2])


def _quad_eval(coef, z1, z2):
    return (coef[0] * z1 + coef[1] * z2 + coef[2] * z1 * z1
            + coef[3] * z1 * z2 + coef[4] * z2 * z2)


def _table_row(chart, si, stencil, tol, delta):
    """Match and differentiate every stencil shift at one base node."""
    sig = np.empty(len(stencil))
    jh = np.empty(len(stencil))
    res = np.empty(len(stencil))
    ok = True
    order = sorted(range(len(stencil)), key=lambda i: math.hypot(*stencil[i]))
    for i in order:
        z1, z2 = stencil[i]
        if z1 == 0.0 and z2 == 0.0:
            sig[i], jh[i], res[i] = si, 1.0, 0.0
            continue
        w = 32.0 * delta
        try:
            m = holonomy_point(chart, si, (z1, z2), tol=tol)
            hi = holonomy_point(chart, si + delta, (z1, z2), tol=tol,
                                guess=m.sigma + delta, span0=w, n_start=2)
            lo = holonomy_point(chart, si - delta, (z1, z2), tol=tol,
                                guess=m.sigma - delta, span0=w, n_start=2)
        except (NoCrossing, AmbiguousMatch):
            sig[i] = jh[i] = res[i] = math.nan
            ok = False
            continue
        sig[i] = m.sigma
        jh[i] = (hi.sigma - lo.sigma) / (2.0 * delta)
        res[i] = m.residual
    return sig, jh, res, ok


@dataclass(frozen=True)
class HolonomyTable:
    """Matched positions and Jacobians tabulated over the tube.

    Rows follow `s_grid` on the base curve; columns follow the fixed
    stencil of disk shifts.  Per row, quadratic fits in z interpolate the
    holonomy displacement and Jacobian across the whole disk; rows where
    any stencil match failed carry NaN and sit outside H.
    """

    chart: TubeChart
    s_grid: np.ndarray
    stencil: tuple
    sigma: np.ndarray
    jh: np.ndarray
    residual: np.ndarray
    sigma_coef: np.ndarray
    jh_coef: np.ndarray
    fit_residual: float
    r_cs: np.ndarray
    in_H: np.ndarray
    H_intervals: tuple

    def _coef_at(self, s, table_coef):
        g = self.s_grid
        i = int(np.clip(np.searchsorted(g, s) - 1, 0, len(g) - 2))
        w = (s - g[i]) / (g[i + 1] - g[i])
        return (1.0 - w) * table_coef[i] + w * table_coef[i + 1]

    def sigma_at(self, s, z1, z2):
        """Interpolated holonomy position on leaf (z1, z2) for base arc s."""
        return float(s + _quad_eval(self._coef_at(s, self.sigma_coef), z1, z2))

    def jh_at(self, s, z1, z2):
        """Interpolated holonomy Jacobian at base arc s onto leaf (z1, z2)."""
        return float(1.0 + _quad_eval(self._coef_at(s, self.jh_coef), z1, z2))

    def sigma_inverse(self, sigma, z1, z2):
        """Base arc parameter whose holonomy lands at `sigma` on the leaf."""
        s = float(sigma)
        for _ in range(6):
            s = float(sigma) - _quad_eval(self._coef_at(s, self.sigma_coef), z1, z2)
        return s

    def h_contains(self, s):
        return any(a <= s <= b for a, b in self.H_intervals)


def _h_intervals(chart, s_grid, r_cs, stencil_ok, eps, ctr):
    """Intervals of the base curve where the product structure holds.

    The end margin is excised outright.  Inside it the center-stable
    radius is thresholded; wherever the threshold is crossed between two
    grid nodes the boundary is refined by bisecting the radius estimate,
    while stencil-match failures cut at grid resolution.
    """
    ell = chart.curve.length
    margin = 11.0 * eps / math.sin(ctr)
    lo, hi = margin, ell - margin
    if lo >= hi:
        return ()
    thr = 10.0 * eps / math.sin(ctr)
    table = chart.table

    def radius_gap(t):
        return cs_radius(table, chart.curve.point_at(float(t))) - thr

    def edge_between(i, j):
        """Refined boundary inside the cell (s_grid[i], s_grid[j])."""
        deep_i, deep_j = r_cs[i] >= thr, r_cs[j] >= thr
        if deep_i != deep_j:
            try:
                return brentq(radius_gap, float(s_grid[i]), float(s_grid[j]),
                              xtol=1e-9)
            except ValueError:
                pass
        return 0.5 * (s_grid[i] + s_grid[j])

    ok = (r_cs >= thr) & stencil_ok
    segs = []
    start = None
    for i, si in enumerate(s_grid):
        inside = bool(ok[i]) and lo <= si <= hi
        if inside and start is None:
            if i > 0 and not ok[i - 1]:
                start = max(lo, edge_between(i - 1, i))
            else:
                start = lo
        elif not inside and start is not None:
            end = hi if ok[i] else min(hi, edge_between(i - 1, i))
            segs.append((start, end))
            start = None
    if start is not None:
        segs.append((start, hi))
    return tuple(s for s in segs if s[1] > s[0])


def build_holonomy_table(chart, n_s=64, tol=1e-7, delta=3e-7, workers=1):
    """Tabulate the leaf holonomies over a grid of base nodes.

    Each row matches the thirteen stencil shifts and differentiates them
    by central differences, then fits quadratic models in z.  `workers`
    splits rows across processes; results are identical for any count.
    """
    ell = chart.curve.length
    pad = 0.5 * ell / n_s
    s_grid = np.linspace(pad, ell - pad, n_s)
    stencil = tuple(_z_stencil(chart.eps))
    rows = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_table_row, chart, float(si), stencil, tol, delta)
                    for si in s_grid]
            rows = [f.result() for f in futs]
    else:
        rows = [_table_row(chart, float(si), stencil, tol, delta)
                for si in s_grid]
    sigma = np.array([r[0] for r in rows])
    jh = np.array([r[1] for r in rows])
    residual = np.array([r[2] for r in rows])
    ok = np.array([r[3] for r in rows])
    design = _quad_design(stencil)
    sig_coef = np.zeros((n_s, _QUAD_TERMS))
    jh_coef = np.zeros((n_s, _QUAD_TERMS))
    fit_res = 0.0
    for i in range(n_s):
        if not ok[i]:
            sig_coef[i] = jh_coef[i] = np.nan
            continue
        ds = sigma[i] - s_grid[i]
        sig_coef[i], *_ = np.linalg.lstsq(design, ds, rcond=None)
        jh_coef[i], *_ = np.linalg.lstsq(design, jh[i] - 1.0, rcond=None)
        fit_res = max(fit_res,
                      float(np.max(np.abs(design @ sig_coef[i] - ds))),
                      float(np.max(np.abs(design @ jh_coef[i] - (jh[i] - 1.0)))))
    r_cs = np.array([cs_radius(chart.table, chart.curve.point_at(float(si)))
                     for si in s_grid])
    _, ctr = _calib()
    segs = _h_intervals(chart, s_grid, r_cs, ok, chart.eps, ctr)
    in_h = np.array([any(a <= si <= b for a, b in segs) for si in s_grid])
    return HolonomyTable(chart, s_grid, stencil, sigma, jh, residual,
                         sig_coef, jh_coef, fit_res, r_cs, in_h, segs)


def _polar_nodes(eps, n_r, n_t):
    """Product quadrature on the shift disk; weights carry the area."""
    u, wu = np.polynomial.legendre.leggauss(n_r)
    rho = 0.5 * eps * (u + 1.0)
    wr = 0.5 * eps * wu * rho
    th = 2.0 * math.pi * np.arange(n_t) / n_t
    wt = 2.0 * math.pi / n_t
    z1 = np.outer(rho, np.cos(th)).ravel()
    z2 = np.outer(rho, np.sin(th)).ravel()
    w = np.outer(wr, np.full(n_t, wt)).ravel()
    return z1, z2, w


def beta_formula(chart, holonomy, s, n_r=24, n_t=48):
    """Factor density at base arc s: disk integral of tilt times Jacobian.

    Quadrature of (1/Leb(M)) cos psi(h_z(s)) Jh_z(s) over the shift
    disk, with the matched leaf positions and Jacobians read from the
    holonomy table fits.
    """
    z1, z2, w = _polar_nodes(chart.eps, n_r, n_t)
    leb_m = chart.table.area
    total = 0.0
    for a, b, wi in zip(z1, z2, w):
        sig = holonomy.sigma_at(s, a, b)
        total += wi * chart.cos_psi(sig) * holonomy.jh_at(s, a, b)
    return total / leb_m


def tube_leakage(chart, holonomy, n_r=12, n_t=16, n_arc=64):
    """Tube mass not covered by properly crossing manifolds, mu(U - U0).

    For each quadrature shift the covered leaf arcs are the holonomy
    images of the H intervals; the uncovered tilt-weighted length,
    integrated over the disk, gives the leaked measure.
    """
    ell = chart.curve.length
    grid = np.linspace(0.0, ell, n_arc)
    cps = np.array([chart.cos_psi(float(t)) for t in grid])

    def arc_mass(a, b):
        lo, hi = max(0.0, a), min(ell, b)
        if hi <= lo:
            return 0.0
        sub = np.linspace(lo, hi, 17)
        vals = np.interp(sub, grid, cps)
        return float(simpson(vals, x=sub))

    full = arc_mass(0.0, ell)
    z1, z2, w = _polar_nodes(chart.eps, n_r, n_t)
    leb_m = chart.table.area
    total = 0.0
    for a, b, wi in zip(z1, z2, w):
        covered = sum(arc_mass(holonomy.sigma_at(p, a, b),
                               holonomy.sigma_at(q, a, b))
                      for p, q in holonomy.H_intervals)
        total += wi * (full - covered)
    return total / leb_m


def density_mass(G, n=20000, n_cap=2000, rng=None):
    """Monte Carlo phase-space integral of an extended density.

    The tube is sampled in shifted-curve coordinates with the tilt
    factor as volume element; each end half-ball is sampled in cartesian
    coordinates.  The density vanishes everywhere else by construction,
    so the two regions exhaust the integral.  Returns the estimate and
    its standard error.
    """
    chart = G.chart
    rng = np.random.default_rng(rng)
    ell = chart.curve.length
    eps = chart.eps
    leb_m = chart.table.area
    ss = rng.uniform(0.0, ell, n)
    rad = eps * np.sqrt(rng.uniform(0.0, 1.0, n))
    ang = rng.uniform(0.0, 2.0 * math.pi, n)
    z1, z2 = rad * np.cos(ang), rad * np.sin(ang)
    tube = np.empty(n)
    for i in range(n):
        r = chart.leaf_point(float(ss[i]), float(z1[i]), float(z2[i]))
        tube[i] = G(r) * chart.cos_psi(float(ss[i]))
    parts = [tube * (ell * math.pi * eps * eps / leb_m)]
    for end_s, sign in ((0.0, -1.0), (ell, 1.0)):
        base = chart.point3(end_s)
        w = rng.standard_normal((n_cap, 3))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        w *= eps * rng.uniform(0.0, 1.0, (n_cap, 1)) ** (1.0 / 3.0)
        ax = w @ chart.axis
        flip = ax * sign < 0.0
        w[flip] -= 2.0 * np.outer(ax[flip], chart.axis)
        vals = np.empty(n_cap)
        for i in range(n_cap):
            p = base + w[i]
            vals[i] = G(dyn.PhasePoint(p[0] % 1.0, p[1] % 1.0, p[2] % 1.0))
        parts.append(vals * (2.0 / 3.0 * math.pi * eps**3 / leb_m))
    est = sum(float(p.mean()) for p in parts)
    var = sum(float(p.var(ddof=1)) / len(p) for p in parts)
    return est, math.sqrt(var)


# ---------------------------------------------------------------------------
# disk density and leafwise product density


def q_density(z, eps):
    """Cone mollifier on the shift disk, normalized to unit mass."""
    z1, z2 = float(z[0]), float(z[1])
    r = math.hypot(z1, z2)
    if r > eps:
        raise OutOfDisk("shift lies outside the disk")
    return 3.0 / (eps * eps * math.pi) * (1.0 - r / eps)


def G0_eval(chart, holonomy, pair, r):
    """Leafwise product density at a phase point inside the tube.

    Reads the chart coordinates of `r`, pulls the leaf position back to
    its base point, and combines the pair density, the disk factor, the
    holonomy Jacobian, and the tilt of the leaf.  Zero on the curved
    boundary of the tube; NotInProduct outside the product region.
    """
    s_leaf, z1, z2 = chart.decompose(r)
    zr = math.hypot(z1, z2)
    if zr > chart.eps * (1.0 + 1e-12):
        raise NotInProduct("shift lies outside the disk")
    if zr >= chart.eps:
        return 0.0
    s_base = holonomy.sigma_inverse(s_leaf, z1, z2)
    if not holonomy.h_contains(s_base):
        raise NotInProduct("base point falls outside the product core")
    leb = chart.table.area
    phi = pair.density_at(s_base)
    q = q_density((z1, z2), chart.eps)
    jh = holonomy.jh_at(s_base, z1, z2)
    cos = chart.cos_psi(s_leaf)
    return leb * phi * q / (jh * cos)


# ---------------------------------------------------------------------------
# singularity-avoiding refinement


def _merge_intervals(ivals):
    if not ivals:
        return []
    ivals = sorted(ivals)
    out = [list(ivals[0])]
    for a, b in ivals[1:]:
        if a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [tuple(v) for v in out]


def _subtract_intervals(base, cuts):
    out = []
    for a, b in base:
        lo = a
        for c, d in cuts:
            if d <= lo or c >= b:
                continue
            if c > lo:
                out.append((lo, min(c, b)))
            lo = max(lo, d)
            if lo >= b:
                break
        if lo < b:
            out.append((lo, b))
    return out


def _rho_forward(table, cp, n):
    cur = cp
    for _ in range(n):
        if abs(cur.rho) >= _HALF_PI:
            return None
        try:
            cur = dyn.billiard_map(table, cur).point
        except Exception:
            return None
    return cur.rho


@dataclass(frozen=True)
class H1Set:
    """Product core with singularity fans excised at every depth.

    `intervals` partition the surviving base arc; `cuts` records each
    excision as (position, half-width, depth, kind) with kind "primary"
    for itinerary breaks, the layer index for resolved grazing layers,
    and "band" for the solid cover of unresolved deep layers.  `removed`
    is the arc length actually lost from H; `budget` is the nominal
    allotment of the construction (every cut counted with multiplicity
    out to the critical layer index), whose scale is what shrinks like
    the square root of c.
    """

    chart: TubeChart
    holonomy: HolonomyTable
    c: float
    theta: float
    intervals: tuple
    cuts: tuple
    removed: float
    c2: float
    budget: float = 0.0

    def on_leaf(self, z1, z2):
        """Surviving intervals transported to the leaf at (z1, z2)."""
        segs = [(self.holonomy.sigma_at(a, z1, z2),
                 self.holonomy.sigma_at(b, z1, z2)) for a, b in self.intervals]
        return tuple((min(a, b), max(a, b)) for a, b in segs)

    def contains(self, s):
        return any(a <= s <= b for a, b in self.intervals)


def _signature_breaks(table, curve, depth, n_scan=257, k0=5):
    """Arc positions where the depth-step itinerary changes."""
    ss = np.linspace(0.0, curve.length, n_scan)
    sigs = []
    for s in ss:
        cp, _ = dyn.project_to_map(table, curve.point_at(float(s)))
        sigs.append(dyn._orbit_signature(table, cp, depth, k0, False))
    breaks = []
    for i in range(n_scan - 1):
        if sigs[i] == sigs[i + 1]:
            continue
        lo, hi = float(ss[i]), float(ss[i + 1])
        sl = sigs[i]
        for _ in range(45):
            mid = 0.5 * (lo + hi)
            cp, _ = dyn.project_to_map(table, curve.point_at(mid))
            if dyn._orbit_signature(table, cp, depth, k0, False) == sl:
                lo = mid
            else:
                hi = mid
        breaks.append(0.5 * (lo + hi))
    return breaks


def _layer_crossings(table, curve, depth, k_lo, k_hi, n_scan=513, k0=5):
    """Roots of |rho_depth(s)| = layer edges, per layer index."""
    ss = np.linspace(0.0, curve.length, n_scan)
    rhos = np.empty(n_scan)
    for i, s in enumerate(ss):
        cp, _ = dyn.project_to_map(table, curve.point_at(float(s)))
        r = _rho_forward(table, cp, depth)
        rhos[i] = math.nan if r is None else abs(r)

    def rho_abs(s):
        cp, _ = dyn.project_to_map(table, curve.point_at(float(s)))
        r = _rho_forward(table, cp, depth)
        return abs(r) if r is not None else _HALF_PI

    out = {}
    for k in range(k_lo, k_hi + 1):
        edge = _HALF_PI - 1.0 / k**2
        roots = []
        for i in range(n_scan - 1):
            a, b = rhos[i], rhos[i + 1]
            if math.isnan(a) or math.isnan(b):
                continue
            if (a - edge) * (b - edge) > 0.0:
                continue
            try:
                roots.append(brentq(lambda s: rho_abs(s) - edge,
                                    float(ss[i]), float(ss[i + 1]),
                                    xtol=1e-13))
            except ValueError:
                continue
        if roots:
            out[k] = roots
    return out


@dataclass(frozen=True)
class FanBreak:
    """One itinerary break with its resolved grazing fan.

    `roots` holds (layer index, arc position) for the layer crossings
    certified to sit on this break's tangency approach; `a_up` bounds
    the fan spread law: every layer-k band lies within a_up / k^2 of
    the break.  Crossings that fail the approach certificate stay in
    the survey's `isolated` list instead.
    """

    depth: int
    s_break: float
    roots: tuple
    a_up: float


def _march_fan(table, curve, depth, s_break, k0, k_cap):
    """Walk the grazing fan of one break layer by layer.

    On the tangency side the depth-step collision angle climbs to
    grazing as the break is approached, crossing every layer edge once;
    each crossing is bracketed between the previous root and a point
    just off the break.  Stops at the first layer whose bracket cannot
    be certified.
    """
    ell = curve.length

    def rho_abs(s):
        cp, _ = dyn.project_to_map(table, curve.point_at(float(s)))
        r = _rho_forward(table, cp, depth)
        return abs(r) if r is not None else -1.0

    out = []
    base_edge = _HALF_PI - 1.0 / (k0 * k0)
    for side in (-1.0, 1.0):
        if not any(rho_abs(s_break + side * d) >= base_edge
                   for d in (1e-8, 1e-10, 1e-12)
                   if 0.0 <= s_break + side * d <= ell):
            continue
        d_in = 1e-8
        prev = None
        for k in range(k0, k_cap + 1):
            edge = _HALF_PI - 1.0 / k**2
            # the grazing angle flattens toward the break on a root
            # scale, so the inner bracket point adapts per layer
            while d_in > 1e-14 and rho_abs(s_break + side * d_in) < edge:
                d_in *= 0.25
            s_in = s_break + side * d_in
            if rho_abs(s_in) < edge:
                break
            if prev is None:
                gap, s_out = max(4.0 * d_in, 1e-7), None
                for _ in range(40):
                    cand = s_break + side * gap
                    if not 0.0 <= cand <= ell:
                        break
                    if rho_abs(cand) < edge:
                        s_out = cand
                        break
                    gap *= 2.0
                if s_out is None:
                    break
            else:
                s_out = prev
            a, b = sorted((s_in, s_out))
            try:
                root = brentq(lambda s: rho_abs(s) - edge, a, b, xtol=1e-15)
            except ValueError:
                break
            out.append((k, root))
            prev = root
    return out


def fan_survey(chart, n_depth=3, k0=5, k_cap=256, c2=0.2):
    """Chart the singularity structure of the base curve once.

    Finds itinerary breaks up to the given depth (each attributed to
    the shallowest depth where it appears), resolves layer crossings up
    to index `k_cap` per depth, and sorts them into break fans versus
    isolated crossings.  The result does not depend on the cutting
    radius, so one survey serves a whole sweep of H1 refinements.
    Raises ValueError when a fan spreads wider than `c2` allows.
    """
    table = chart.table
    curve = chart.curve
    known = []
    breaks = []
    for n in range(n_depth + 1):
        for b in _signature_breaks(table, curve, n, k0=k0):
            if any(abs(b - x) < 1e-9 for x in known):
                continue
            known.append(b)
            breaks.append((n, b))
    fans = {i: [] for i in range(len(breaks))}
    isolated = []
    for n in range(n_depth + 1):
        found = _layer_crossings(table, curve, n, k0, k_cap, k0=k0)
        same_depth = [(i, b) for i, (nb, b) in enumerate(breaks) if nb == n]
        for k, roots in found.items():
            edge = _HALF_PI - 1.0 / k**2
            for root in roots:
                if any(abs(root - x) < 1e-12 for x in known):
                    continue  # bisection artifact at the break jump
                home = None
                if same_depth:
                    i, b = min(same_depth, key=lambda t: abs(t[1] - root))
                    # on a tangency approach the grazing angle stays
                    # above this layer's edge all the way to the break
                    mid = 0.5 * (root + b)
                    cp, _ = dyn.project_to_map(table, curve.point_at(mid))
                    r = _rho_forward(table, cp, n)
                    if r is not None and abs(r) >= edge - 1e-12:
                        home = i
                if home is None:
                    isolated.append((n, k, root))
                else:
                    fans[home].append((k, root))
    out = []
    for i, (n, b) in enumerate(breaks):
        got = dict(fans[i])
        for k, root in _march_fan(table, curve, n, b, k0, k_cap):
            got[k] = root
        roots = tuple(sorted(got.items()))
        a_up = max((abs(r - b) * k * k for k, r in roots), default=0.0) * 1.05
        if a_up > c2:
            raise ValueError("fan spread certificate violated: c2 too small")
        out.append(FanBreak(n, b, roots, a_up))
    return tuple(out), tuple(isolated)


def build_H1(chart, holonomy, c=None, theta=None, c2=0.2, n_depth=3,
             k0=5, k_cap=256, fan=None):
    """Excise singularity fans from the product core at geometric rates.

    Depth-n itinerary breaks lose a radius c theta^n; resolved grazing
    layers lose half that around each crossing; the unresolved deep tail
    of each fan, which bunches against the break like spread / k^2, is
    covered by a solid band sized so its length matches the nominal
    allotment of the layers it stands in for.  Layers past the critical
    index sit inside the primary cut already and need nothing.  `c`
    defaults to the squared tube half-width and `theta` to the grazing
    stability threshold 1/(4 K_max^2); `c2` must upper-bound the fan
    spread times the squared layer index, verified on every crossing.
    A precomputed `fan` survey (from fan_survey, which fixes n_depth,
    k0, k_cap) lets a sweep over c reuse the geometry.
    """
    if c is None:
        c = chart.eps**2
    table = chart.table
    if theta is None:
        k_max = max(1.0 / sc.radius for sc in table.scatterers)
        theta = 1.0 / (4.0 * k_max * k_max)
    k_max = max(1.0 / sc.radius for sc in table.scatterers)
    if k_max * math.sqrt(theta) >= 1.0:
        raise ValueError("theta too large for stable cutting")
    if fan is None:
        fan = fan_survey(chart, n_depth=n_depth, k0=k0, k_cap=k_cap, c2=c2)
    breaks, isolated = fan
    cuts = []
    ivals = []
    budget = 0.0
    for fb in breaks:
        w = c * theta**fb.depth
        cuts.append((fb.s_break, w, fb.depth, "primary"))
        ivals.append((fb.s_break - w, fb.s_break + w))
        budget += 2.0 * w
        k_crit = int(math.ceil(math.sqrt(2.0 * c2 / w)))
        if k_crit < k0:
            continue
        budget += (k_crit - k0 + 1) * w
        if fb.a_up > 0.0:
            k_res = int(math.ceil((fb.a_up**2 / (2.0 * c2 * w)) ** 0.25))
        else:
            k_res = k0
        k_top = max((k for k, _ in fb.roots), default=k0)
        k_res = min(max(k_res, k0), k_top, k_crit)
        half = 0.5 * w
        sides = set()
        for k, root in fb.roots:
            if k <= k_res:
                cuts.append((root, half, fb.depth, k))
                ivals.append((root - half, root + half))
            sides.add(1 if root > fb.s_break else -1)
        if k_crit > k_res and fb.a_up > 0.0:
            band = fb.a_up / (k_res * k_res)
            for side in sides:
                a, b = ((fb.s_break, fb.s_break + band) if side > 0
                        else (fb.s_break - band, fb.s_break))
                cuts.append((0.5 * (a + b), 0.5 * band, fb.depth, "band"))
                ivals.append((a, b))
    for n, k, root in isolated:
        w = c * theta**n
        k_crit = int(math.ceil(math.sqrt(2.0 * c2 / w)))
        if k0 <= k <= k_crit:
            cuts.append((root, 0.5 * w, n, k))
            ivals.append((root - 0.5 * w, root + 0.5 * w))
            budget += w
    base = list(holonomy.H_intervals)
    merged = _merge_intervals(ivals)
    remaining = _subtract_intervals(base, merged)
    removed = sum(b - a for a, b in base) - sum(b - a for a, b in remaining)
    return H1Set(chart, holonomy, float(c), float(theta), tuple(remaining),
                 tuple(cuts), float(removed), float(c2), float(budget))


# ---------------------------------------------------------------------------
# global approximating density


@dataclass(frozen=True)
class ApproxDensity:
    """Leafwise product density extended to the whole phase space.

    Inside the refined product region the value is the leafwise density
    itself; across the rest of the tube and its end caps the value is the
    midpoint extension under the measured regularity certificate, pinned
    to zero just outside; elsewhere it vanishes.
    """

    chart: TubeChart
    holonomy: HolonomyTable
    pair: StandardPair
    h1: H1Set
    C_cert: float
    alpha_cert: float
    pins: np.ndarray
    pin_vals: np.ndarray
    sup_value: float

    def _in_plus(self, r):
        """Inside the tube or one of the end half-balls, with coordinates."""
        chart = self.chart
        try:
            s, z1, z2 = chart.decompose(r)
        except NotInProduct:
            s, z1, z2 = None, None, None
        if s is not None and math.hypot(z1, z2) <= chart.eps:
            return True, s, z1, z2
        v = chart._rel(r) + chart.center
        for send in (0.0, chart.curve.length):
            if np.linalg.norm(v - chart.point3(send)) <= chart.eps:
                return True, None, None, None
        return False, s, z1, z2

    def _in_core(self, s, z1, z2):
        if s is None or math.hypot(z1, z2) >= self.chart.eps:
            return False
        s_base = self.holonomy.sigma_inverse(s, z1, z2)
        return self.h1.contains(s_base)

    def __call__(self, r):
        inside, s, z1, z2 = self._in_plus(r)
        if not inside:
            return 0.0
        if self._in_core(s, z1, z2):
            return G0_eval(self.chart, self.holonomy, self.pair, r)
        return self._envelope(np.array([r.x, r.y, r.xi]))

    def _envelope(self, x):
        """Midpoint extension against the pins, certificate checked at build."""
        pw = self.C_cert * norms.torus_dist3(self.pins, x) ** self.alpha_cert
        a = float(np.max(self.pin_vals - pw))
        b = float(np.min(self.pin_vals + pw))
        lo = max(a, float(self.pin_vals.min()))
        hi = min(b, float(self.pin_vals.max()))
        if lo > hi:
            lo = hi = 0.5 * (lo + hi)
        return 0.5 * (lo + hi)


def _core_samples(chart, holonomy, h1, rng, count):
    """Stratified chart samples of the refined region with their points."""
    segs = h1.intervals
    lens = np.array([b - a for a, b in segs])
    total = float(lens.sum())
    pts, coords = [], []
    while len(pts) < count:
        u = rng.random() * total
        i = int(np.searchsorted(np.cumsum(lens), u))
        i = min(i, len(segs) - 1)
        a, b = segs[i]
        s = rng.uniform(a, b)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        rad = chart.eps * (1.0 - math.sqrt(rng.random()))  # favor the core
        z1, z2 = rad * math.cos(ang), rad * math.sin(ang)
        sigma = holonomy.sigma_at(s, z1, z2)
        if not (0.0 <= sigma <= chart.curve.length):
            continue
        pts.append(chart.leaf_point(sigma, z1, z2))
        coords.append((s, z1, z2, sigma))
    return pts, coords


def build_G(chart, holonomy, pair, rng=None, n_pins=400, n_shell=240,
            cert_pairs=2000, margin=1.5):
    """Measure a regularity certificate and extend the product density.

    Samples the refined region, fits the dynamically compatible exponent
    (capped at 1/3) and the pairwise constant with a safety `margin`,
    pins a zero shell just outside the widened tube, and returns the
    global density.  Raises InfeasibleExtension via the extension helper
    when the measured certificate cannot hold.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    h1 = build_H1(chart, holonomy)
    pts, coords = _core_samples(chart, holonomy, h1, rng, n_pins)
    vals = np.array([G0_eval(chart, holonomy, pair, p) for p in pts])
    xyz = np.array([[p.x, p.y, p.xi] for p in pts])
    # dynamically compatible exponent from the cutting rate
    lam, _ = _calib()
    theta_g = 1.0 / lam
    alpha = min(math.log(theta_g) / math.log(h1.theta), 1.0 / 3.0)
    # pairwise constant on the sample
    idx = rng.integers(0, n_pins, size=(cert_pairs, 2))
    c_best = 0.0
    for i, j in idx:
        if i == j:
            continue
        d = norms.torus_dist3(xyz[i], xyz[j])
        if d < 1e-12:
            continue
        c_best = max(c_best, abs(vals[i] - vals[j]) / d**alpha)
    c_cert = margin * c_best
    # zero pins on a shell just outside the widened tube
    shell = []
    ell = chart.curve.length
    for _ in range(n_shell):
        s = rng.uniform(-chart.eps, ell + chart.eps)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        rad = chart.eps * 1.02
        z1, z2 = rad * math.cos(ang), rad * math.sin(ang)
        sc = min(max(s, 0.0), ell)
        p = chart.point3(sc) + z1 * chart.e1 + z2 * chart.e2
        if s < 0.0 or s > ell:
            extra = (s - sc) * chart.axis
            p = p + extra
        shell.append(p % 1.0)
    pins = np.vstack([xyz, np.array(shell)])
    pin_vals = np.concatenate([vals, np.zeros(len(shell))])
    # validate feasibility once on the full pin set
    probe = 0.5 * (pins[0] + pins[1])
    norms.holder_extend_point(pins, pin_vals, c_cert, alpha, probe,
                              metric=norms.torus_dist3)
    return ApproxDensity(chart, holonomy, pair, h1, float(c_cert),
                         float(alpha), pins, pin_vals, float(vals.max()))


# ---------------------------------------------------------------------------
# diagnostics


def dump_diagnostics(table_h, path, h1=None):
    """Write the holonomy table as CSV, one row per (base node, shift).

    With an H1Set the in_H1 column reflects the cut-out; otherwise it
    copies in_H.
    """
    with open(path, "w") as fh:
        fh.write("s,z1,z2,sigma,jh,residual,r_cs,in_H,in_H1\n")
        for i, si in enumerate(table_h.s_grid):
            h1_flag = int(table_h.in_H[i]) if h1 is None \
                else int(h1.contains(float(si)))
            for j, (z1, z2) in enumerate(table_h.stencil):
                fh.write(
                    "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d\n" % (
                        si, z1, z2, table_h.sigma[i, j], table_h.jh[i, j],
                        table_h.residual[i, j], table_h.r_cs[i],
                        int(table_h.in_H[i]), h1_flag))
