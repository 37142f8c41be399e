"""Unstable curves, standard pairs and their evolution under the dynamics.

A u-curve is stored as a graph over the base wall: splines q(s), rho(s) in
outgoing collision coordinates plus a flight lift t(s), all parametrized by
arc length s of the lifted curve in phase space.  Validation enforces the
admissibility bundle carried in `params`:

    B_max      curvature bound for the base graph in (q, rho)
    alpha_min  least angle between the lifted tangent and the flow direction
    Gamma_max  curvature bound for the lifted curve
    L_max      length bound, coupled by L_max <= 1/(100 * Gamma_max)
    eps0       clearance for the goodness flag, eps0 >= 10 * L_max

A standard pair is a u-curve together with a probability density for arc
length, measured in the dynamical Holder gauge: the modulus uses theta**s
where s is the separation time of a parameter pair, so densities produced
by cutting at singularities stay tame while transversal jumps are charged
exponentially.

`push_forward` evolves a pair through the collision map, cutting pieces at
wall changes and tangencies (primary cuts) and at homogeneity-layer
boundaries (secondary cuts, capped at layer 30; deeper layers are lumped).
`line_integral` evaluates int F(Phi_t x) phi(x) ds(x) either by
piece-by-piece quadrature with time-stopped evolution (each finished piece
is advanced smoothly by its residual time) or by density-weighted Monte
Carlo over the batch engine when the collision depth would make the
deterministic route explode.
"""

import math

import numpy as np
from scipy.integrate import cumulative_trapezoid, simpson, trapezoid
from scipy.interpolate import CubicSpline

from . import dynamics as dyn
from . import front as fr
from .errors import (
    AngleViolation,
    ConeViolation,
    CurvatureViolation,
    NonPositiveDensity,
    NumericalFailure,
    ResolutionExceeded,
    TooLong,
)

TWO_PI = 2.0 * math.pi

DEFAULT_PARAMS = {
    "B_max": 60.0,
    "alpha_min": 0.15,
    "Gamma_max": 25.0,
    "L_max": 4.0e-4,     # = 1/(100 * Gamma_max)
    "eps0": 5.0e-3,      # >= 10 * L_max
}

LAYER_CAP = 30           # homogeneity layers beyond this are lumped together
_CUT_TOL_REL = 2e-10     # cut bracket width, relative to curve length; the
                         # per-cut dropped sliver is this fraction of mass
_MIN_PIECE_REL = 1e-12   # source width, relative to curve length, below
                         # which a piece is no longer numerically resolvable


def _check_params(params):
    p = dict(DEFAULT_PARAMS)
    if params:
        p.update(params)
    if p["L_max"] > 1.0 / (100.0 * p["Gamma_max"]) + 1e-15:
        raise ValueError("L_max must not exceed 1/(100*Gamma_max)")
    if p["eps0"] < 10.0 * p["L_max"]:
        raise ValueError("eps0 must be at least 10*L_max")
    return p


class UCurve:
    """Arc-length parametrized unstable curve over one wall.

    Evaluation accepts s in [0, length]; instances may be windows into a
    longer parent curve (see `subcurve`), sharing the parent splines.
    """

    def __init__(self, table, wall, sq, srho, slift, s_off, length, params, good):
        self.table = table
        self.wall = wall
        self._sq = sq
        self._srho = srho
        self._slift = slift
        self._off = s_off
        self.length = length
        self.params = params
        self.good = good

    # -- base evaluation ----------------------------------------------------

    def base_at(self, s):
        a = self._off + s
        return float(self._sq(a)), float(self._srho(a))

    def base_arrays(self, s):
        a = np.asarray(s, dtype=float) + self._off
        return self._sq(a), self._srho(a)

    def lift_arrays(self, s):
        a = np.asarray(s, dtype=float) + self._off
        return self._slift(a)

    def tangent_arrays(self, s):
        a = np.asarray(s, dtype=float) + self._off
        return self._sq(a, 1), self._srho(a, 1)

    def lift_at(self, s):
        return float(self._slift(self._off + s))

    # -- lifted evaluation --------------------------------------------------

    def point_at(self, s):
        q, rho = self.base_at(s)
        lift = self.lift_at(s)
        pp = dyn.collision_to_phase(self.table, dyn.CollisionPoint(self.wall, q, rho))
        vx, vy = pp.velocity
        x = (pp.x + lift * vx) % 1.0
        y = (pp.y + lift * vy) % 1.0
        return dyn.PhasePoint(x, y, pp.xi)

    def _tangent3(self, s):
        """(dX, dY, dXi) of the lifted curve per unit arc length."""
        a = self._off + s
        r = self.table.scatterers[self.wall].radius
        q = float(self._sq(a))
        rho = float(self._srho(a))
        lift = float(self._slift(a))
        dq = float(self._sq(a, 1))
        drho = float(self._srho(a, 1))
        dlift = float(self._slift(a, 1))
        theta = q / r
        omega = theta + rho
        domega = dq / r + drho
        vx, vy = math.cos(omega), math.sin(omega)
        dX = -math.sin(theta) * dq + dlift * vx - lift * domega * vy
        dY = math.cos(theta) * dq + dlift * vy + lift * domega * vx
        return dX, dY, domega / TWO_PI

    def speed_at(self, s):
        dX, dY, dXi = self._tangent3(s)
        return math.sqrt(dX * dX + dY * dY + dXi * dXi)

    def flow_angle_at(self, s):
        """Angle between the lifted tangent line and the flow line."""
        a = self._off + s
        r = self.table.scatterers[self.wall].radius
        omega = float(self._sq(a)) / r + float(self._srho(a))
        dX, dY, dXi = self._tangent3(s)
        n = math.sqrt(dX * dX + dY * dY + dXi * dXi)
        c = abs(dX * math.cos(omega) + dY * math.sin(omega)) / n
        return math.acos(min(1.0, c))

    def min_wall_distance(self, samples=160):
        best = math.inf
        for s in np.linspace(0.0, self.length, samples):
            p = self.point_at(float(s))
            best = min(best, self.table.distance_to_walls(p.x, p.y))
        return best

    def subcurve(self, a, b):
        """Window [a, b] of this curve; shares the parent splines."""
        if not 0.0 <= a < b <= self.length + 1e-12:
            raise ValueError("subcurve window out of range")
        return UCurve(
            self.table, self.wall, self._sq, self._srho, self._slift,
            self._off + a, b - a, self.params, self.good,
        )


def make_ucurve(table, base_nodes, flight, params=None):
    """Build and validate a u-curve from collision-space nodes and a lift.

    `base_nodes` are CollisionPoints on a single wall forming a strictly
    monotone graph over q; `flight` is a constant, an array of per-node
    values, or a callable of q giving the forward flight time of the lift.
    Raises ConeViolation, CurvatureViolation, AngleViolation or TooLong when
    the admissibility bundle is violated.
    """
    params = _check_params(params)
    walls = {n.wall for n in base_nodes}
    if len(walls) != 1:
        raise ValueError("all base nodes must sit on one wall")
    wall = base_nodes[0].wall
    q = np.array([n.q for n in base_nodes], dtype=float)
    rho = np.array([n.rho for n in base_nodes], dtype=float)
    if len(q) < 4:
        raise ValueError("need at least four base nodes")
    dq = np.diff(q)
    if np.all(dq < 0.0):
        q, rho = q[::-1], rho[::-1]
        dq = -dq[::-1]
    if not np.all(dq > 0.0):
        raise ValueError("base nodes must be strictly monotone in q")

    if callable(flight):
        lift = np.asarray(flight(q), dtype=float) + np.zeros_like(q)
    else:
        lift = np.asarray(flight, dtype=float) + np.zeros_like(q)
    if np.any(lift < 0.0):
        raise ValueError("flight lift must be nonnegative")

    # the lift must stay inside the free flight of every node
    for qi, ri, li in zip(q, rho, lift):
        pp = dyn.collision_to_phase(table, dyn.CollisionPoint(wall, qi, ri))
        s = table.scatterers[wall]
        theta = qi / s.radius
        oi = round(pp.x - s.cx - s.radius * math.cos(theta))
        oj = round(pp.y - s.cy - s.radius * math.sin(theta))
        tau, _, _, _ = dyn.free_flight(table, pp, exclude=(wall, oi, oj))
        if li >= tau - 1e-9:
            raise ValueError("flight lift %.4g reaches the next collision %.4g" % (li, tau))

    # provisional chord parametrization, then reparametrize by arc length
    r = table.scatterers[wall].radius
    theta = q / r
    omega = theta + rho
    x0 = table.scatterers[wall].cx + r * np.cos(theta) + lift * np.cos(omega)
    y0 = table.scatterers[wall].cy + r * np.sin(theta) + lift * np.sin(omega)
    xi0 = omega / TWO_PI
    chord = np.sqrt(np.diff(x0) ** 2 + np.diff(y0) ** 2 + np.diff(xi0) ** 2)
    u = np.concatenate([[0.0], np.cumsum(chord)])
    sq = CubicSpline(u, q)
    srho = CubicSpline(u, rho)
    slift = CubicSpline(u, lift)

    dense = np.linspace(0.0, u[-1], 40 * len(q))
    w = UCurve(table, wall, sq, srho, slift, 0.0, u[-1], params, False)
    speeds = np.array([w.speed_at(float(s)) for s in dense])
    arc = np.concatenate([[0.0], cumulative_trapezoid(speeds, dense)])
    L = float(arc[-1])
    sq = CubicSpline(arc, sq(dense))
    srho = CubicSpline(arc, srho(dense))
    slift = CubicSpline(arc, slift(dense))
    w = UCurve(table, wall, sq, srho, slift, 0.0, L, params, False)

    # validation on a dense parameter grid
    grid = np.linspace(0.0, L, 8 * len(q))
    dqs, drs = w.tangent_arrays(grid)
    if np.any(dqs * drs <= 0.0):
        raise ConeViolation("base tangent leaves the unstable cone")
    ddq = sq(grid + 0.0, 2)
    ddr = srho(grid + 0.0, 2)
    base_curv = np.abs(dqs * ddr - drs * ddq) / np.power(dqs * dqs + drs * drs, 1.5)
    if np.max(base_curv) > params["B_max"]:
        raise CurvatureViolation(
            "base curvature %.3g exceeds B_max %.3g" % (np.max(base_curv), params["B_max"])
        )
    tan3 = np.array([w._tangent3(float(s)) for s in grid])
    # unit-speed curve: |gamma''| = |d(tangent)/ds| is the lifted curvature
    h = grid[1] - grid[0]
    gdd = (tan3[2:] - tan3[:-2]) / (2.0 * h) if len(grid) > 2 else np.zeros((1, 3))
    lifted_curv = np.sqrt((gdd * gdd).sum(axis=1))
    if lifted_curv.size and np.max(lifted_curv) > params["Gamma_max"]:
        raise CurvatureViolation(
            "lifted curvature %.3g exceeds Gamma_max %.3g"
            % (np.max(lifted_curv), params["Gamma_max"])
        )
    angles = np.array([w.flow_angle_at(float(s)) for s in grid])
    if np.min(angles) < params["alpha_min"]:
        raise AngleViolation(
            "flow angle %.3g below alpha_min %.3g" % (np.min(angles), params["alpha_min"])
        )
    if L > params["L_max"]:
        raise TooLong("length %.3g exceeds L_max %.3g" % (L, params["L_max"]))

    w.good = w.min_wall_distance() > params["eps0"]
    return w


# ---------------------------------------------------------------------------
# separation time


def _cap_layer(idx):
    if abs(idx) > LAYER_CAP:
        return int(math.copysign(LAYER_CAP, idx))
    return idx


def separation_time(curve, s1, s2, n_max=30, samples=9, include_layers=False, k0=5):
    """First iterate at which the collision map is discontinuous on [s1, s2].

    The subcurve is tracked through sampled base orbits; separation is the
    first step where adjacent samples land on different walls (or, with
    `include_layers`, in different homogeneity layers), or where a sample
    hits a tangency.  Returns math.inf when no separation is found within
    n_max steps, in particular when s1 == s2.
    """
    if s1 == s2:
        return math.inf
    a, b = sorted((float(s1), float(s2)))
    params = list(np.linspace(a, b, samples))
    cols = []
    for p in params:
        qq, rr = curve.base_at(p)
        cols.append([p, dyn.CollisionPoint(curve.wall, qq, rr), 1.0])
    inserts_left = 3 * samples

    for n in range(1, n_max + 1):
        for col in cols:
            try:
                rec = dyn.billiard_map(curve.table, col[1])
            except (dyn.GrazingOrbit, NumericalFailure):
                return n  # a sample sits on a singularity of this iterate
            except Exception:
                return n
            col[1] = rec.point
            col[2] = rec.grazing_margin
        for (pa, ca, ma), (pb, cb, mb) in zip(cols, cols[1:]):
            if ca.wall != cb.wall:
                return n
            if include_layers and _cap_layer(
                dyn.homogeneity_index(ca.rho, k0)
            ) != _cap_layer(dyn.homogeneity_index(cb.rho, k0)):
                return n
        # near-grazing sandwich: refine so a tangency between samples is seen
        if inserts_left > 0:
            fresh = []
            for i in range(len(cols) - 1):
                if min(cols[i][2], cols[i + 1][2]) < 0.05 and inserts_left > 0:
                    pm = 0.5 * (cols[i][0] + cols[i + 1][0])
                    if pm - cols[i][0] < 1e-15:
                        continue
                    qq, rr = curve.base_at(pm)
                    cp = dyn.CollisionPoint(curve.wall, qq, rr)
                    mm = 1.0
                    try:
                        for _ in range(n):
                            rec = dyn.billiard_map(curve.table, cp)
                            cp = rec.point
                            mm = rec.grazing_margin
                    except (dyn.GrazingOrbit, NumericalFailure):
                        return n
                    fresh.append((i + 1, [pm, cp, mm]))
                    inserts_left -= 1
            for k, (i, col) in enumerate(fresh):
                cols.insert(i + k, col)
            for (pa, ca, ma), (pb, cb, mb) in zip(cols, cols[1:]):
                if ca.wall != cb.wall:
                    return n
    return math.inf


# ---------------------------------------------------------------------------
# standard pairs


class StandardPair:
    """U-curve with a normalized arc-length density in the dynamical gauge."""

    def __init__(self, curve, theta, phi, mass, dyn_holder_seminorm):
        self.curve = curve
        self.theta = theta
        self._phi = phi
        self.mass = mass
        self.dyn_holder_seminorm = dyn_holder_seminorm

    def density_at(self, s):
        return self._phi(np.asarray(s, dtype=float))


class _FamilyDensity:
    """Named density family; a plain class so pairs survive pickling."""

    def __init__(self, kind, L, scale=1.0, amp=0.5, freq=1.0):
        self.kind = kind
        self.L = L
        self.scale = scale
        self.amp = amp
        self.freq = freq

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "uniform":
            return np.ones_like(s)
        if self.kind == "exp":
            return np.exp(self.scale * s / self.L)
        return 1.0 + self.amp * np.cos(TWO_PI * self.freq * s / self.L)


class _WrappedDensity:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return np.asarray(self.fn(s), dtype=float) + np.zeros_like(s)


class _NormalizedDensity:
    def __init__(self, fn, z):
        self.fn = fn
        self.z = z

    def __call__(self, s):
        return self.fn(s) / self.z


def _resolve_density(spec, L):
    if callable(spec):
        return _WrappedDensity(spec)
    if spec == "uniform":
        return _FamilyDensity("uniform", L)
    if isinstance(spec, dict):
        name = spec.get("expr", "uniform")
        if name == "uniform":
            return _FamilyDensity("uniform", L)
        if name == "exp":
            return _FamilyDensity("exp", L, scale=float(spec.get("scale", 1.0)))
        if name == "cos":
            amp = float(spec.get("amp", 0.5))
            freq = float(spec.get("freq", 1.0))
            if not 0.0 <= amp < 1.0:
                raise ValueError("cos amplitude must be in [0, 1)")
            return _FamilyDensity("cos", L, amp=amp, freq=freq)
        raise ValueError("unknown density expr %r" % name)
    raise ValueError("unsupported density spec %r" % (spec,))


def make_standard_pair(curve, density="uniform", theta=0.5, seminorm_params=None, n_max=25):
    """Normalize a density on the curve and measure its dynamical seminorm.

    The seminorm is estimated from below over sampled parameter pairs:
    max |phi(x) - phi(y)| / theta**s+(x, y).  Pairs with equal density are
    free regardless of separation, so the uniform pair measures exactly 0.
    Raises NonPositiveDensity if the density is not strictly positive.
    """
    L = curve.length
    dens = _resolve_density(density, L)
    grid = np.linspace(0.0, L, 4001)
    vals = dens(grid)
    if np.min(vals) <= 0.0:
        raise NonPositiveDensity("density reaches %.3g" % float(np.min(vals)))
    Z = float(simpson(vals, x=grid))
    phi = _NormalizedDensity(dens, Z)

    fine = np.linspace(0.0, L, 8001)
    mass = float(simpson(dens(fine), x=fine)) / Z

    if seminorm_params is None:
        P = np.linspace(0.0, L, 33)
    else:
        P = np.sort(np.asarray(seminorm_params, dtype=float))
    fP = np.asarray(phi(P), dtype=float)
    # candidate pairs sorted by density gap; theta**n_max bounds the reachable
    # ratio, so the scan can stop as soon as no gap can beat the current best
    pairs = [
        (abs(fP[i] - fP[j]), i, j)
        for i in range(len(P))
        for j in range(i + 1, len(P))
        if abs(fP[i] - fP[j]) > 1e-14 * max(1.0, np.max(np.abs(fP)))
    ]
    pairs.sort(reverse=True)
    semi = 0.0
    floor = theta ** n_max
    for gap, i, j in pairs:
        if gap / floor <= semi:
            break
        sp = separation_time(curve, float(P[i]), float(P[j]), n_max=n_max)
        if sp == math.inf:
            return StandardPair(curve, theta, phi, mass, math.inf)
        semi = max(semi, gap / theta ** sp)
    return StandardPair(curve, theta, phi, mass, semi)


def restrict_pair(pair, a, b):
    """Restriction of a pair to [a, b], renormalized.

    Returns (sub_pair, weight): weight is the parent mass of the window, so
    integrals satisfy I_parent = weight * I_sub + (complement terms).
    """
    grid = np.linspace(a, b, 2001)
    weight = float(simpson(pair.density_at(grid), x=grid))
    sub = pair.curve.subcurve(a, b)
    parent = pair

    def dens(s):
        return parent.density_at(np.asarray(s, dtype=float) + a)

    return make_standard_pair(sub, density=dens, theta=pair.theta), weight


# ---------------------------------------------------------------------------
# pushforward


class CurvePiece:
    """Smooth component of an evolved curve at a fixed collision depth.

    Node columns are aligned arrays over source parameters `sp`; `J` is the
    image arc length per unit source arc length and `density` the
    transported density per image arc length, so piece mass is
    int density * J dsp, which telescopes to the source mass.
    """

    def __init__(self, n, wall, sp, q, rho, T, tan_q, tan_rho, J, density,
                 expansion, layer, layer_hist, cut_lo, cut_hi, j0):
        self.n = n
        self.wall = wall
        self.sp = sp
        self.q = q
        self.rho = rho
        self.T = T
        self.tan_q = tan_q
        self.tan_rho = tan_rho
        self.J = J
        self.density = density
        self.expansion = expansion
        self.layer = layer
        self.layer_hist = layer_hist
        self.cut_lo = cut_lo
        self.cut_hi = cut_hi
        self._j0 = j0

    @property
    def s_lo(self):
        return float(self.sp[0])

    @property
    def s_hi(self):
        return float(self.sp[-1])

    def mass(self):
        return float(trapezoid(self.density * self.J, self.sp))

    def __repr__(self):
        return "CurvePiece(n=%d, wall=%d, [%.3g, %.3g], %d cols)" % (
            self.n, self.wall, self.s_lo, self.s_hi, len(self.sp)
        )


def _arc_jacobian(tq, tr, rho, K):
    """Image arc length per source arc length for a wall curve tangent."""
    dom = (tr + K * tq) / TWO_PI
    return np.sqrt(tq * tq + dom * dom)


def _initial_piece(pair, columns=65):
    curve = pair.curve
    L = curve.length
    sp = np.linspace(0.0, L, columns)
    q, rho = curve.base_arrays(sp)
    lift = curve.lift_arrays(sp)
    tq, tr = curve.tangent_arrays(sp)
    K = 1.0 / curve.table.scatterers[curve.wall].radius
    J = _arc_jacobian(tq, tr, rho, K)
    j0 = (sp.copy(), J.copy())
    density = pair.density_at(sp) / J
    return CurvePiece(
        0, curve.wall, sp, np.asarray(q), np.asarray(rho), -np.asarray(lift),
        np.asarray(tq), np.asarray(tr), J, density, np.ones_like(J),
        _cap_layer(dyn.homogeneity_index(float(np.median(rho)))), (), None, None, j0,
    )


class _Column:
    __slots__ = ("sp", "q", "rho", "T", "tq", "tr", "tau", "nwall", "nq",
                 "nrho", "margin", "sing", "crossed", "layer")

    def __init__(self, sp, q, rho, T, tq, tr):
        self.sp = sp
        self.q = q
        self.rho = rho
        self.T = T
        self.tq = tq
        self.tr = tr
        self.sing = False

    def key(self):
        if self.sing:
            # grazing probes share a class: the whole tangency interval
            # collapses into one dropped run between its bisected edges
            return ("sing",)
        return (self.crossed, self.nwall, self.layer)


def _advance_piece(table, piece, pair, k0=5, cut_layers=True, t_stop=None,
                   gap_q=None, gap_rho=0.05, max_cols=900):
    """Map a piece one collision step, cutting at class changes.

    Returns (advanced, finished): `finished` is nonempty only with a time
    ceiling `t_stop`, holding sub-pieces whose next collision would overrun
    it (they stay at the current depth).
    """
    cut_tol = max(_CUT_TOL_REL * pair.curve.length, 1e-18)
    K0 = 1.0 / table.scatterers[piece.wall].radius

    # smooth interpolators over the whole piece (pre-map state is smooth)
    if len(piece.sp) >= 4:
        iq = CubicSpline(piece.sp, piece.q)
        irho = CubicSpline(piece.sp, piece.rho)
        iT = CubicSpline(piece.sp, piece.T)
        itq = CubicSpline(piece.sp, piece.tan_q)
        itr = CubicSpline(piece.sp, piece.tan_rho)
    else:
        iq = lambda s: np.interp(s, piece.sp, piece.q)  # noqa: E731
        irho = lambda s: np.interp(s, piece.sp, piece.rho)  # noqa: E731
        iT = lambda s: np.interp(s, piece.sp, piece.T)  # noqa: E731
        itq = lambda s: np.interp(s, piece.sp, piece.tan_q)  # noqa: E731
        itr = lambda s: np.interp(s, piece.sp, piece.tan_rho)  # noqa: E731

    def classify(col):
        try:
            rec = dyn.billiard_map(table, dyn.CollisionPoint(piece.wall, col.q, col.rho))
        except Exception:
            col.sing = True
            return
        col.tau = rec.tau
        col.nwall = rec.point.wall
        col.nq = rec.point.q
        col.nrho = rec.point.rho
        col.margin = rec.grazing_margin
        col.crossed = (t_stop is not None) and (col.T + rec.tau > t_stop)
        col.layer = _cap_layer(rec.layer) if cut_layers else 0

    def fresh(s):
        col = _Column(s, float(iq(s)), float(irho(s)), float(iT(s)),
                      float(itq(s)), float(itr(s)))
        classify(col)
        return col

    cols = []
    for i in range(len(piece.sp)):
        col = _Column(float(piece.sp[i]), float(piece.q[i]), float(piece.rho[i]),
                      float(piece.T[i]), float(piece.tan_q[i]), float(piece.tan_rho[i]))
        classify(col)
        cols.append(col)

    if gap_q is None:
        gap_q = 0.05 * min(s.radius for s in table.scatterers)

    # phase 1: densify smooth stretches whose images are too coarse and
    # probe near-grazing sandwiches, within the column budget
    guard = 0
    while guard < 12 and len(cols) < max_cols:
        guard += 1
        inserts = []
        for i in range(len(cols) - 1):
            a, b = cols[i], cols[i + 1]
            w = b.sp - a.sp
            if w < cut_tol * 64 or a.key() != b.key() or a.sing:
                continue
            # image gap measured around the wall circle: q wraps at the seam
            per = TWO_PI * table.scatterers[b.nwall].radius
            dq_im = abs(b.nq - a.nq)
            dq_im = min(dq_im, per - dq_im)
            coarse = (dq_im > gap_q or abs(b.nrho - a.nrho) > gap_rho)
            graze = min(a.margin, b.margin) < 0.08
            if coarse or graze:
                inserts.append(0.5 * (a.sp + b.sp))
        if not inserts:
            break
        for s in inserts:
            if len(cols) >= max_cols:
                break
            cols.append(fresh(s))
        cols.sort(key=lambda c: c.sp)

    # phase 2: true bisection of every class-change bracket; only the final
    # bracket endpoints are kept, so a boundary costs O(log) map calls and
    # two columns.  A probe landing in a third class is kept as an island
    # column and resolved by the rescan.
    # a single bracket can hide a whole chain of classes (the homogeneity
    # stack on both sides of a tangency is ~2*LAYER_CAP deep) and each
    # rescan peels off one, so the guard must clear that depth
    for _rescan in range(80):
        new_cols = []
        changed = False
        for i in range(len(cols) - 1):
            a, b = cols[i], cols[i + 1]
            if a.key() == b.key() or b.sp - a.sp <= cut_tol:
                continue
            changed = True
            lo, hi = a, b
            while hi.sp - lo.sp > cut_tol:
                mid = fresh(0.5 * (lo.sp + hi.sp))
                if mid.key() == lo.key():
                    lo = mid
                elif mid.key() == hi.key():
                    hi = mid
                else:
                    new_cols.append(mid)
                    hi = mid
            if lo is not a:
                new_cols.append(lo)
            if hi is not b:
                new_cols.append(hi)
        if not changed:
            break
        cols.extend(new_cols)
        cols.sort(key=lambda c: c.sp)
        # rescans can re-append bracket endpoints; drop exact duplicates
        merged = [cols[0]]
        for c in cols[1:]:
            if c.sp == merged[-1].sp and c.key() == merged[-1].key():
                continue
            merged.append(c)
        cols = merged
    else:
        raise NumericalFailure("cut refinement did not settle at depth %d" % (piece.n + 1))

    # split into runs of constant class
    runs = []
    start = 0
    for i in range(1, len(cols)):
        if cols[i].key() != cols[i - 1].key():
            runs.append((start, i - 1, _cut_kind(cols[i - 1], cols[i])))
            start = i
    runs.append((start, len(cols) - 1, None))

    advanced, finished = [], []
    prev_cut = piece.cut_lo
    for (i0, i1, cut_hi) in runs:
        sub = cols[i0:i1 + 1]
        cut_lo = prev_cut
        prev_cut = cut_hi
        if sub[0].sing or len(sub) < 2:
            continue  # measure-zero sliver at a tangency or below resolution
        width = sub[-1].sp - sub[0].sp
        floor = max(_MIN_PIECE_REL * pair.curve.length,
                    32.0 * np.spacing(pair.curve.length))
        if width < floor:
            raise ResolutionExceeded(
                "piece [%.17g, %.17g] below resolution at depth %d"
                % (sub[0].sp, sub[-1].sp, piece.n + 1)
            )
        sp = np.array([c.sp for c in sub])
        if sub[0].crossed:
            # time ceiling reached: keep the run at the current depth
            finished.append(CurvePiece(
                piece.n, piece.wall, sp,
                np.array([c.q for c in sub]), np.array([c.rho for c in sub]),
                np.array([c.T for c in sub]),
                np.array([c.tq for c in sub]), np.array([c.tr for c in sub]),
                _arc_jacobian(np.array([c.tq for c in sub]),
                              np.array([c.tr for c in sub]),
                              np.array([c.rho for c in sub]), K0),
                np.zeros(len(sub)), np.zeros(len(sub)),
                piece.layer, piece.layer_hist, cut_lo, cut_hi, piece._j0,
            ))
            continue
        K1 = 1.0 / table.scatterers[sub[0].nwall].radius
        nq = np.array([c.nq for c in sub])
        # unwrap across the arc-length seam so the run stays a smooth graph;
        # the dynamics only ever uses q through theta = q/r, so any lift of
        # the circle coordinate is as good as the principal one
        per = TWO_PI * table.scatterers[sub[0].nwall].radius
        nq[1:] -= per * np.cumsum(np.round(np.diff(nq) / per))
        nrho = np.array([c.nrho for c in sub])
        nT = np.array([c.T + c.tau for c in sub])
        ntq = np.empty(len(sub))
        ntr = np.empty(len(sub))
        for k, c in enumerate(sub):
            M = fr._step_matrix(c.tau, K0, math.cos(c.rho), K1, math.cos(c.nrho))
            ntq[k] = M[0, 0] * c.tq + M[0, 1] * c.tr
            ntr[k] = M[1, 0] * c.tq + M[1, 1] * c.tr
        J = _arc_jacobian(ntq, ntr, nrho, K1)
        dens = pair.density_at(sp) / J
        expn = J / np.interp(sp, piece._j0[0], piece._j0[1])
        advanced.append(CurvePiece(
            piece.n + 1, sub[0].nwall, sp, nq, nrho, nT, ntq, ntr, J, dens,
            expn, sub[0].layer, piece.layer_hist + (sub[0].layer,),
            cut_lo, cut_hi, piece._j0,
        ))
    return advanced, finished


def _cut_kind(ca, cb):
    if ca.sing or cb.sing:
        return "grazing"
    if ca.nwall != cb.nwall:
        return "wall"
    if ca.layer != cb.layer:
        return "layer"
    if ca.crossed != cb.crossed:
        return "time"
    return "wall"


def push_forward(pair, n, k0=5, cut_layers=True):
    """Evolve a standard pair n collision steps into smooth pieces.

    Pieces are cut at wall changes and tangencies and, separately flagged,
    at homogeneity-layer boundaries; densities are divided by the image arc
    expansion so total mass is conserved up to dropped tangency slivers.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    table = pair.curve.table
    pieces = [_initial_piece(pair)]
    for depth in range(n):
        nxt = []
        for p in pieces:
            adv, fin = _advance_piece(table, p, pair, k0=k0, cut_layers=cut_layers)
            nxt.extend(adv)
        pieces = nxt
        if not pieces:
            raise NumericalFailure("curve lost at depth %d" % (depth + 1))
    return pieces


# ---------------------------------------------------------------------------
# line integrals


def _adaptive_simpson(g, a, b, tol, max_depth=18):
    fa, fm, fb = g(a), g(0.5 * (a + b)), g(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm, frm = g(lm), g(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth >= max_depth or abs(left + right - whole) < 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (rec(a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)
                + rec(m, b, fm, frm, fb, right, 0.5 * tol, depth + 1))

    return rec(a, b, fa, fm, fb, whole, tol, 0)


def _integrate_finished(table, piece, pair, F, t, tol):
    """Quadrature of F(Phi_t x) phi over one time-stopped piece."""
    if len(piece.sp) >= 4:
        iq = CubicSpline(piece.sp, piece.q)
        irho = CubicSpline(piece.sp, piece.rho)
        iT = CubicSpline(piece.sp, piece.T)
    else:
        iq = lambda s: np.interp(s, piece.sp, piece.q)  # noqa: E731
        irho = lambda s: np.interp(s, piece.sp, piece.rho)  # noqa: E731
        iT = lambda s: np.interp(s, piece.sp, piece.T)  # noqa: E731
    r = table.scatterers[piece.wall]

    def g(s):
        q = float(iq(s))
        rho = float(irho(s))
        dt = max(t - float(iT(s)), 0.0)
        theta = q / r.radius
        omega = theta + rho
        x = (r.cx + r.radius * math.cos(theta) + dt * math.cos(omega)) % 1.0
        y = (r.cy + r.radius * math.sin(theta) + dt * math.sin(omega)) % 1.0
        xi = (omega / TWO_PI) % 1.0
        return float(F(x, y, xi)) * float(pair.density_at(s))

    return _adaptive_simpson(g, piece.s_lo, piece.s_hi, tol)


def line_integral(pair, F, t, tol=1e-4, method="auto", seed=0, report=None):
    """Evaluate int_W F(Phi_t x) phi(x) ds(x).

    `method` "det" evolves the curve piece by piece with a time ceiling and
    integrates each finished piece by adaptive quadrature; "mc" draws
    parameters from phi and averages F over the batch engine (error is
    statistical, reported as sigma).  "auto" switches to "mc" once the
    deterministic piece count would explode (t beyond about 2.5).
    """
    if t < 0.0:
        raise ValueError("t must be nonnegative")
    curve = pair.curve
    table = curve.table
    if method == "auto":
        method = "det" if t <= 2.5 else "mc"

    if t == 0.0:

        def g(s):
            p = curve.point_at(s)
            return float(F(p.x, p.y, p.xi)) * float(pair.density_at(s))

        val = _adaptive_simpson(g, 0.0, curve.length, tol, max_depth=22)
        if report is not None:
            report.update({"method": "quad", "pieces": 1})
        return val

    if method == "det":
        queue = [_initial_piece(pair)]
        done = []
        rounds = 0
        max_rounds = int(t / 0.02) + 80  # narrow-gap chains collide often
        while queue:
            rounds += 1
            if rounds > max_rounds or len(done) + len(queue) > 20000:
                raise NumericalFailure("deterministic route exploded; use mc")
            nxt = []
            for p in queue:
                # homogeneity seams do not break the integrand, so the
                # integration route cuts at true singularities only
                adv, fin = _advance_piece(table, p, pair, cut_layers=False, t_stop=t)
                nxt.extend(adv)
                done.extend(fin)
            queue = nxt
        L = curve.length
        val = 0.0
        for p in done:
            frac = max((p.s_hi - p.s_lo) / L, 1e-6)
            val += _integrate_finished(table, p, pair, F, t, tol * frac)
        if report is not None:
            report.update({"method": "det", "pieces": len(done),
                           "depth_max": max((p.n for p in done), default=0)})
        return val

    if method != "mc":
        raise ValueError("method must be auto, det or mc")

    rng = np.random.default_rng(seed)
    L = curve.length
    grid = np.linspace(0.0, L, 8193)
    pdf = np.asarray(pair.density_at(grid), dtype=float)
    cdf = np.concatenate([[0.0], cumulative_trapezoid(pdf, grid)])
    cdf /= cdf[-1]

    def run_batch(nn):
        u = rng.random(nn)
        s = np.interp(u, cdf, grid)
        qs, rhos = curve.base_arrays(s)
        wall = np.full(nn, curve.wall)
        px, py, vx, vy, _, _ = dyn._batch_outgoing(table, wall, qs, rhos)
        lift = curve.lift_arrays(s)
        px = (px + lift * vx) % 1.0
        py = (py + lift * vy) % 1.0
        xi0 = (np.arctan2(vy, vx) / TWO_PI) % 1.0
        xs, ys, xis, alive = dyn.batch_flow(table, px, py, xi0, t)
        return np.asarray(F(xs[alive], ys[alive], xis[alive]), dtype=float), int(nn - alive.sum())

    pilot, dead = run_batch(4096)
    sig = float(pilot.std())
    n_total = int(np.clip((3.0 * sig / max(tol, 1e-12)) ** 2, 4096, 2_000_000))
    vals = [pilot]
    drawn = 4096
    while drawn < n_total:
        chunk = min(500_000, n_total - drawn)
        v, d = run_batch(chunk)
        vals.append(v)
        dead += d
        drawn += chunk
    allv = np.concatenate(vals)
    val = float(allv.mean())
    sigma = float(allv.std() / math.sqrt(len(allv)))
    if report is not None:
        report.update({"method": "mc", "n": int(drawn), "sigma": sigma,
                       "dead_fraction": dead / drawn})
    return val


# ---------------------------------------------------------------------------
# canonical pair


def default_standard_pair(table, params=None, theta=0.5):
    """A good uniform-density pair on a deterministic high-clearance ray.

    Scans outgoing rays for a long free flight with a well-cleared midpoint,
    then lays a short positively sloped base segment there with a constant
    lift into the open region.
    """
    params = _check_params(params)
    best = None
    for wall, s in enumerate(table.scatterers):
        per = TWO_PI * s.radius
        for q in np.linspace(0.0, per, 240, endpoint=False):
            for rho in (-0.25, 0.0, 0.12, 0.25):
                cp = dyn.CollisionPoint(wall, float(q), rho)
                try:
                    rec = dyn.billiard_map(table, cp)
                except Exception:
                    continue
                if rec.tau < 0.45:
                    continue
                pp = dyn.collision_to_phase(table, cp)
                vx, vy = pp.velocity
                ts = np.linspace(0.15 * rec.tau, 0.85 * rec.tau, 24)
                cls = [
                    table.distance_to_walls((pp.x + u * vx) % 1.0, (pp.y + u * vy) % 1.0)
                    for u in ts
                ]
                i = int(np.argmax(cls))
                t0 = float(ts[i])
                score = min(cls[i], 0.3 * min(t0, rec.tau - t0))
                if best is None or score > best[0]:
                    best = (score, wall, float(q), rho, t0)
    if best is None:
        raise NumericalFailure("no admissible ray found for the default pair")
    _, wall, qc, rho0, t0 = best

    # size the base span so the lifted length comes out at 0.8 * L_max
    r = table.scatterers[wall].radius
    slope = 1.0
    domega = 1.0 / r + slope
    speed = math.sqrt((1.0 + t0 * domega) ** 2 + (domega / TWO_PI) ** 2)
    dq = 0.8 * params["L_max"] / speed
    qs = np.linspace(qc - 0.5 * dq, qc + 0.5 * dq, 25)
    nodes = [
        dyn.CollisionPoint(wall, float(q), rho0 + slope * (float(q) - qc)) for q in qs
    ]
    curve = make_ucurve(table, nodes, flight=t0, params=params)
    return make_standard_pair(curve, density="uniform", theta=theta)
