"""Billiard flow and collision map on a torus table.

State is (x, y, xi) with xi in [0,1) the direction coordinate; the velocity
(cos 2*pi*xi, sin 2*pi*xi) is never stored, so unit speed is structural.
Collisions are solved exactly (quadratic per disk image); hit points are
snapped back onto the wall circle, which keeps the in-Q invariant tight
over long orbits.

Scalar routines are the reference semantics; the numpy batch engine at the
bottom reproduces them for large Monte Carlo sweeps and is regression-tested
against the scalar path.
"""

import math
from dataclasses import dataclass, field
from decimal import Decimal, localcontext

import numpy as np

from .errors import GrazingOrbit, NoCollisionWithinBound, NotOnBoundary
from .torus import cross, dot, min_image, wrap01

TWO_PI = 2.0 * math.pi
GRAZING_TOL = 1e-8       # cos(rho) below this counts as grazing
SELF_HIT_TOL = 1e-6      # same-image roots below this are departure artifacts
ROOT_TOL = 1e-12         # smallest accepted flight time on other images
SUBSTEP = 0.7            # straight advance per unfolding window
DEFAULT_BOUND = 50.0


@dataclass(frozen=True)
class PhasePoint:
    """Flow state (x, y, xi); the direction lives as an angle so unit speed
    is structural.  Points produced by `flow` additionally carry their
    internal extended-precision state (ignored by equality) so composed
    flows resume without a double-rounding seam."""

    x: float
    y: float
    xi: float
    exact: tuple = field(default=None, compare=False, repr=False)

    @property
    def velocity(self):
        w = TWO_PI * self.xi
        return (math.cos(w), math.sin(w))

    def reversed(self):
        ex = None
        if self.exact is not None:
            xd, yd, vxd, vyd = self.exact
            # copy_negate negates without rounding to the ambient context
            ex = (xd, yd, vxd.copy_negate(), vyd.copy_negate())
        return PhasePoint(self.x, self.y, wrap01(self.xi + 0.5), ex)


@dataclass(frozen=True)
class CollisionPoint:
    """Outgoing collision state: wall index, arc length q, reflection angle rho.

    rho in [-pi/2, pi/2] is the signed angle from the outward wall normal to
    the outgoing velocity.
    """

    wall: int
    q: float
    rho: float


@dataclass(frozen=True)
class CollisionRecord:
    tau: float
    point: CollisionPoint
    grazing_margin: float  # cos(rho)
    layer: int


def homogeneity_index(rho, k0=5):
    """Signed homogeneity layer index; 0 iff |rho| <= pi/2 - 1/k0^2.

    Layers accumulate at grazing: index k >= k0 covers
    pi/2 - 1/k^2 <= |rho| < pi/2 - 1/(k+1)^2, signed by rho.
    """
    u = math.pi / 2.0 - abs(rho)
    if u >= 1.0 / (k0 * k0):
        return 0
    if u <= 0.0:
        return int(math.copysign(10 ** 9, rho))
    k = int(math.floor(1.0 / math.sqrt(u)))
    # floor through sqrt can land one off at the layer seams; layers are
    # left-closed in |rho|, i.e. u <= 1/k^2 strictly inside layer k
    if u <= 1.0 / ((k + 1) * (k + 1)):
        k += 1
    elif u > 1.0 / (k * k):
        k -= 1
    return k if rho >= 0.0 else -k


# ---------------------------------------------------------------------------
# scalar flight and collisions


def _wrap_pi(a):
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    elif a > math.pi:
        a -= TWO_PI
    return a


def free_flight(table, point, bound=DEFAULT_BOUND, exclude=None):
    """Earliest collision of the ray from `point`; exact per-image quadratics.

    Advances through unit-cell windows of length SUBSTEP so only nearby
    translate images are tested.  `exclude` is (wall, oi, oj): the departure
    image whose tiny numerical root must be ignored.  Raises
    NoCollisionWithinBound past `bound`.

    Returns (tau, wall, theta, rho_in_margin) where theta is the polar angle
    of the hit on its wall circle and the margin is cos(rho) >= 0.
    """
    px, py = point.x, point.y
    w = TWO_PI * point.xi
    vx, vy = math.cos(w), math.sin(w)
    base = 0.0
    first_window = True
    while True:
        best = None
        reach = SUBSTEP + 1e-3
        for widx, s in enumerate(table.scatterers):
            r = s.radius
            # translate range covering the swept window plus the disk radius;
            # reach overshoots the window so boundary-straddling roots are seen
            xlo = min(px, px + reach * vx) - r - s.cx
            xhi = max(px, px + reach * vx) + r - s.cx
            ylo = min(py, py + reach * vy) - r - s.cy
            yhi = max(py, py + reach * vy) + r - s.cy
            for oi in range(math.floor(xlo), math.floor(xhi) + 1):
                for oj in range(math.floor(ylo), math.floor(yhi) + 1):
                    dx = px - (s.cx + oi)
                    dy = py - (s.cy + oj)
                    b = dx * vx + dy * vy
                    c = dx * dx + dy * dy - r * r
                    disc = b * b - c
                    if disc <= 0.0:
                        continue
                    t = -b - math.sqrt(disc)
                    tol = ROOT_TOL
                    if (
                        first_window
                        and exclude is not None
                        and exclude[0] == widx
                        and exclude[1] == oi
                        and exclude[2] == oj
                    ):
                        tol = SELF_HIT_TOL
                    # slack past the window edge: a root landing exactly on
                    # the substep boundary must not be stepped over
                    if t <= tol or t > SUBSTEP + 1e-6:
                        continue
                    if best is None or t < best[0]:
                        best = (t, widx, oi, oj, dx, dy)
        if best is not None:
            t, widx, oi, oj, dx, dy = best
            s = table.scatterers[widx]
            hx = dx + t * vx
            hy = dy + t * vy
            theta = math.atan2(hy, hx)
            margin = -(hx * vx + hy * vy) / s.radius
            return base + t, widx, theta, max(margin, 0.0)
        base += SUBSTEP
        if base > bound:
            raise NoCollisionWithinBound(
                "no collision within %.3g from (%.6g, %.6g) heading %.6g"
                % (bound, point.x, point.y, point.xi)
            )
        px = wrap01(px + SUBSTEP * vx)
        py = wrap01(py + SUBSTEP * vy)
        first_window = False


def reflect(v, n, tol=GRAZING_TOL):
    """Elastic reflection v - 2(v.n)n; tangential v is returned unchanged."""
    vn = dot(v[0], v[1], n[0], n[1])
    if abs(vn) < tol:
        return v
    return (v[0] - 2.0 * vn * n[0], v[1] - 2.0 * vn * n[1])


def collision_to_phase(table, cp):
    """Outgoing phase point of a collision state."""
    s = table.scatterers[cp.wall]
    theta = cp.q / s.radius
    x = wrap01(s.cx + s.radius * math.cos(theta))
    y = wrap01(s.cy + s.radius * math.sin(theta))
    xi = wrap01((theta + cp.rho) / TWO_PI)
    return PhasePoint(x, y, xi)


def phase_to_collision(table, point, tol=1e-9):
    """Collision coordinates of a phase point sitting on a wall (outgoing)."""
    for i, s in enumerate(table.scatterers):
        dx, dy = min_image(point.x - s.cx, point.y - s.cy)
        d = math.hypot(dx, dy)
        if abs(d - s.radius) <= tol:
            theta = math.atan2(dy, dx)
            rho = _wrap_pi(TWO_PI * point.xi - theta)
            if abs(rho) > math.pi / 2.0 + 1e-9:
                raise NotOnBoundary("velocity points into wall %d" % i)
            return CollisionPoint(i, s.radius * (theta % TWO_PI), rho)
    raise NotOnBoundary("phase point is not on any wall")


def next_collision(table, point, bound=DEFAULT_BOUND, exclude=None, k0=5):
    """Flight plus reflection; returns (CollisionRecord, outgoing PhasePoint,
    departure image key for exclusion chaining)."""
    tau, wall, theta, _ = free_flight(table, point, bound=bound, exclude=exclude)
    s = table.scatterers[wall]
    w = TWO_PI * point.xi
    rho = _wrap_pi(theta + math.pi - w)
    margin = math.cos(rho)
    q = s.radius * (theta % TWO_PI)
    cp = CollisionPoint(wall, q, rho)
    rec = CollisionRecord(tau, cp, margin, homogeneity_index(rho, k0))
    out = collision_to_phase(table, cp)
    # image offset of the landing circle in the frame of the snapped point
    oi = round(out.x - s.cx - s.radius * math.cos(theta))
    oj = round(out.y - s.cy - s.radius * math.sin(theta))
    return rec, out, (wall, oi, oj)


def billiard_map(table, cp, bound=DEFAULT_BOUND, k0=5, grazing_tol=GRAZING_TOL):
    """One step of the collision map on outgoing coordinates.

    Raises GrazingOrbit when the next collision is tangential beyond the
    tolerance (such orbits are discarded upstream, never silently reflected).
    """
    out = collision_to_phase(table, cp)
    s = table.scatterers[cp.wall]
    theta = cp.q / s.radius
    oi = round(out.x - s.cx - s.radius * math.cos(theta))
    oj = round(out.y - s.cy - s.radius * math.sin(theta))
    rec, nxt, _ = next_collision(table, out, bound=bound, exclude=(cp.wall, oi, oj), k0=k0)
    if rec.grazing_margin < grazing_tol:
        raise GrazingOrbit(
            "grazing at wall %d, margin %.3g" % (rec.point.wall, rec.grazing_margin)
        )
    return rec


def _candidate_images(table, px, py, vx, vy, window):
    """Double-precision scan of one advance window; returns the near-minimal
    root candidates as (root, wall, oi, oj) sorted by root."""
    out = []
    reach = window + 1e-3  # slack so window-edge roots are never stepped past
    for widx, s in enumerate(table.scatterers):
        r = s.radius
        xlo = min(px, px + reach * vx) - r - s.cx
        xhi = max(px, px + reach * vx) + r - s.cx
        ylo = min(py, py + reach * vy) - r - s.cy
        yhi = max(py, py + reach * vy) + r - s.cy
        for oi in range(math.floor(xlo), math.floor(xhi) + 1):
            for oj in range(math.floor(ylo), math.floor(yhi) + 1):
                dx = px - (s.cx + oi)
                dy = py - (s.cy + oj)
                b = dx * vx + dy * vy
                c = dx * dx + dy * dy - r * r
                disc = b * b - c
                if disc <= 0.0:
                    continue
                t = -b - math.sqrt(disc)
                if -1e-9 <= t <= window + 1e-6:
                    out.append((t, widx, oi, oj))
    out.sort()
    return out


def flow(table, point, t, bound=DEFAULT_BOUND, events=None, grazing_tol=GRAZING_TOL,
         digits=None):
    """Flow the point for time t (right-continuous at collisions).

    The stepper runs in extended precision (stdlib decimal; the state
    (x, y, vx, vy) never needs trigonometry since reflection is algebraic),
    with collision candidates prefiltered in double precision.  Hyperbolicity
    amplifies arithmetic noise by roughly one digit per collision, so the
    working precision grows with t; the returned point carries the exact
    state for lossless composition.

    `events`, if a list, collects (time, kind, PhasePoint) rows suitable for
    the debug CSV.  Backward flow is velocity reversal, not negative t.
    """
    if t < 0.0:
        raise ValueError("flow time must be nonnegative; reverse the velocity instead")
    if digits is None:
        digits = min(150, 45 + int(2.5 * t))
    with localcontext() as ctx:
        ctx.prec = digits
        if point.exact is not None:
            xd, yd, vxd, vyd = point.exact
        else:
            w = TWO_PI * point.xi
            xd, yd = Decimal(point.x), Decimal(point.y)
            vxd, vyd = Decimal(math.cos(w)), Decimal(math.sin(w))
        remaining = Decimal(t)
        clock = Decimal(0)
        # a fresh double start may sit on a wall; its own tiny root must be
        # skipped, while exact-state restarts are clean to working precision
        root_tol = Decimal("1e-9") if point.exact is None else Decimal("1e-25")
        if events is not None:
            events.append((0.0, "start", point))
        straight = Decimal(0)  # advance since last collision, for the bound
        while remaining > 0:
            window = SUBSTEP if remaining > SUBSTEP else float(remaining) + 1e-15
            cands = _candidate_images(
                table, float(xd), float(yd), float(vxd), float(vyd), window
            )
            tau = None
            for (t0, widx, oi, oj) in cands:
                if tau is not None and t0 > float(tau[0]) + 1e-6:
                    break
                s = table.scatterers[widx]
                dx = xd - (Decimal(s.cx) + oi)
                dy = yd - (Decimal(s.cy) + oj)
                b = dx * vxd + dy * vyd
                c = dx * dx + dy * dy - Decimal(s.radius) * Decimal(s.radius)
                disc = b * b - c
                if disc <= 0:
                    continue
                troot = -b - disc.sqrt()
                if troot <= root_tol:
                    continue
                if tau is None or troot < tau[0]:
                    tau = (troot, widx, oi, oj)
            if tau is not None and tau[0] <= remaining:
                troot, widx, oi, oj = tau
                s = table.scatterers[widx]
                hx = xd + troot * vxd
                hy = yd + troot * vyd
                nx = hx - (Decimal(s.cx) + oi)
                ny = hy - (Decimal(s.cy) + oj)
                nn = (nx * nx + ny * ny).sqrt()
                nx /= nn
                ny /= nn
                vn = vxd * nx + vyd * ny
                if float(-vn) < grazing_tol:
                    raise GrazingOrbit(
                        "grazing during flow at t=%.6g" % float(clock + troot)
                    )
                vxd = vxd - 2 * vn * nx
                vyd = vyd - 2 * vn * ny
                sp = (vxd * vxd + vyd * vyd).sqrt()
                vxd /= sp
                vyd /= sp
                xd = hx - _dfloor(hx)
                yd = hy - _dfloor(hy)
                clock += troot
                remaining -= troot
                straight = Decimal(0)
                root_tol = Decimal("1e-25")
                if events is not None:
                    events.append((float(clock), "collision", _emit(xd, yd, vxd, vyd)))
            else:
                adv = remaining if remaining < SUBSTEP else Decimal(SUBSTEP)
                xd += adv * vxd
                yd += adv * vyd
                xd -= _dfloor(xd)
                yd -= _dfloor(yd)
                clock += adv
                remaining -= adv
                straight += adv
                if straight > bound and remaining > 0:
                    raise NoCollisionWithinBound(
                        "no collision within %.3g during flow" % bound
                    )
        cur = _emit(xd, yd, vxd, vyd)
        if events is not None:
            events.append((float(clock), "end", cur))
        return cur


def _dfloor(a):
    return a.to_integral_value(rounding="ROUND_FLOOR")


def _emit(xd, yd, vxd, vyd):
    xi = (math.atan2(float(vyd), float(vxd)) / TWO_PI) % 1.0
    return PhasePoint(float(xd), float(yd), xi, (xd, yd, vxd, vyd))


def project_to_map(table, point, bound=DEFAULT_BOUND):
    """Previous collision (outgoing state) and the elapsed time tau_minus.

    A point already sitting on a wall with outgoing velocity projects to
    itself with tau_minus = 0.
    """
    try:
        cp = phase_to_collision(table, point, tol=1e-12)
        return cp, 0.0
    except NotOnBoundary:
        pass
    back = point.reversed()
    tau, wall, theta, _ = free_flight(table, back, bound=bound)
    s = table.scatterers[wall]
    # outgoing velocity at the previous collision is the forward velocity
    rho = _wrap_pi(TWO_PI * point.xi - theta)
    cp = CollisionPoint(wall, s.radius * (theta % TWO_PI), rho)
    return cp, tau


def singularity_distance(table, cp, n, k0=5, include_layers=False, tol=1e-10):
    """Estimated (q,rho)-distance from cp to the n-step singular set.

    Marches away from cp along +q, -q, +rho, -rho until the forward
    itinerary (wall sequence, optionally with homogeneity layers) changes or
    a grazing appears, then bisects.  Returns +inf when nothing changes
    within the coordinate cell.
    """
    ref = _orbit_signature(table, cp, n, k0, include_layers)
    if ref is None:
        return 0.0
    s = table.scatterers[cp.wall]
    best = math.inf
    half_q = math.pi * s.radius  # half circumference
    for dq, drho, limit in (
        (1.0, 0.0, half_q),
        (-1.0, 0.0, half_q),
        (0.0, 1.0, math.pi),
        (0.0, -1.0, math.pi),
    ):
        lo, hi = 0.0, None
        step = min(1e-6, limit)
        while step <= limit:
            probe = CollisionPoint(cp.wall, cp.q + dq * step, cp.rho + drho * step)
            if _orbit_signature(table, probe, n, k0, include_layers) != ref:
                hi = step
                break
            lo = step
            step *= 2.0
        if hi is None:
            continue
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            probe = CollisionPoint(cp.wall, cp.q + dq * mid, cp.rho + drho * mid)
            if _orbit_signature(table, probe, n, k0, include_layers) != ref:
                hi = mid
            else:
                lo = mid
        if hi < best:
            best = hi
    return best


def _orbit_signature(table, cp, n, k0, include_layers):
    """Wall itinerary (and optionally layers) of n forward steps; None when
    the start is invalid or a grazing interrupts (always 'different')."""
    if abs(cp.rho) >= math.pi / 2.0:
        return None
    sig = []
    cur = cp
    for _ in range(n):
        try:
            rec = billiard_map(table, cur)
        except (GrazingOrbit, NoCollisionWithinBound):
            return None
        if include_layers:
            sig.append((rec.point.wall, rec.layer))
        else:
            sig.append(rec.point.wall)
        cur = rec.point
    return tuple(sig)


# ---------------------------------------------------------------------------
# invariant-measure samplers


def sample_mu(table, n, seed):
    """n uniform phase-space samples (rejection over the unit cell).

    Returns arrays (x, y, xi).
    """
    rng = np.random.default_rng(seed)
    xs = np.empty(n)
    ys = np.empty(n)
    got = 0
    while got < n:
        m = int((n - got) / max(table.area, 0.05)) + 16
        cx = rng.random(m)
        cy = rng.random(m)
        ok = np.ones(m, dtype=bool)
        for s in table.scatterers:
            dx = cx - s.cx
            dy = cy - s.cy
            dx -= np.round(dx)
            dy -= np.round(dy)
            ok &= dx * dx + dy * dy > s.radius ** 2
        take = min(int(ok.sum()), n - got)
        xs[got : got + take] = cx[ok][:take]
        ys[got : got + take] = cy[ok][:take]
        got += take
    xi = rng.random(n)
    return xs, ys, xi


def sample_nu(table, n, seed):
    """n samples of the collision-space invariant measure cos(rho) dq drho.

    Returns arrays (wall, q, rho).
    """
    rng = np.random.default_rng(seed)
    perims = np.array([s.perimeter for s in table.scatterers])
    probs = perims / perims.sum()
    wall = rng.choice(len(probs), size=n, p=probs)
    q = rng.random(n) * perims[wall]
    rho = np.arcsin(2.0 * rng.random(n) - 1.0)
    return wall, q, rho


def sample_flight_times(table, n, seed):
    """Free flight times from nu samples (used for tau bounds)."""
    wall, q, rho = sample_nu(table, n, seed)
    px, py, vx, vy, oi, oj = _batch_outgoing(table, wall, q, rho)
    tau, _, _, _, alive = batch_free_flight(table, px, py, vx, vy, wall, oi, oj)
    return tau[alive]


def estimate_complexity(table, samples, seed, scan=4000):
    """Max continuity pieces of a one-step outgoing-angle fan (estimated)."""
    rng = np.random.default_rng(seed)
    worst = 1
    rhos = np.linspace(-math.pi / 2 + 1e-4, math.pi / 2 - 1e-4, scan)
    perims = np.array([s.perimeter for s in table.scatterers])
    probs = perims / perims.sum()
    for _ in range(samples):
        w = int(rng.choice(len(probs), p=probs))
        q = float(rng.random() * perims[w])
        wall = np.full(scan, w)
        qs = np.full(scan, q)
        px, py, vx, vy, oi, oj = _batch_outgoing(table, wall, qs, rhos)
        _, hit_wall, _, _, alive = batch_free_flight(table, px, py, vx, vy, wall, oi, oj)
        ids = hit_wall.astype(float)
        ids[~alive] = -1.0
        pieces = 1 + int(np.count_nonzero(np.diff(ids) != 0.0))
        worst = max(worst, pieces)
    return worst


# ---------------------------------------------------------------------------
# numpy batch engine


def _batch_outgoing(table, wall, q, rho):
    """Vectorized collision_to_phase returning positions, velocities and the
    departure image offsets for self-hit exclusion."""
    wall = np.asarray(wall)
    q = np.asarray(q, dtype=float)
    rho = np.asarray(rho, dtype=float)
    radii = np.array([s.radius for s in table.scatterers])
    cxs = np.array([s.cx for s in table.scatterers])
    cys = np.array([s.cy for s in table.scatterers])
    r = radii[wall]
    theta = q / r
    bx = cxs[wall] + r * np.cos(theta)
    by = cys[wall] + r * np.sin(theta)
    px = bx - np.floor(bx)
    py = by - np.floor(by)
    w = theta + rho
    vx = np.cos(w)
    vy = np.sin(w)
    oi = np.round(px - cxs[wall] - r * np.cos(theta)).astype(np.int64)
    oj = np.round(py - cys[wall] - r * np.sin(theta)).astype(np.int64)
    return px, py, vx, vy, oi, oj


def batch_free_flight(
    table, px, py, vx, vy, excl_wall=None, excl_oi=None, excl_oj=None, bound=DEFAULT_BOUND
):
    """Vectorized earliest-collision solve.

    Returns (tau, wall, theta, margin, alive); points with no collision
    within `bound` come back alive=False (finite-horizon tables should never
    produce them in measurable numbers).
    """
    px = np.array(px, dtype=float)
    py = np.array(py, dtype=float)
    vx = np.asarray(vx, dtype=float)
    vy = np.asarray(vy, dtype=float)
    if excl_wall is not None:
        excl_wall = np.asarray(excl_wall)
        excl_oi = np.asarray(excl_oi)
        excl_oj = np.asarray(excl_oj)
    n = px.shape[0]
    tau = np.zeros(n)
    wall = np.full(n, -1, dtype=np.int64)
    theta = np.zeros(n)
    active = np.ones(n, dtype=bool)
    base = np.zeros(n)
    first = True
    # images reachable from a [0,1)^2 start within one SUBSTEP window
    span = (-1, 0, 1, 2)
    if max(s.radius for s in table.scatterers) > 1.0 - SUBSTEP:
        span = (-2, -1, 0, 1, 2)
    offsets = [(i, j) for i in span for j in span]
    while active.any():
        idx = np.nonzero(active)[0]
        apx, apy = px[idx], py[idx]
        avx, avy = vx[idx], vy[idx]
        best_t = np.full(idx.shape[0], np.inf)
        best_w = np.full(idx.shape[0], -1, dtype=np.int64)
        best_hx = np.zeros(idx.shape[0])
        best_hy = np.zeros(idx.shape[0])
        for widx, s in enumerate(table.scatterers):
            r2 = s.radius * s.radius
            for (oi, oj) in offsets:
                dx = apx - (s.cx + oi)
                dy = apy - (s.cy + oj)
                b = dx * avx + dy * avy
                c = dx * dx + dy * dy - r2
                disc = b * b - c
                ok = disc > 0.0
                if not ok.any():
                    continue
                t = np.where(ok, -b - np.sqrt(np.where(ok, disc, 1.0)), np.inf)
                if first and excl_wall is not None:
                    excl = (
                        (excl_wall[idx] == widx)
                        & (excl_oi[idx] == oi)
                        & (excl_oj[idx] == oj)
                    )
                    t = np.where(excl & (t <= SELF_HIT_TOL), np.inf, t)
                hit = ok & (t > ROOT_TOL) & (t <= SUBSTEP + 1e-6) & (t < best_t)
                if hit.any():
                    best_t = np.where(hit, t, best_t)
                    best_w = np.where(hit, widx, best_w)
                    best_hx = np.where(hit, dx + t * avx, best_hx)
                    best_hy = np.where(hit, dy + t * avy, best_hy)
        found = np.isfinite(best_t)
        gidx = idx[found]
        tau[gidx] = base[gidx] + best_t[found]
        wall[gidx] = best_w[found]
        theta[gidx] = np.arctan2(best_hy[found], best_hx[found])
        active[gidx] = False
        # survivors advance one window
        rest = idx[~found]
        if rest.size:
            base[rest] += SUBSTEP
            over = rest[base[rest] > bound]
            if over.size:
                active[over] = False  # stays wall=-1 -> dead
                rest = rest[base[rest] <= bound]
            nx = px[rest] + SUBSTEP * vx[rest]
            ny = py[rest] + SUBSTEP * vy[rest]
            px[rest] = nx - np.floor(nx)
            py[rest] = ny - np.floor(ny)
        first = False
    alive = wall >= 0
    vin_dot_n = np.where(alive, np.cos(theta) * vx + np.sin(theta) * vy, 0.0)
    margin = np.clip(-vin_dot_n, 0.0, 1.0)
    return tau, wall, theta, margin, alive


def batch_map(table, wall, q, rho, steps, k0=5, grazing_tol=GRAZING_TOL, record=None):
    """Iterate the collision map on arrays; grazing orbits become dead.

    Returns (wall, q, rho, tau_acc, alive); `record`, if a callable, receives
    (step, wall, q, rho, tau, alive) after every step.
    """
    wall = np.array(wall, dtype=np.int64)
    q = np.array(q, dtype=float)
    rho = np.array(rho, dtype=float)
    n = wall.shape[0]
    tau_acc = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    radii = np.array([s.radius for s in table.scatterers])
    for step in range(steps):
        px, py, vx, vy, oi, oj = _batch_outgoing(table, wall, q, rho)
        tau, nwall, theta, margin, ok = batch_free_flight(
            table, px, py, vx, vy, wall, oi, oj
        )
        ok &= alive
        w_ang = np.arctan2(vy, vx)
        nrho = theta + math.pi - w_ang
        nrho = (nrho + math.pi) % TWO_PI - math.pi
        ok &= np.cos(nrho) >= grazing_tol
        # freeze dead lanes at their last state
        wall = np.where(ok, nwall, wall)
        q = np.where(ok, radii[np.clip(nwall, 0, None)] * (theta % TWO_PI), q)
        rho = np.where(ok, nrho, rho)
        tau_acc = np.where(ok, tau_acc + tau, tau_acc)
        alive = ok
        if record is not None:
            record(step, wall, q, rho, tau_acc, alive)
    return wall, q, rho, tau_acc, alive


def batch_flow_observe(table, px, py, xi, t_grid, func, grazing_tol=GRAZING_TOL):
    """Evolve points in time and evaluate `func(x, y, xi)` at each grid time.

    Returns (sums, sumsq, counts) per grid time over surviving points.
    Segments are half-open [t_k, t_{k+1}): evaluation at a collision time
    sees the post-collision state (right continuity).
    """
    px = np.array(px, dtype=float)
    py = np.array(py, dtype=float)
    xi = np.array(xi, dtype=float)
    n = px.shape[0]
    t_grid = np.asarray(t_grid, dtype=float)
    order = np.argsort(t_grid)
    t_max = float(t_grid.max()) if t_grid.size else 0.0

    vx = np.cos(TWO_PI * xi)
    vy = np.sin(TWO_PI * xi)
    t_acc = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    next_gi = np.zeros(n, dtype=np.int64)  # index into `order`
    sums = np.zeros(t_grid.shape[0])
    sumsq = np.zeros(t_grid.shape[0])
    counts = np.zeros(t_grid.shape[0], dtype=np.int64)

    excl_wall = np.full(n, -1, dtype=np.int64)
    excl_oi = np.zeros(n, dtype=np.int64)
    excl_oj = np.zeros(n, dtype=np.int64)
    radii = np.array([s.radius for s in table.scatterers])
    cxs = np.array([s.cx for s in table.scatterers])
    cys = np.array([s.cy for s in table.scatterers])

    pending = alive & (next_gi < t_grid.size)
    while pending.any():
        idx = np.nonzero(pending)[0]
        tau, wall, theta, margin, ok = batch_free_flight(
            table,
            px[idx],
            py[idx],
            vx[idx],
            vy[idx],
            excl_wall[idx],
            excl_oi[idx],
            excl_oj[idx],
        )
        seg_end = t_acc[idx] + np.where(ok, tau, np.inf)
        # evaluate all grid times inside each segment
        for k in range(idx.shape[0]):
            i = idx[k]
            while next_gi[i] < t_grid.size:
                tg = t_grid[order[next_gi[i]]]
                if tg >= seg_end[k]:
                    break
                dt = tg - t_acc[i]
                gx = px[i] + dt * vx[i]
                gy = py[i] + dt * vy[i]
                val = func(gx - math.floor(gx), gy - math.floor(gy), xi[i])
                gslot = order[next_gi[i]]
                sums[gslot] += val
                sumsq[gslot] += val * val
                counts[gslot] += 1
                next_gi[i] += 1
        # advance through the collision
        w_ang = np.arctan2(vy[idx], vx[idx])
        nrho = theta + math.pi - w_ang
        nrho = (nrho + math.pi) % TWO_PI - math.pi
        good = ok & (np.cos(nrho) >= grazing_tol)
        gi = idx[good]
        if gi.size:
            wgood = wall[good]
            th = theta[good]
            r = radii[wgood]
            bx = cxs[wgood] + r * np.cos(th)
            by = cys[wgood] + r * np.sin(th)
            nx = bx - np.floor(bx)
            ny = by - np.floor(by)
            px[gi] = nx
            py[gi] = ny
            t_acc[gi] += tau[good]
            nang = th + nrho[good]
            xi[gi] = (nang / TWO_PI) % 1.0
            vx[gi] = np.cos(nang)
            vy[gi] = np.sin(nang)
            excl_wall[gi] = wgood
            excl_oi[gi] = np.round(nx - cxs[wgood] - r * np.cos(th)).astype(np.int64)
            excl_oj[gi] = np.round(ny - cys[wgood] - r * np.sin(th)).astype(np.int64)
        died = idx[~good]
        alive[died] = False
        pending = alive & (next_gi < t_grid.size) & (t_acc <= t_max)
    return sums, sumsq, counts


def batch_flow(table, px, py, xi, t, grazing_tol=GRAZING_TOL):
    """Evolve points by time t; returns (x, y, xi, alive)."""
    px = np.array(px, dtype=float)
    py = np.array(py, dtype=float)
    xi = np.array(xi, dtype=float)
    n = px.shape[0]
    vx = np.cos(TWO_PI * xi)
    vy = np.sin(TWO_PI * xi)
    t_acc = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    excl_wall = np.full(n, -1, dtype=np.int64)
    excl_oi = np.zeros(n, dtype=np.int64)
    excl_oj = np.zeros(n, dtype=np.int64)
    radii = np.array([s.radius for s in table.scatterers])
    cxs = np.array([s.cx for s in table.scatterers])
    cys = np.array([s.cy for s in table.scatterers])
    pending = alive & (t_acc < t)
    while pending.any():
        idx = np.nonzero(pending)[0]
        tau, wall, theta, margin, ok = batch_free_flight(
            table, px[idx], py[idx], vx[idx], vy[idx],
            excl_wall[idx], excl_oi[idx], excl_oj[idx],
        )
        remain = t - t_acc[idx]
        finishes = np.where(ok, tau, np.inf) > remain
        fi = idx[finishes]
        if fi.size:
            d = remain[finishes]
            nx = px[fi] + d * vx[fi]
            ny = py[fi] + d * vy[fi]
            px[fi] = nx - np.floor(nx)
            py[fi] = ny - np.floor(ny)
            t_acc[fi] = t
        cont = ok & ~finishes
        w_ang = np.arctan2(vy[idx], vx[idx])
        nrho = theta + math.pi - w_ang
        nrho = (nrho + math.pi) % TWO_PI - math.pi
        good = cont & (np.cos(nrho) >= grazing_tol)
        gi = idx[good]
        if gi.size:
            wgood = wall[good]
            th = theta[good]
            r = radii[wgood]
            bx = cxs[wgood] + r * np.cos(th)
            by = cys[wgood] + r * np.sin(th)
            nx = bx - np.floor(bx)
            ny = by - np.floor(by)
            px[gi] = nx
            py[gi] = ny
            t_acc[gi] += tau[good]
            nang = th + nrho[good]
            xi[gi] = (nang / TWO_PI) % 1.0
            vx[gi] = np.cos(nang)
            vy[gi] = np.sin(nang)
            excl_wall[gi] = wgood
            excl_oi[gi] = np.round(nx - cxs[wgood] - r * np.cos(th)).astype(np.int64)
            excl_oj[gi] = np.round(ny - cys[wgood] - r * np.sin(th)).astype(np.int64)
        died = idx[cont & ~good]
        if died.size:
            alive[died] = False
        pending = alive & (t_acc < t)
    return px, py, xi, alive


def events_to_csv(events, path):
    """Write a flow event log as CSV with columns t, x, y, xi, event."""
    with open(path, "w") as fh:
        fh.write("t,x,y,xi,event\n")
        for (t, kind, pp) in events:
            fh.write("%.17g,%.17g,%.17g,%.17g,%s\n" % (t, pp.x, pp.y, pp.xi, kind))
