"""Tangent dynamics in Jacobi coordinates.

A tangent vector of the flow at a point moving in direction omega is written
(dxi, deta, domega), where dxi = -sin(omega) dx + cos(omega) dy is the
component transverse to the motion, deta = cos(omega) dx + sin(omega) dy the
component along it, and domega is the angular part.  A wavefront is a tangent
with deta = 0; its curvature is B = domega/dxi, positive for dispersing
fronts.  Arc length along a curve integrates sqrt(dxi^2+deta^2+domega^2).

Transport is linear in the vector: a free flight of length tau sends
dxi -> dxi + tau*domega (i.e. (1+tau B) dxi) with domega and deta fixed; a
reflection on a wall of curvature K at angle phi sends
domega -> domega + (2K/cos phi) dxi with dxi and deta fixed, so
B+ = B- + 2K/cos(phi).

The collision-map derivative and the hyperbolicity/transversality/alignment
estimators are all built on these two steps.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import dynamics
from .dynamics import GRAZING_TOL, TWO_PI
from .errors import FocusingSingularity, GrazingError, NumericalFailure


@dataclass(frozen=True)
class FrontVector:
    dxi: float
    deta: float
    domega: float

    @property
    def B(self):
        """Front curvature domega/dxi; undefined on pure flow/angle vectors."""
        if self.dxi == 0.0:
            raise ValueError("front curvature undefined when dxi = 0")
        return self.domega / self.dxi

    def norm(self):
        return math.sqrt(self.dxi ** 2 + self.deta ** 2 + self.domega ** 2)


def transport_free(f, tau):
    """Free flight for time tau >= 0: dxi grows by tau*domega.

    For a front this is dxi -> (1+tau B) dxi and B -> B/(1+tau B).  Raises
    FocusingSingularity when a converging front focuses exactly (1+tau B = 0);
    dispersing fronts (B > 0) never do.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0, got %g" % tau)
    dxi = f.dxi + tau * f.domega
    if dxi == 0.0 and f.dxi != 0.0:
        raise FocusingSingularity("front focuses after tau = %g" % tau)
    return FrontVector(dxi, f.deta, f.domega)


def transport_collision(f, K, phi):
    """Reflection on a wall of curvature K hit at angle phi.

    dxi is continuous, deta untouched, and domega picks up (2K/cos phi) dxi,
    so the front curvature jumps by 2K/cos(phi).
    """
    c = math.cos(phi)
    if c < GRAZING_TOL:
        raise GrazingError("tangential reflection, cos(phi) = %.3g" % c)
    return FrontVector(f.dxi, f.deta, f.domega + (2.0 * K / c) * f.dxi)


def in_unstable_cone(dq, dphi):
    """True iff the collision-space tangent (dq, dphi) has dq*dphi > 0."""
    return dq * dphi > 0.0


# --------------------------------------------------------------------------
# transport along actual trajectories


def _collision_info(table, pp):
    """Wall curvature and collision angle recovered from an on-wall state.

    pp is the outgoing phase point emitted at a collision; the wall is the
    scatterer whose circle passes through it (snapped to ~1e-16).
    """
    best = None
    for s in table.scatterers:
        dx = pp.x - s.cx
        dx -= round(dx)
        dy = pp.y - s.cy
        dy -= round(dy)
        gap = abs(math.hypot(dx, dy) - s.radius)
        if best is None or gap < best[0]:
            best = (gap, s, dx, dy)
    _, s, dx, dy = best
    theta = math.atan2(dy, dx)
    phi = dynamics._wrap_pi(TWO_PI * pp.xi - theta)
    return 1.0 / s.radius, phi


def transport_along(table, point, front, t, record=None, grazing_tol=GRAZING_TOL):
    """Push a Jacobi tangent along the time-t trajectory of `point`.

    Composes transport_free over the free segments with transport_collision
    at each reflection.  A mirror reflection also reverses the transverse
    orientation of fixed-time comparisons (dxi, domega flip sign, deta does
    not), and that flip is applied here on top of the curvature update, so
    the composed result equals the directional derivative of the flow,
    sign included.

    `record`, if a list, collects (time, FrontVector, kind, cos_phi) after
    the start, every collision, and the end (cos_phi is None except at
    collisions).
    """
    events = []
    dynamics.flow(table, point, t, events=events, grazing_tol=grazing_tol)
    f = front
    t_prev = 0.0
    for tk, kind, pp in events:
        if kind == "start":
            if record is not None:
                record.append((0.0, f, kind, None))
            continue
        f = transport_free(f, tk - t_prev)
        t_prev = tk
        margin = None
        if kind == "collision":
            K, phi = _collision_info(table, pp)
            margin = math.cos(phi)
            g = transport_collision(f, K, phi)
            f = FrontVector(-g.dxi, g.deta, -g.domega)
        if record is not None:
            record.append((tk, f, kind, margin))
    return f


def map_derivative(table, cp):
    """Derivative of one collision-map step at cp, in outgoing (q, rho).

    Obtained by pushing the coordinate tangents through the front transport:
    on the departure wall dxi = cos(rho) dq and domega = drho + K dq; the
    flight adds tau*domega to dxi; reading the arrival through the incoming
    wall relations gives dq1 = -dxi/cos(rho1) and drho1 = K1 dq1 - domega.
    The overall sign is orientation-reversing, as for any dispersing
    reflection law, and dq*drho > 0 is strictly preserved.

    Returns (M, rec): the 2x2 matrix and the step's CollisionRecord.
    """
    rec = dynamics.billiard_map(table, cp)
    K0 = 1.0 / table.scatterers[cp.wall].radius
    K1 = 1.0 / table.scatterers[rec.point.wall].radius
    c0 = math.cos(cp.rho)
    c1 = math.cos(rec.point.rho)
    M = np.empty((2, 2))
    for j, (dq, dr) in enumerate(((1.0, 0.0), (0.0, 1.0))):
        dxi = c0 * dq + rec.tau * (dr + K0 * dq)
        dom = dr + K0 * dq
        dq1 = -dxi / c1
        M[0, j] = dq1
        M[1, j] = K1 * dq1 - dom
    return M, rec


def _step_matrix(tau, K0, c0, K1, c1):
    """Same matrix as map_derivative, from cached step data."""
    M = np.empty((2, 2))
    for j, (dq, dr) in enumerate(((1.0, 0.0), (0.0, 1.0))):
        dom = dr + K0 * dq
        dq1 = -(c0 * dq + tau * dom) / c1
        M[0, j] = dq1
        M[1, j] = K1 * dq1 - dom
    return M


# --------------------------------------------------------------------------
# hyperbolicity / transversality / alignment estimation


@dataclass
class HyperbolicityEstimate:
    lam: float       # per-unit-time expansion factor, > 1
    c_hyp: float     # prefactor of the fitted expansion law
    c_tr: float      # minimal angle between unstable and central-stable data
    c_al: float      # minimal angle against tangential-singularity tangents
    sample_count: int
    notes: dict

    def to_dict(self):
        return {
            "lambda": self.lam,
            "c_hyp": self.c_hyp,
            "c_tr": self.c_tr,
            "c_al": self.c_al,
            "sample_count": self.sample_count,
            "notes": dict(self.notes),
        }


def _plane_angle(B_u, B_s):
    """Angle between the front (1,0,B_u) and span{(0,1,0),(1,0,-B_s)}.

    The plane normal is (-B_s,0,-1), so sin(angle) =
    (B_s+B_u)/(sqrt(1+B_u^2) sqrt(1+B_s^2)).
    """
    s = (B_s + B_u) / (math.sqrt(1.0 + B_u * B_u) * math.sqrt(1.0 + B_s * B_s))
    return math.asin(min(1.0, s))


def _sample_chain(table, rng, n_steps, margin_min=0.05, tries=100):
    """A collision chain started from one nu-distributed point.

    Returns (start cp, list of steps); each step is
    (tau, K_arrival, rho_arrival, cos_arrival).  Retries draws whose start
    is too close to grazing or whose chain hits a tangency.
    """
    for _ in range(tries):
        seed = int(rng.integers(1 << 31))
        wall, q, rho = dynamics.sample_nu(table, 1, seed=seed)
        cp = dynamics.CollisionPoint(int(wall[0]), float(q[0]), float(rho[0]))
        if math.cos(cp.rho) < margin_min:
            continue
        steps = []
        cur = cp
        try:
            for _ in range(n_steps):
                rec = dynamics.billiard_map(table, cur)
                nxt = rec.point
                steps.append(
                    (rec.tau, 1.0 / table.scatterers[nxt.wall].radius, nxt.rho, math.cos(nxt.rho))
                )
                cur = nxt
        except NumericalFailure:
            continue
        return cp, steps
    raise NumericalFailure("no usable chain found in %d tries" % tries)


def estimate_hyperbolicity(table, samples=200, horizon=4.0, rng_seed=0):
    """Measure expansion and angle constants on random expanding fronts.

    Each sample grows a dispersing front along a nu-random collision chain;
    the mean log arc-length expansion at the first 8 collisions, regressed
    against mean elapsed time, gives lam (slope) and c_hyp (intercept).
    c_tr is the smallest observed angle between the transported unstable
    front and the central-stable plane obtained by reversed transport from
    the sample's future; c_al the smallest angle against tangents of
    near-tangential singularity pull-backs.

    Samples use seed streams spawned from rng_seed, so the result is
    independent of any parallel scheduling of the sample loop.
    """
    n_fit = 8
    n_extra = 10
    root = np.random.SeedSequence(rng_seed)
    times = np.zeros((samples, n_fit))
    logs = np.zeros((samples, n_fit))
    c_tr = math.pi / 2.0
    c_al = math.pi / 2.0
    align_events = 0

    for i, ss in enumerate(root.spawn(samples)):
        rng = np.random.default_rng(ss)
        for _ in range(50):
            cp, steps = _sample_chain(table, rng, n_fit + n_extra)
            if sum(st[0] for st in steps[:n_fit]) <= horizon:
                break
        else:
            raise NumericalFailure("no chain fits inside the horizon")
        K_start = 1.0 / table.scatterers[cp.wall].radius
        B_in = rng.uniform(0.0, 2.0)
        f = FrontVector(1.0, 0.0, B_in + 2.0 * K_start / math.cos(cp.rho))
        n0 = f.norm()
        fronts = [f]
        clock = 0.0
        for k, (tau, K, rho, cosr) in enumerate(steps):
            f = transport_collision(transport_free(f, tau), K, rho)
            fronts.append(f)
            clock += tau
            if k < n_fit:
                times[i, k] = clock
                logs[i, k] = math.log(f.norm() / n0)

        # unstable curvature at the 8th collision, converged from any B > 0
        B_u_end = fronts[n_fit].B

        # stable curvature there: transport a fresh front along the reversed
        # future chain (velocity-reversal conjugacy); the last flight lands
        # on the pre-collision side of the same point, which is exactly
        # where the stable front of the outgoing state lives
        g = FrontVector(1.0, 0.0, 1.0)
        for k in range(n_fit + n_extra - 1, n_fit - 1, -1):
            g = transport_free(g, steps[k][0])
            if k > n_fit:
                g = transport_collision(g, steps[k - 1][1], steps[k - 1][2])
        c_tr = min(c_tr, _plane_angle(B_u_end, g.B))

        # alignment: pull the tangent of the grazing line back from any
        # near-tangential collision to a few steps earlier
        cos_list = [math.cos(cp.rho)] + [st[3] for st in steps]
        K_list = [K_start] + [st[1] for st in steps]
        for n in range(5, len(steps) + 1):
            if cos_list[n] < 0.1:
                depth = min(4, n - 1)
                meas = n - depth
                M = np.eye(2)
                for k in range(meas + 1, n + 1):
                    M = _step_matrix(
                        steps[k - 1][0], K_list[k - 1], cos_list[k - 1], K_list[k], cos_list[k]
                    ) @ M
                v = np.linalg.solve(M, np.array([1.0, 0.0]))
                dxi = cos_list[meas] * v[0]
                dom = v[1] + K_list[meas] * v[0]
                if dxi != 0.0 and -dom / dxi > 0.0:
                    align_events += 1
                    c_al = min(c_al, _plane_angle(fronts[meas].B, -dom / dxi))

    # headline fit: mean log expansion per collision index vs mean time
    tbar = times.mean(axis=0)
    ybar = logs.mean(axis=0)
    slope, intercept = np.polyfit(tbar, ybar, 1)
    resid = ybar - (slope * tbar + intercept)
    r2 = 1.0 - resid.var() / ybar.var()
    lam = math.exp(slope)
    # pooled per-point fit kept for reference
    sp, ip = np.polyfit(times.ravel(), logs.ravel(), 1)
    rp = logs.ravel() - (sp * times.ravel() + ip)
    r2_pooled = 1.0 - rp.var() / logs.ravel().var()
    min_pref = float(np.exp(logs - slope * times).min())

    notes = {
        "r_squared": float(r2),
        "fit_slope": float(slope),
        "fit_intercept": float(intercept),
        "fit_collisions": n_fit,
        "r_squared_pooled": float(r2_pooled),
        "lambda_pooled": float(math.exp(sp)),
        "min_prefactor": min_pref,
        "horizon": float(horizon),
        "mean_fit_time": float(tbar[-1]),
        "alignment_events": int(align_events),
    }
    return HyperbolicityEstimate(
        lam=float(lam),
        c_hyp=float(math.exp(intercept)),
        c_tr=float(c_tr),
        c_al=float(c_al),
        sample_count=samples,
        notes=notes,
    )


# --------------------------------------------------------------------------
# projection Jacobian from a Poincare trace to a flow curve


def jacobian_gamma_to_W(tau, tau_prime, phi, B_plus, K):
    """Arc-length Jacobian of the lift from a wall trace to a flow u-curve.

    With m = B+ cos(phi) - K the trace slope,
    J = sqrt((1+tau B+)^2 cos^2 phi + B+^2 cos^2 phi + (sin phi + tau')^2)
        / sqrt(1+m^2).
    """
    c = math.cos(phi)
    if c < GRAZING_TOL:
        raise GrazingError("cos(phi) = %.3g below tolerance" % c)
    if B_plus <= 0:
        raise ValueError("B_plus must be positive, got %g" % B_plus)
    m = B_plus * c - K
    num = math.sqrt(
        (1.0 + tau * B_plus) ** 2 * c * c
        + B_plus * B_plus * c * c
        + (math.sin(phi) + tau_prime) ** 2
    )
    return num / math.sqrt(1.0 + m * m)
