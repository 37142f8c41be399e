"""Regularity gauges on the flow phase space and on curves.

Three notions are implemented side by side:

* plain Holder seminorms, measured from below on sampled point pairs;
* the oscillation-based (generalized Holder) seminorm
  sup_r r^-alpha int osc_r f dmu, with osc_r estimated over probe points
  in metric balls intersected with the accessible domain;
* dynamical Holder seminorms of functions on a u-curve, where distance
  is theta**s+ with s+ the separation time of the pair.

Plus the two constructive tools the estimates lean on: mollification
(ball average of an inf-extended function, giving a Lipschitz function
with constant of order spread/r) and one-point / sequential Holder
extension with the midpoint tie-break.

Every sup/inf-type number here is a finite-sample estimate; its probe
and sample counts are reported next to it, and enlarging a probe set
never moves the estimate against its semantics (probe sequences are
prefix-nested).  The phase space sits inside the unit 3-torus with the
min-image metric on (x, y, xi); positions inside a scatterer are outside
the domain and never contribute to a sup or an inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .curves import separation_time
from .dynamics import sample_mu
from .errors import InfeasibleExtension

# ambient diameter bound of the phase space in the unit 3-torus
DIAM_M = math.sqrt(3.0) / 2.0

_GAP_EPS = 1e-14


def torus_dist3(a, b):
    """Min-image Euclidean distance on the unit 3-torus, last axis = 3."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d - np.round(d)
    return np.sqrt(np.sum(d * d, axis=-1))


def in_Q(table, x, y):
    """Vectorized membership of positions in the free domain."""
    ok = np.ones(np.shape(x), dtype=bool)
    for s in table.scatterers:
        dx = np.asarray(x) - s.cx
        dy = np.asarray(y) - s.cy
        dx = dx - np.round(dx)
        dy = dy - np.round(dy)
        ok &= dx * dx + dy * dy >= s.radius ** 2
    return ok


# --------------------------------------------------------------------------
# probe clouds

_halton_cache = np.empty((0, 3))


def _ball_offsets(k):
    """First k points of a fixed low-discrepancy unit-ball sequence.

    Prefixes are nested, so a larger probe count extends the probe set
    and sup-type estimates are monotone in k.
    """
    global _halton_cache
    if k > len(_halton_cache):
        eng = qmc.Halton(d=3, scramble=False)
        u = eng.random(max(k, 2 * len(_halton_cache), 64))
        rad = u[:, 0] ** (1.0 / 3.0)
        z = 2.0 * u[:, 1] - 1.0
        phi = 2.0 * math.pi * u[:, 2]
        s = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        _halton_cache = np.stack([rad * s * np.cos(phi), rad * s * np.sin(phi), rad * z], -1)
    return _halton_cache[:k]


def _uniform_ball(rng, k):
    v = rng.normal(size=(k, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.random((k, 1)) ** (1.0 / 3.0)


def _point_coords(point):
    if hasattr(point, "xi"):
        return float(point.x), float(point.y), float(point.xi)
    x, y, xi = point
    return float(x), float(y), float(xi)


# --------------------------------------------------------------------------
# oscillation


def osc_many(f, table, x, y, xi, r, probes=64, bounds=None):
    """Per-point oscillation sup-inf of f over B_r(x) in the domain.

    Accepts arrays of any shape; the centres themselves always count.
    `bounds`, if given, is a 2-list accumulating [inf, sup] of every
    in-domain value seen (used for var_alpha bookkeeping).
    """
    shp = np.shape(x)
    X = np.asarray(x, dtype=float).ravel() % 1.0
    Y = np.asarray(y, dtype=float).ravel() % 1.0
    XI = np.asarray(xi, dtype=float).ravel() % 1.0
    offs = _ball_offsets(probes) * r
    out = np.empty(X.size)
    chunk = max(1, 2_000_000 // max(probes, 1))
    for a in range(0, X.size, chunk):
        b = min(a + chunk, X.size)
        px = (X[a:b, None] + offs[None, :, 0]) % 1.0
        py = (Y[a:b, None] + offs[None, :, 1]) % 1.0
        pz = (XI[a:b, None] + offs[None, :, 2]) % 1.0
        ok = in_Q(table, px, py)
        vals = np.asarray(f(px, py, pz), dtype=float)
        fc = np.asarray(f(X[a:b], Y[a:b], XI[a:b]), dtype=float)
        vmax = np.maximum(np.max(np.where(ok, vals, -np.inf), axis=1), fc)
        vmin = np.minimum(np.min(np.where(ok, vals, np.inf), axis=1), fc)
        out[a:b] = vmax - vmin
        if bounds is not None:
            lo = min(float(vmin.min()), float(fc.min()))
            hi = max(float(vmax.max()), float(fc.max()))
            bounds[0] = min(bounds[0], lo)
            bounds[1] = max(bounds[1], hi)
    return out.reshape(shp) if shp else float(out[0])


def osc_r(f, table, point, r, probes=64):
    """Oscillation of f over the r-ball around one phase point."""
    if r <= 0.0:
        raise ValueError("r must be positive")
    x, y, xi = _point_coords(point)
    return float(
        osc_many(f, table, np.array([x]), np.array([y]), np.array([xi]), r, probes=probes)[0]
    )


def osc_integral(f, table, r, samples=4000, probes=64, seed=0):
    """MC estimate of int osc_r f dmu; returns (mean, standard error)."""
    xs, ys, xis = sample_mu(table, samples, seed)
    osc = osc_many(f, table, xs, ys, xis, r, probes=probes)
    return float(osc.mean()), float(osc.std() / math.sqrt(samples))


def default_r_grid():
    return np.geomspace(1e-3 * DIAM_M, DIAM_M, 24)


@dataclass
class NormReport:
    """Oscillation-seminorm estimate together with its resolution."""

    alpha: float
    seminorm: float
    var_alpha: float
    sup: float
    inf: float
    r_grid: np.ndarray
    integrals: np.ndarray  # MC mean of int osc_r f dmu per grid r
    sigmas: np.ndarray     # standard errors of integrals / r^alpha
    r_argmax: float
    sigma: float           # standard error at the argmax r
    mu_samples: int
    probes: int
    seed: int

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "seminorm": self.seminorm,
            "var_alpha": self.var_alpha,
            "sup": self.sup,
            "inf": self.inf,
            "r_grid": [float(v) for v in self.r_grid],
            "integrals": [float(v) for v in self.integrals],
            "sigmas": [float(v) for v in self.sigmas],
            "r_argmax": self.r_argmax,
            "sigma": self.sigma,
            "mu_samples": self.mu_samples,
            "probes": self.probes,
            "seed": self.seed,
        }


def gen_holder_seminorm(f, table, alpha, r_grid=None, mu_samples=4000, probes=64, seed=0):
    """Estimate sup_r r^-alpha int osc_r f dmu over a geometric r grid.

    The sup over r > 0 collapses to r <= diam(M); the default grid spans
    [1e-3 diam, diam] with 24 geometric points.  Reported sup/inf are the
    extremes of every in-domain evaluation, so the var_alpha identity
    var = seminorm + sup - inf holds by construction.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    grid = default_r_grid() if r_grid is None else np.sort(np.asarray(r_grid, dtype=float))
    xs, ys, xis = sample_mu(table, mu_samples, seed)
    bounds = [math.inf, -math.inf]
    integrals = np.empty(len(grid))
    sigmas = np.empty(len(grid))
    for i, r in enumerate(grid):
        osc = osc_many(f, table, xs, ys, xis, float(r), probes=probes, bounds=bounds)
        integrals[i] = osc.mean()
        sigmas[i] = osc.std() / math.sqrt(mu_samples) / r ** alpha
    ratios = integrals / grid ** alpha
    k = int(np.argmax(ratios))
    semi = float(ratios[k])
    sup, inf_ = bounds[1], bounds[0]
    return NormReport(
        alpha=float(alpha),
        seminorm=semi,
        var_alpha=semi + sup - inf_,
        sup=sup,
        inf=inf_,
        r_grid=grid,
        integrals=integrals,
        sigmas=sigmas,
        r_argmax=float(grid[k]),
        sigma=float(sigmas[k]),
        mu_samples=int(mu_samples),
        probes=int(probes),
        seed=int(seed),
    )


def holder_seminorm(values_a, values_b, dists, alpha):
    """Largest |f(x)-f(y)| / d(x,y)^alpha over given sampled pairs."""
    va = np.asarray(values_a, dtype=float)
    vb = np.asarray(values_b, dtype=float)
    d = np.asarray(dists, dtype=float)
    keep = d > 0.0
    if not np.any(keep):
        return 0.0
    return float(np.max(np.abs(va - vb)[keep] / d[keep] ** alpha))


# --------------------------------------------------------------------------
# dynamical Holder seminorm


def dyn_holder_seminorm(pair, theta=None, params=None, n_max=25, func=None):
    """Measured sup |f(x)-f(y)| / theta**s+(x,y) over sampled pairs.

    `pair` is a standard pair (default f = its density) or a bare u-curve
    when `func` is supplied.  Pairs are scanned in decreasing value gap;
    theta**n_max bounds the reachable ratio, so the scan stops once no
    remaining gap can beat the current best.  A positive gap across a
    never-separating pair yields inf.
    """
    curve = getattr(pair, "curve", pair)
    if func is None:
        func = pair.density_at
    th = float(pair.theta) if theta is None and hasattr(pair, "theta") else float(theta)
    if not 0.0 < th < 1.0:
        raise ValueError("theta must be in (0, 1)")
    L = curve.length
    P = np.linspace(0.0, L, 33) if params is None else np.sort(np.asarray(params, dtype=float))
    fP = np.asarray(func(P), dtype=float)
    scale = max(1.0, float(np.max(np.abs(fP))))
    cand = [
        (abs(fP[i] - fP[j]), i, j)
        for i in range(len(P))
        for j in range(i + 1, len(P))
        if abs(fP[i] - fP[j]) > _GAP_EPS * scale
    ]
    cand.sort(reverse=True)
    semi = 0.0
    floor = th ** n_max
    for gap, i, j in cand:
        if gap / floor <= semi:
            break
        sp = separation_time(curve, float(P[i]), float(P[j]), n_max=n_max)
        if sp == math.inf:
            return math.inf
        semi = max(semi, gap / th ** sp)
    return float(semi)


# --------------------------------------------------------------------------
# mollification


@dataclass
class SampledFunction:
    """Deterministic evaluation callback with measured bounds."""

    func: object
    sup: float = None
    inf: float = None
    meta: dict = field(default_factory=dict)

    def __call__(self, x, y, xi):
        return self.func(x, y, xi)

    def measure_bounds(self, table, samples=2048, seed=0):
        xs, ys, xis = sample_mu(table, samples, seed)
        v = np.asarray(self(xs, ys, xis), dtype=float)
        lo, hi = float(v.min()), float(v.max())
        self.inf = lo if self.inf is None else min(self.inf, lo)
        self.sup = hi if self.sup is None else max(self.sup, hi)
        self.meta["bound_samples"] = int(samples) + int(self.meta.get("bound_samples", 0))
        return self.inf, self.sup


def mollify(F, table, r, probes=512, inf_probes=64, seed=0, bound_samples=4096):
    """Ball-average of the inf-extended F; Lipschitz with constant ~ spread/r.

    Off-domain points inside a scatterer carry the infimum of F over the
    r-ball around them intersected with the domain (never F's own value
    there), so averaging is well defined up to distance r past the wall.
    One offset cloud is drawn at construction and shared by every
    evaluation point: evaluation is deterministic, and differences
    F~(x)-F~(y) see common noise, which is what makes the measured
    Lipschitz constant honest at small separations.
    """
    if r <= 0.0:
        raise ValueError("r must be positive")
    rng = np.random.default_rng(seed)
    outer = _uniform_ball(rng, probes) * r
    inner = _uniform_ball(rng, inf_probes) * r
    bx, by, bxi = sample_mu(table, bound_samples, 2 * seed + 1)
    bvals = np.asarray(F(bx, by, bxi), dtype=float)
    src_inf = float(bvals.min())
    src_sup = float(bvals.max())

    def ev(x, y, xi):
        shp = np.shape(x)
        X = np.asarray(x, dtype=float).ravel() % 1.0
        Y = np.asarray(y, dtype=float).ravel() % 1.0
        XI = np.asarray(xi, dtype=float).ravel() % 1.0
        out = np.empty(X.size)
        chunk = max(1, 1_000_000 // probes)
        for a in range(0, X.size, chunk):
            b = min(a + chunk, X.size)
            px = (X[a:b, None] + outer[None, :, 0]) % 1.0
            py = (Y[a:b, None] + outer[None, :, 1]) % 1.0
            pz = (XI[a:b, None] + outer[None, :, 2]) % 1.0
            ok = in_Q(table, px, py)
            vals = np.asarray(F(px, py, pz), dtype=float)
            if not ok.all():
                off = np.nonzero(~ok)
                ox, oy, oz = px[off], py[off], pz[off]
                cx = (ox[:, None] + inner[None, :, 0]) % 1.0
                cy = (oy[:, None] + inner[None, :, 1]) % 1.0
                cz = (oz[:, None] + inner[None, :, 2]) % 1.0
                ok2 = in_Q(table, cx, cy)
                v2 = np.where(ok2, np.asarray(F(cx, cy, cz), dtype=float), np.inf)
                hat = v2.min(axis=1)
                vals[off] = np.where(np.isfinite(hat), hat, src_inf)
            out[a:b] = vals.mean(axis=1)
        return out.reshape(shp) if shp else float(out[0])

    meta = {
        "r": float(r),
        "probes": int(probes),
        "inf_probes": int(inf_probes),
        "seed": int(seed),
        "source_inf": src_inf,
        "source_sup": src_sup,
    }
    return SampledFunction(ev, meta=meta)


# --------------------------------------------------------------------------
# Holder extension


def _as_points(D):
    P = np.asarray(D, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    return P


def _dists_to(P, z, metric):
    if metric is None:
        zz = np.asarray(z, dtype=float).reshape(1, -1)
        return np.linalg.norm(P - zz, axis=1)
    return np.array([float(metric(p, z)) for p in P])


def _check_holder(P, f, C, alpha, metric, tol):
    n = len(P)
    if metric is None:
        dd = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
        gap = np.abs(f[:, None] - f[None, :])
        bad = gap - C * dd ** alpha
        if float(bad.max()) > tol:
            i, j = np.unravel_index(int(bad.argmax()), bad.shape)
            raise InfeasibleExtension(
                "data not (C, alpha)-Holder: pair (%d, %d) off by %.3g" % (i, j, bad[i, j])
            )
        return
    for i in range(n):
        for j in range(i + 1, n):
            d = float(metric(P[i], P[j]))
            if abs(f[i] - f[j]) - C * d ** alpha > tol:
                raise InfeasibleExtension(
                    "data not (C, alpha)-Holder: pair (%d, %d)" % (i, j)
                )


def _extend_one(P, f, C, alpha, z, metric, tol):
    dz = _dists_to(P, z, metric)
    pw = C * dz ** alpha
    a = float(np.max(f - pw))
    b = float(np.min(f + pw))
    if a - b > tol:
        raise InfeasibleExtension("empty extension interval: a - b = %.3g" % (a - b))
    lo = max(a, float(f.min()))
    hi = min(b, float(f.max()))
    if lo > hi:  # only float slop can get here
        lo = hi = 0.5 * (lo + hi)
    return 0.5 * (lo + hi)


def holder_extend_point(D, fvals, C, alpha, z, metric=None, tol=1e-12):
    """Extension value at z keeping the (C, alpha) contract with all of D.

    The feasible set is [sup_x f(x)-C d(x,z)^a, inf_x f(x)+C d(x,z)^a]
    clipped to [inf f, sup f]; the midpoint is returned.  Raises
    InfeasibleExtension when the data is not (C, alpha)-Holder (checked
    on all pairs) or the interval is empty beyond tol.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    if C < 0.0:
        raise ValueError("C must be nonnegative")
    P = _as_points(D)
    f = np.asarray(fvals, dtype=float)
    if len(P) == 0:
        raise ValueError("empty domain")
    _check_holder(P, f, C, alpha, metric, tol)
    return float(_extend_one(P, f, C, alpha, np.asarray(z, dtype=float), metric, tol))


def holder_extend(D, fvals, C, alpha, targets, metric=None, tol=1e-12):
    """Sequential one-point extensions over targets, in the given order.

    Each extended point joins the domain before the next, so the output
    keeps the (C, alpha) bound on every pair of D union targets and stays
    inside [inf f, sup f].  Values depend on the target order; any order
    satisfies the contract.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    if C < 0.0:
        raise ValueError("C must be nonnegative")
    P = _as_points(D)
    f = np.asarray(fvals, dtype=float)
    if len(P) == 0:
        raise ValueError("empty domain")
    _check_holder(P, f, C, alpha, metric, tol)
    T = _as_points(targets)
    pts = P
    vals = f
    out = np.empty(len(T))
    for k in range(len(T)):
        v = _extend_one(pts, vals, C, alpha, T[k], metric, tol)
        out[k] = v
        pts = np.vstack([pts, T[k][None, :]])
        vals = np.append(vals, v)
    return out
