"""Tube, holonomy and product-structure tests.

Oracle strategy: disk-density mass is integrated by an in-test polar
quadrature; tube measure is cross-checked against a finite-difference
tilt route that never calls the chart's own cosine; holonomy matches are
validated through orbit tracking (contraction of the mismatch sequence)
and leaf membership; the two Jacobian routes (parameter differencing vs
the reference-wall lift reduction) check each other; Jacobian deviation
scaling is probed on purpose-built tilted curves through a common lifted
center.  Product-structure constants come from the frozen calibration
block; scaling laws (abundance, leakage, cut-out mass) are re-measured
here and held to their expected log-log slopes.
"""

import math

import numpy as np
import pytest

import billiardlab as bl
from billiardlab import calibration as cal
from billiardlab import curves as cv
from billiardlab import dynamics as dyn
from billiardlab import holonomy as hol
from billiardlab import norms as nm
from billiardlab.errors import (
    InfeasibleExtension,
    NoCrossing,
    NotGoodCurve,
    NotInProduct,
    OutOfDisk,
)

EPS = 1e-5
PARAMS = {"Gamma_max": 1.6, "L_max": 1.0 / 160.0, "eps0": 1.0 / 16.0}


@pytest.fixture(scope="module")
def pair(table):
    return cv.default_standard_pair(table, params=PARAMS)


@pytest.fixture(scope="module")
def chart(pair):
    return hol.build_tube(pair, eps=EPS)


@pytest.fixture(scope="module")
def holo(chart):
    return hol.build_holonomy_table(chart, n_s=16)


@pytest.fixture(scope="module")
def fan(chart):
    return hol.fan_survey(chart, n_depth=6)


@pytest.fixture(scope="module")
def hcal():
    return cal.load_calibration()["holonomy"]


@pytest.fixture(scope="module")
def gdens(chart, holo, pair):
    return hol.build_G(chart, holo, pair)


def leb_m(table):
    return table.area


# --------------------------------------------------------------------------
# disk density


def test_q_center_value():
    for eps in (1e-5, 3e-4, 0.02):
        assert hol.q_density((0.0, 0.0), eps) == pytest.approx(
            3.0 / (math.pi * eps * eps), rel=1e-14)


def test_q_boundary_zero():
    eps = 2e-4
    for ang in np.linspace(0.0, 2.0 * math.pi, 7):
        z = (eps * math.cos(ang), eps * math.sin(ang))
        assert hol.q_density(z, eps) == pytest.approx(0.0, abs=1e-12)


def test_q_unit_mass_polar_quadrature():
    # independent polar rule: Gauss-Legendre radially, uniform in angle
    eps = 7e-4
    xg, wg = np.polynomial.legendre.leggauss(40)
    r = 0.5 * eps * (xg + 1.0)
    wr = 0.5 * eps * wg
    n_t = 64
    total = 0.0
    for ri, wi in zip(r, wr):
        ring = sum(hol.q_density((ri * math.cos(t), ri * math.sin(t)), eps)
                   for t in np.linspace(0.0, 2.0 * math.pi, n_t, endpoint=False))
        total += wi * ri * ring * (2.0 * math.pi / n_t)
    assert abs(total - 1.0) < 1e-6


def test_q_outside_raises():
    with pytest.raises(OutOfDisk):
        hol.q_density((2e-4, 1e-8), 2e-4)


# --------------------------------------------------------------------------
# tube chart


def test_tube_measure_product_formula(chart, table):
    # independent route: tilt factor by finite differences of the lifted
    # curve, never through the chart's own tangent
    ss = np.linspace(0.0, chart.curve.length, 801)
    h = 1e-7
    cos_fd = []
    for s in ss:
        a = max(0.0, s - h)
        b = min(chart.curve.length, s + h)
        pa, pb = chart.point3(a), chart.point3(b)
        t3 = (pb - pa) / (b - a)
        t3 /= np.linalg.norm(t3)
        cos_fd.append(abs(float(np.dot(t3, chart.axis))))
    from scipy.integrate import simpson
    L = float(simpson(cos_fd, x=ss))
    want = L * math.pi * chart.eps ** 2 / leb_m(table)
    assert chart.mu_U() == pytest.approx(want, rel=1e-6)


class _StraightCurve:
    """Flow-line segment: the zero-curvature boundary case of a u-curve."""

    def __init__(self, table, origin, angle, length):
        self.table = table
        self.length = length
        self.good = True
        self.params = dict(PARAMS)
        self._o = np.asarray(origin, dtype=float)
        self._v = np.array([math.cos(angle), math.sin(angle), 0.0])
        self._xi = angle / (2.0 * math.pi)

    def point_at(self, s):
        p = self._o + s * self._v
        return dyn.PhasePoint(p[0] % 1.0, p[1] % 1.0, self._xi)

    def _tangent3(self, s):
        return tuple(self._v)

    def min_wall_distance(self, samples=160):
        return 0.2


class _StraightPair:
    def __init__(self, curve):
        self.curve = curve

    def density_at(self, s):
        return np.ones_like(np.asarray(s, dtype=float)) / self.curve.length


def test_straight_curve_tilt_free(table):
    curve = _StraightCurve(table, (0.52, 0.85, 0.0), 0.3, 0.004)
    chart = hol.build_tube(_StraightPair(curve), eps=1e-5)
    ss = np.linspace(0.0, curve.length, 33)
    assert all(abs(chart.cos_psi(float(s)) - 1.0) < 1e-12 for s in ss)
    # conditional density (1/L) cos psi collapses to the flat value
    L = curve.length
    assert chart.mu_U() == pytest.approx(
        L * math.pi * 1e-10 / leb_m(table), rel=1e-9)


def test_leaf_separation_half_shift(chart):
    rng = np.random.default_rng(3)
    ss = np.linspace(0.0, chart.curve.length, 120)
    for _ in range(12):
        za = chart.eps * (rng.random(2) - 0.5)
        zb = chart.eps * (rng.random(2) - 0.5)
        dz = np.hypot(*(za - zb))
        if dz < 1e-7:
            continue
        pa = np.array([[p.x, p.y, p.xi] for p in
                       (chart.leaf_point(float(s), *za) for s in ss)])
        pb = np.array([[p.x, p.y, p.xi] for p in
                       (chart.leaf_point(float(s), *zb) for s in ss)])
        d = pa[:, None, :] - pb[None, :, :]
        d -= np.round(d)
        dmin = float(np.sqrt((d * d).sum(axis=2)).min())
        assert dmin >= 0.5 * dz


def test_tube_rejects_bad_radius(pair):
    with pytest.raises(ValueError):
        hol.build_tube(pair, eps=0.0)
    fat = pair.curve.min_wall_distance() - PARAMS["eps0"] + 1e-4
    with pytest.raises(NotGoodCurve):
        hol.build_tube(pair, eps=fat)


# --------------------------------------------------------------------------
# center-stable radius


def test_grazing_margin_radius_small(table):
    rho = math.pi / 2.0 - 1e-4
    sct = table.scatterers[1]
    cp = dyn.CollisionPoint(1, 0.3 * sct.radius, rho)
    x = dyn.collision_to_phase(table, cp)
    assert hol.cs_radius(table, x) <= 1e-3


def test_abundance_scales_linearly(table):
    wall, q, rho = dyn.sample_nu(table, 2000, seed=5)
    rcs = np.array([
        hol.cs_radius(table, dyn.collision_to_phase(
            table, dyn.CollisionPoint(int(w), float(qq), float(rr))))
        for w, qq, rr in zip(wall, q, rho)])
    eps_grid = np.logspace(-3.0, -1.0, 7)
    frac = np.array([np.mean(rcs <= e) for e in eps_grid])
    assert np.all(frac > 0.0)
    slope = np.polyfit(np.log(eps_grid), np.log(frac), 1)[0]
    assert 0.7 <= slope <= 1.3


def test_stable_partner_orbit_decay(chart):
    # the matched partner shares the central-stable manifold: forward
    # map-distance must fall monotonically once transients clear
    table = chart.table
    res = hol.holonomy_point(chart, 0.0025, (0.0, 1e-5))
    x = chart.curve.point_at(0.0025)
    y = chart.leaf_point(res.sigma, 0.0, 1e-5)
    ca, _ = dyn.project_to_map(table, x)
    cb, _ = dyn.project_to_map(table, y)
    pers = 2.0 * math.pi * np.array([s.radius for s in table.scatterers])
    dists = []
    for _ in range(9):
        dq = ca.q - cb.q
        dq -= pers[ca.wall] * round(dq / pers[ca.wall])
        dists.append(math.hypot(dq, ca.rho - cb.rho))
        ca = dyn.billiard_map(table, ca).point
        cb = dyn.billiard_map(table, cb).point
    k = int(np.argmin(dists))
    start = min(3, k)
    for n in range(start, k):
        assert dists[n + 1] < dists[n]
    assert k >= 3  # contraction visible for at least three steps


# --------------------------------------------------------------------------
# holonomy point


def test_identity_leaf(chart):
    res = hol.holonomy_point(chart, 0.0025, (0.0, 0.0))
    assert abs(res.sigma - 0.0025) < 1e-12
    assert res.residual < 1e-12


def test_match_residual_and_leaf_membership(chart):
    rng = np.random.default_rng(8)
    for _ in range(6):
        s = float(rng.uniform(0.0017, 0.0033))
        ang = float(rng.uniform(0.0, 2.0 * math.pi))
        rad = float(chart.eps * rng.uniform(0.3, 1.0))
        z = (rad * math.cos(ang), rad * math.sin(ang))
        res = hol.holonomy_point(chart, s, z)
        assert res.residual < 1e-7
        assert 0.0 <= res.sigma <= chart.curve.length
        # chart round-trip: the matched point really sits on leaf z
        s2, w1, w2 = chart.decompose(chart.leaf_point(res.sigma, *z))
        assert abs(s2 - res.sigma) < 1e-10
        assert math.hypot(w1 - z[0], w2 - z[1]) < 1e-10


def test_match_contraction_rate(chart):
    res = hol.holonomy_point(chart, 0.0025, (0.0, 1e-5))
    d = res.dists
    k = int(np.argmin(d))
    assert k >= 3
    rho = max((d[n] / d[0]) ** (1.0 / n) for n in range(1, k + 1))
    assert rho < 0.75


def test_no_crossing_raised(chart, fan):
    # unattainably tight tolerance: no partner survives the full horizon
    with pytest.raises(NoCrossing):
        hol.holonomy_point(chart, 0.0025, (0.0, 1e-5), tol=1e-12)
    # singularity cores sever at least one match across the tube
    breaks, _ = fan
    severed = 0
    for b in breaks:
        if not 1e-4 < b.s_break < chart.curve.length - 1e-4:
            continue
        try:
            hol.holonomy_point(chart, b.s_break, (0.0, 1e-5))
        except NoCrossing:
            severed += 1
    assert severed >= 1


# --------------------------------------------------------------------------
# holonomy Jacobian


def test_jacobian_identity_shift(chart):
    assert hol.holonomy_jacobian(chart, 0.0022, (0.0, 0.0)) == 1.0


def test_jacobian_routes_agree(chart):
    shifts = ((0.0, 1e-5), (7e-6, -7e-6), (-1e-5, 0.0), (4e-6, 8e-6))
    for s in (0.0018, 0.0025, 0.0033):
        for z in shifts:
            jf = hol.holonomy_jacobian(chart, s, z, method="fd")
            jm = hol.holonomy_jacobian(chart, s, z, method="formula")
            assert jf == pytest.approx(jm, rel=0.02)


def _tilted_curve(table, wall, q0, r0, lift, slope, params):
    for half in (8e-4, 5.6e-4, 3.9e-4, 2.7e-4, 1.9e-4):
        du = np.linspace(-half, half, 9)
        nodes = [dyn.CollisionPoint(wall, q0 + u, r0 + slope * u) for u in du]
        try:
            return cv.make_ucurve(table, nodes, lift, params=params)
        except Exception:
            continue
    return None


def test_jacobian_deviation_regression(table, pair):
    # tilted curves through one lifted center: deviation grows like the
    # tilt angle, the leading term of the angle-plus-distance bound
    W1 = pair.curve
    sc = 0.5 * W1.length
    q0, r0 = W1.base_at(sc)
    lift = W1.lift_at(sc)
    t1 = np.array(W1._tangent3(sc))
    t1 /= np.linalg.norm(t1)
    x = W1.point_at(sc)
    samples = []
    for slope in (1.05, 1.15, 1.3, 1.6, 2.2, 3.5):
        W2 = _tilted_curve(table, W1.wall, q0, r0, lift, slope, PARAMS)
        if W2 is None:
            continue
        res = hol.stable_match(table, x, W2.point_at, 0.0, W2.length,
                               0.5 * W2.length, 0.5 * W2.length)
        if res is None:
            continue
        d = 3e-7
        hi = hol.stable_match(table, W1.point_at(sc + d), W2.point_at,
                              0.0, W2.length, res.sigma + d, 64 * d, n_start=2)
        lo = hol.stable_match(table, W1.point_at(sc - d), W2.point_at,
                              0.0, W2.length, res.sigma - d, 64 * d, n_start=2)
        if hi is None or lo is None:
            continue
        jac = (hi.sigma - lo.sigma) / (2.0 * d)
        t2 = np.array(W2._tangent3(res.sigma))
        t2 /= np.linalg.norm(t2)
        alpha = math.acos(min(1.0, abs(float(np.dot(t1, t2)))))
        p2 = W2.point_at(res.sigma)
        delta = math.sqrt((x.x - p2.x) ** 2 + (x.y - p2.y) ** 2
                          + (x.xi - p2.xi) ** 2)
        if abs(jac - 1.0) > 0.0:
            samples.append((alpha + delta ** (1.0 / 3.0), abs(jac - 1.0)))
    assert len(samples) >= 5
    xs = np.log([a for a, _ in samples])
    ys = np.log([j for _, j in samples])
    slope = np.polyfit(xs, ys, 1)[0]
    assert 0.7 <= slope <= 1.3


# --------------------------------------------------------------------------
# holonomy table invariants


def test_jacobians_within_frozen_bound(holo, hcal):
    rows = np.nonzero(holo.in_H)[0]
    jh = holo.jh[rows]
    assert np.all(jh <= hcal["C_h"])
    assert np.all(jh >= 1.0 / hcal["C_h"])


def test_jacobian_dynamical_regularity(chart, holo, hcal):
    # fresh pairs, distinct from the calibration ladder
    ell = chart.curve.length
    z = (0.0, -chart.eps)
    bases = [0.0019, 0.0028]
    deltas = [ell / 300.0, ell / 90.0, ell / 30.0, ell / 9.0, ell / 3.0]
    pts = []
    for s in bases:
        j0 = hol.holonomy_jacobian(chart, s, z)
        for d in deltas:
            j1 = hol.holonomy_jacobian(chart, s + d, z)
            sp = cv.separation_time(chart.curve, s, s + d)
            dj = abs(j1 - j0)
            if math.isfinite(sp) and dj > hcal["noise_floor"]:
                pts.append((sp, dj))
    assert len(pts) >= 4
    for sp, dj in pts:
        assert dj <= hcal["C_h"] * hcal["Theta_h"] ** sp
    slope = np.polyfit([p[0] for p in pts], np.log([p[1] for p in pts]), 1)[0]
    assert math.exp(slope) < 1.0


def _itinerary_split(table, xa, xb, n_max=14):
    """First step where two orbits land on different walls."""
    ca, _ = dyn.project_to_map(table, xa)
    cb, _ = dyn.project_to_map(table, xb)
    for n in range(n_max + 1):
        if ca.wall != cb.wall:
            return n
        try:
            ca = dyn.billiard_map(table, ca).point
            cb = dyn.billiard_map(table, cb).point
        except Exception:
            return n + 1
    return math.inf


def test_separation_time_preserved(chart, holo):
    table = chart.table
    rng = np.random.default_rng(12)
    z = (3e-6, -6e-6)
    done = 0
    for _ in range(24):
        a, b = sorted(rng.uniform(0.0016, 0.0034, 2))
        if b - a < 1e-4:
            continue
        xa, xb = chart.curve.point_at(a), chart.curve.point_at(b)
        sp = _itinerary_split(table, xa, xb)
        if not math.isfinite(sp):
            continue
        ya = chart.leaf_point(holo.sigma_at(a, *z), *z)
        yb = chart.leaf_point(holo.sigma_at(b, *z), *z)
        assert _itinerary_split(table, ya, yb) == sp
        done += 1
    assert done >= 6


def _tube_mc(chart, holo, n, seed):
    """Uniform tube samples: leaf arc position, shift, tilt weight, base."""
    rng = np.random.default_rng(seed)
    ell = chart.curve.length
    sig = rng.uniform(0.0, ell, n)
    rad = chart.eps * np.sqrt(rng.uniform(0.0, 1.0, n))
    ang = rng.uniform(0.0, 2.0 * math.pi, n)
    z1, z2 = rad * np.cos(ang), rad * np.sin(ang)
    base = np.array([holo.sigma_inverse(sig[i], z1[i], z2[i])
                     for i in range(n)])
    cosw = np.array([chart.cos_psi(float(t)) for t in sig])
    return sig, z1, z2, cosw, base


def test_beta_formula_matches_binned(chart, holo, hcal, table):
    (a0, b0), = holo.H_intervals
    n = 60000
    sig, z1, z2, cosw, base = _tube_mc(chart, holo, n, seed=21)
    vol = chart.curve.length * math.pi * chart.eps ** 2
    edges = np.linspace(a0 + 0.1 * (b0 - a0), b0 - 0.1 * (b0 - a0), 6)
    for lo, hi in zip(edges[:-1], edges[1:]):
        inside = (base >= lo) & (base <= hi)
        gamma = float(cosw[inside].sum()) / n * vol / leb_m(table)
        binned = gamma / (hi - lo)
        formula = hol.beta_formula(chart, holo, 0.5 * (lo + hi))
        assert binned == pytest.approx(formula, rel=0.05)
        assert chart.eps ** 2 / hcal["C_beta"] <= formula
        assert formula <= hcal["C_beta"] * chart.eps ** 2


def test_product_measure_smallness(chart, holo, hcal, table):
    (a0, b0), = holo.H_intervals
    n = 60000
    sig, z1, z2, cosw, base = _tube_mc(chart, holo, n, seed=22)
    vol = chart.curve.length * math.pi * chart.eps ** 2
    rng = np.random.default_rng(23)
    for _ in range(8):
        lo, hi = np.sort(rng.uniform(a0, b0, 2))
        if hi - lo < 0.05 * (b0 - a0):
            continue
        inside = (base >= lo) & (base <= hi)
        gamma = float(cosw[inside].sum()) / n * vol / leb_m(table)
        assert gamma <= hcal["C_beta"] * chart.eps ** 2 * (hi - lo)


def test_leakage_scales_cubically(pair, chart, holo, hcal):
    charts = [(chart, holo)]
    for e in (5e-6, 2.5e-6, 1.25e-6):
        ch = hol.build_tube(pair, eps=e)
        charts.append((ch, hol.build_holonomy_table(ch, n_s=8)))
    eps_v = np.array([c.eps for c, _ in charts])
    leak = np.array([hol.tube_leakage(c, h) for c, h in charts])
    assert np.all(leak > 0.0)
    slope = np.polyfit(np.log(eps_v), np.log(leak), 1)[0]
    assert 2.6 <= slope <= 3.4
    assert leak[0] <= hcal["C_leak"] * chart.eps ** 3


def test_workers_identical(chart):
    one = hol.build_holonomy_table(chart, n_s=4, workers=1)
    two = hol.build_holonomy_table(chart, n_s=4, workers=3)
    assert np.array_equal(one.sigma, two.sigma)
    assert np.array_equal(one.jh, two.jh)
    assert np.array_equal(one.residual, two.residual)
    assert one.H_intervals == two.H_intervals


def test_diagnostics_csv_deterministic(tmp_path, holo, chart, fan):
    h1 = hol.build_H1(chart, holo, c=1e-4, n_depth=6, fan=fan)
    p1 = tmp_path / "a.csv"
    p2 = tmp_path / "b.csv"
    hol.dump_diagnostics(holo, p1, h1=h1)
    hol.dump_diagnostics(holo, p2, h1=h1)
    b1 = p1.read_bytes()
    assert b1 == p2.read_bytes()
    lines = b1.decode().splitlines()
    assert lines[0] == "s,z1,z2,sigma,jh,residual,r_cs,in_H,in_H1"
    assert len(lines) == 1 + len(holo.s_grid) * len(holo.stencil)
    row = lines[1].split(",")
    assert float(row[0]) == holo.s_grid[0]
    assert float(row[4]) == holo.jh[0, 0]


# --------------------------------------------------------------------------
# leafwise product density


def test_g0_boundary_zero(chart, holo, pair):
    s = 0.0025
    for ang in (0.1, 2.0, 4.4):
        z = (chart.eps * math.cos(ang), chart.eps * math.sin(ang))
        sig = holo.sigma_at(s, *z)
        r = chart.leaf_point(sig, *z)
        assert hol.G0_eval(chart, holo, pair, r) == 0.0


def test_g0_outside_raises(chart, holo, pair, table):
    p = dyn.PhasePoint(0.9, 0.9, 0.77)
    with pytest.raises(NotInProduct):
        hol.G0_eval(chart, holo, pair, p)


def test_g0_center_substitution(chart, holo, pair, table):
    # z=0 leaf: Jh is exactly one, so the value is the flat product
    for s in (0.002, 0.0025, 0.003):
        r = chart.leaf_point(s, 0.0, 0.0)
        want = (leb_m(table) * float(pair.density_at(s))
                * 3.0 / (math.pi * chart.eps ** 2) / chart.cos_psi(s))
        assert hol.G0_eval(chart, holo, pair, r) == pytest.approx(want, rel=1e-9)


class _IdentityTable:
    """Duck-typed holonomy table of the flat tube: every leaf is the base."""

    def sigma_at(self, s, z1, z2):
        return float(s)

    def sigma_inverse(self, sigma, z1, z2):
        return float(sigma)

    def jh_at(self, s, z1, z2):
        return 1.0

    def h_contains(self, s):
        return True


def test_g0_straight_chart_flat_value(table):
    curve = _StraightCurve(table, (0.52, 0.85, 0.0), 0.3, 0.004)
    spair = _StraightPair(curve)
    chart = hol.build_tube(spair, eps=1e-5)
    ident = _IdentityTable()
    r = chart.leaf_point(0.002, 2e-6, -3e-6)
    got = hol.G0_eval(chart, ident, spair, r)
    q = hol.q_density((2e-6, -3e-6), 1e-5)
    want = leb_m(table) * (1.0 / curve.length) * q
    assert got == pytest.approx(want, rel=1e-9)


def test_g0_pushforward_identity(chart, holo, pair, table):
    # integrating f against the product density over A * D must return
    # the curve integral of f phi over A
    rng = np.random.default_rng(31)
    (a0, b0), = holo.H_intervals
    n = 4000
    sig, z1, z2, cosw, base = _tube_mc(chart, holo, n, seed=32)
    vol = chart.curve.length * math.pi * chart.eps ** 2
    obs = [
        lambda x, y, xi: 1.0 + 0.0 * x,
        lambda x, y, xi: np.sin(2.0 * math.pi * x) + 0.3,
        lambda x, y, xi: np.cos(2.0 * math.pi * (y + xi)),
        lambda x, y, xi: x * 0.0 + np.sin(4.0 * math.pi * xi),
        lambda x, y, xi: np.cos(2.0 * math.pi * x) * np.sin(2.0 * math.pi * y),
    ]
    for k, f in enumerate(obs):
        lo, hi = sorted(rng.uniform(a0, b0, 2))
        while hi - lo < 0.2 * (b0 - a0):
            lo, hi = sorted(rng.uniform(a0, b0, 2))
        inside = (base >= lo) & (base <= hi)
        terms = np.zeros(n)
        for i in np.nonzero(inside)[0]:
            r = chart.leaf_point(float(sig[i]), float(z1[i]), float(z2[i]))
            bp = chart.curve.point_at(float(base[i]))
            g0 = hol.G0_eval(chart, holo, pair, r)
            terms[i] = float(f(bp.x, bp.y, bp.xi)) * g0 * cosw[i]
        lhs = float(terms.sum()) / n * vol / leb_m(table)
        se = float(terms.std(ddof=1)) / math.sqrt(n) * vol / leb_m(table)
        sub, wt = cv.restrict_pair(pair, float(lo), float(hi))
        rhs = wt * cv.line_integral(sub, f, 0.0)
        assert abs(lhs - rhs) <= 3.0 * se + 1e-4 * abs(rhs)


# --------------------------------------------------------------------------
# singularity cut-out


def test_h1_removed_mass_sqrt_scaling(chart, holo, fan):
    cs = np.logspace(-4.0, -2.0, 9)
    removed, budget = [], []
    for c in cs:
        h1 = hol.build_H1(chart, holo, c=float(c), n_depth=6, fan=fan)
        removed.append(h1.removed)
        budget.append(h1.budget)
        assert h1.removed <= h1.budget * (1.0 + 1e-9)
    s_rem = np.polyfit(np.log(cs), np.log(removed), 1)[0]
    s_bud = np.polyfit(np.log(cs), np.log(budget), 1)[0]
    assert 0.3 <= s_rem <= 0.7
    assert abs(s_bud - 0.5) < 0.05


def test_h1_pairs_separated(chart, holo, fan):
    c = 1e-4
    h1 = hol.build_H1(chart, holo, c=c, n_depth=6, fan=fan)
    rng = np.random.default_rng(41)
    checked = 0
    for _ in range(120):
        i = rng.integers(0, len(h1.intervals))
        a, b = h1.intervals[i]
        j = rng.integers(0, len(h1.intervals))
        p, q = h1.intervals[j]
        sa = float(rng.uniform(a, b))
        sb = float(rng.uniform(p, q))
        if abs(sb - sa) < 1e-9:
            continue
        sp = cv.separation_time(chart.curve, sa, sb, n_max=12,
                                include_layers=True)
        if not math.isfinite(sp):
            continue
        assert abs(sb - sa) >= c * h1.theta ** sp
        checked += 1
    assert checked >= 20


def test_h1_limit_recovers_h(chart, holo, fan):
    h1 = hol.build_H1(chart, holo, c=1e-12, n_depth=6, fan=fan)
    assert h1.removed < 1e-8
    want = sum(b - a for a, b in holo.H_intervals)
    got = sum(b - a for a, b in h1.intervals)
    assert got == pytest.approx(want, abs=1e-8)


def test_h1_theta_precondition(chart, holo):
    with pytest.raises(ValueError):
        hol.build_H1(chart, holo, c=1e-6, theta=0.9)


# --------------------------------------------------------------------------
# global approximating density


def test_g_total_mass(gdens, hcal):
    est, se = hol.density_mass(gdens, rng=77)
    bound = hcal["C_mass"] * hcal["eps"] * hcal["sup_phi"]
    assert abs(est - 1.0) <= bound + 3.0 * se


def test_g_equals_g0_on_core(chart, holo, pair, gdens):
    rng = np.random.default_rng(51)
    segs = gdens.h1.intervals
    lens = np.array([b - a for a, b in segs])
    cum = np.cumsum(lens)
    n = 0
    for _ in range(20000):
        if n >= 1000:
            break
        u = rng.random() * cum[-1]
        i = min(int(np.searchsorted(cum, u)), len(segs) - 1)
        s = float(rng.uniform(*segs[i]))
        ang = float(rng.uniform(0.0, 2.0 * math.pi))
        rad = float(chart.eps * math.sqrt(rng.random()) * 0.98)
        z1, z2 = rad * math.cos(ang), rad * math.sin(ang)
        sig = holo.sigma_at(s, z1, z2)
        if not 0.0 <= sig <= chart.curve.length:
            continue
        r = chart.leaf_point(sig, z1, z2)
        got = gdens(r)
        if got == 0.0:
            # boundary effects of the interpolated inverse; skip rim hits
            continue
        assert got == hol.G0_eval(chart, holo, pair, r)
        n += 1
    assert n == 1000


def test_g_certificate_zero_violations(chart, gdens):
    rng = np.random.default_rng(52)
    pts = []
    ell = chart.curve.length
    for _ in range(400):
        s = float(rng.uniform(0.0, ell))
        ang = float(rng.uniform(0.0, 2.0 * math.pi))
        rad = float(chart.eps * 1.6 * math.sqrt(rng.random()))
        p3 = (chart.point3(s) + rad * math.cos(ang) * chart.e1
              + rad * math.sin(ang) * chart.e2)
        pts.append(dyn.PhasePoint(p3[0] % 1.0, p3[1] % 1.0, p3[2] % 1.0))
    vals = np.array([gdens(p) for p in pts])
    xyz = np.array([[p.x, p.y, p.xi] for p in pts])
    idx = rng.integers(0, len(pts), size=(10000, 2))
    bad = 0
    for i, j in idx:
        if i == j:
            continue
        d = nm.torus_dist3(xyz[i], xyz[j])
        if d < 1e-12:
            continue
        if abs(vals[i] - vals[j]) > gdens.C_cert * d ** gdens.alpha_cert:
            bad += 1
    assert bad == 0


def test_g_infeasible_certificate(chart, holo, pair):
    with pytest.raises(InfeasibleExtension):
        hol.build_G(chart, holo, pair, margin=0.0)


# --------------------------------------------------------------------------
# oscillation comparison under the flow


def _osc_stencil(F, xs, ys, xis, radius, n_dir=32):
    """Lower estimate of the ball oscillation by direction sampling."""
    rng = np.random.default_rng(9)
    dirs = rng.standard_normal((n_dir, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    vals = [F(xs, ys, xis)]
    for d in dirs:
        vals.append(F(xs + radius * d[0], ys + radius * d[1],
                      xis + radius * d[2]))
    stack = np.stack(vals)
    return stack.max(axis=0) - stack.min(axis=0)


def test_oscillation_comparison(chart, holo, pair, table):
    c_pi = cal.load_calibration()["projection"]["C_pi"]
    radius = c_pi * chart.eps
    (a0, b0), = holo.H_intervals
    n = 2500
    sig, z1, z2, cosw, base = _tube_mc(chart, holo, n, seed=61)
    vol = chart.curve.length * math.pi * chart.eps ** 2
    scale = vol / leb_m(table)
    lo, hi = a0 + 0.05 * (b0 - a0), b0 - 0.05 * (b0 - a0)
    idx = np.nonzero((base >= lo) & (base <= hi))[0]
    pts = [chart.leaf_point(float(sig[i]), float(z1[i]), float(z2[i]))
           for i in idx]
    g0 = np.array([hol.G0_eval(chart, holo, pair, p) for p in pts])
    px = np.array([p.x for p in pts])
    py = np.array([p.y for p in pts])
    pxi = np.array([p.xi for p in pts])
    sub, wt = cv.restrict_pair(pair, float(lo), float(hi))
    obs = [
        lambda x, y, xi: np.sin(2.0 * math.pi * x) + 0.4,
        lambda x, y, xi: np.cos(2.0 * math.pi * (x + y)),
        lambda x, y, xi: np.sin(2.0 * math.pi * xi) * np.cos(2.0 * math.pi * y),
        lambda x, y, xi: 0.5 * np.sin(4.0 * math.pi * y)
                         + 0.1 * np.cos(2.0 * math.pi * x),
    ]
    for F in obs:
        for t in (0.25, 0.6, 1.0):
            fx, fy, fxi, alive = dyn.batch_flow(table, px, py, pxi, t)
            ok = np.asarray(alive, dtype=bool)
            assert ok.all()
            terms = np.zeros(n)
            terms[idx] = F(fx, fy, fxi) * g0 * cosw[idx]
            lhs_tube = terms.sum() / n * scale
            se_tube = terms.std(ddof=1) / math.sqrt(n) * scale
            rhs_line = wt * cv.line_integral(sub, F, t)
            oterms = np.zeros(n)
            oterms[idx] = _osc_stencil(F, fx, fy, fxi, radius) * g0 * cosw[idx]
            rhs_osc = oterms.sum() / n * scale
            se_osc = oterms.std(ddof=1) / math.sqrt(n) * scale
            gap = abs(lhs_tube - rhs_line)
            assert gap <= rhs_osc + 3.0 * (se_tube + se_osc) + 1e-3
