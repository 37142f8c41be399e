"""Billiard tables on the unit two-torus: disjoint circular scatterers.

The table is the closure of the torus minus the open disks.  All geometry
uses the minimal-image convention.  Corridor (infinite horizon) detection
projects disk shadows onto the axis perpendicular to each primitive lattice
direction; a direction admits a corridor iff the shadows leave a gap.
"""

import json
import math
from dataclasses import dataclass, field

from .errors import DisconnectedError, NotOnBoundary, OverlapError
from .torus import min_image, torus_dist, wrap01


@dataclass(frozen=True)
class Scatterer:
    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0.0:
            raise OverlapError("scatterer radius must be positive")
        if not 2.0 * self.radius < 1.0:
            raise OverlapError(
                "scatterer diameter %.6g does not fit in a unit cell" % (2 * self.radius)
            )

    @property
    def center(self):
        return (self.cx, self.cy)

    @property
    def perimeter(self):
        return 2.0 * math.pi * self.radius

    @property
    def curvature(self):
        return 1.0 / self.radius


@dataclass
class Table:
    scatterers: list

    # derived, filled by build_table
    total_perimeter: float = 0.0
    area: float = 0.0

    def wall(self, i):
        return self.scatterers[i]

    @property
    def n_walls(self):
        return len(self.scatterers)

    def distance_to_walls(self, x, y):
        """Signed clearance: distance from (x,y) to the nearest disk edge.

        Positive outside every disk (inside Q), negative inside a disk.
        """
        best = math.inf
        for s in self.scatterers:
            d = torus_dist(x, y, s.cx, s.cy) - s.radius
            if d < best:
                best = d
        return best

    def contains(self, x, y):
        return self.distance_to_walls(x, y) >= 0.0

    def boundary_point(self, wall, q):
        """Position of the arc-length coordinate q on a wall (ccw)."""
        s = self.scatterers[wall]
        th = q / s.radius
        return (wrap01(s.cx + s.radius * math.cos(th)), wrap01(s.cy + s.radius * math.sin(th)))

    def boundary_normal(self, wall, q):
        """Outward normal of the scatterer (pointing into Q)."""
        s = self.scatterers[wall]
        th = q / s.radius
        return (math.cos(th), math.sin(th))

    def to_spec(self):
        return {
            "scatterers": [
                {"center": [s.cx, s.cy], "radius": s.radius} for s in self.scatterers
            ]
        }

    def to_json(self):
        return json.dumps(self.to_spec(), sort_keys=True)


def build_table(spec, connectivity_grid=256):
    """Validate a table spec and return a Table.

    spec: either a dict {"scatterers": [{"center": [x,y], "radius": r}, ...]}
    or an iterable of (cx, cy, r) triples.  Raises OverlapError for disks that
    touch or overlap under the torus metric, DisconnectedError when the
    complement Q is not connected (checked by flood fill on a grid).
    """
    if isinstance(spec, dict):
        items = [(d["center"][0], d["center"][1], d["radius"]) for d in spec["scatterers"]]
    else:
        items = [tuple(t) for t in spec]
    if not items:
        raise OverlapError("table needs at least one scatterer")

    scatterers = [Scatterer(wrap01(cx), wrap01(cy), float(r)) for cx, cy, r in items]

    n = len(scatterers)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = scatterers[i], scatterers[j]
            gap = torus_dist(a.cx, a.cy, b.cx, b.cy) - a.radius - b.radius
            if gap <= 0.0:
                raise OverlapError(
                    "scatterers %d and %d overlap (gap %.6g)" % (i, j, gap)
                )

    table = Table(scatterers=scatterers)
    table.total_perimeter = sum(s.perimeter for s in scatterers)
    table.area = 1.0 - sum(math.pi * s.radius ** 2 for s in scatterers)
    if table.area <= 0.0:
        raise OverlapError("scatterers cover the whole torus")

    _check_connected(table, connectivity_grid)
    return table


def _check_connected(table, n):
    """Flood fill over cell centers; Q must be one component."""
    import numpy as np

    xs = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    free = np.ones((n, n), dtype=bool)
    for s in table.scatterers:
        dx = gx - s.cx
        dy = gy - s.cy
        dx -= np.round(dx)
        dy -= np.round(dy)
        free &= dx * dx + dy * dy > s.radius ** 2
    if not free.any():
        raise DisconnectedError("no free cells at grid resolution %d" % n)

    # BFS with periodic wrap
    seen = np.zeros_like(free)
    si, sj = np.argwhere(free)[0]
    stack = [(int(si), int(sj))]
    seen[si, sj] = True
    while stack:
        i, j = stack.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = (i + di) % n, (j + dj) % n
            if free[a, b] and not seen[a, b]:
                seen[a, b] = True
                stack.append((a, b))
    if (free & ~seen).any():
        raise DisconnectedError("free region is not connected at grid resolution %d" % n)


def normal_at(table, x, y, tol=1e-10):
    """Outward unit normal at a boundary point; NotOnBoundary if off-wall.

    Returns (wall_index, (nx, ny)).
    """
    for i, s in enumerate(table.scatterers):
        dx, dy = min_image(x - s.cx, y - s.cy)
        d = math.hypot(dx, dy)
        if abs(d - s.radius) <= tol:
            return i, (dx / d, dy / d)
    raise NotOnBoundary("point (%.12g, %.12g) is not on any wall" % (x, y))


def collision_coords(table, x, y, tol=1e-9):
    """Map a boundary position to (wall, arc length q)."""
    for i, s in enumerate(table.scatterers):
        dx, dy = min_image(x - s.cx, y - s.cy)
        d = math.hypot(dx, dy)
        if abs(d - s.radius) <= tol:
            th = math.atan2(dy, dx) % (2.0 * math.pi)
            return i, s.radius * th
    raise NotOnBoundary("point (%.12g, %.12g) is not on any wall" % (x, y))


@dataclass
class FiniteHorizonReport:
    n_max: int
    directions: list = field(default_factory=list)  # dicts per primitive direction
    has_corridor: bool = False

    def worst(self):
        open_dirs = [d for d in self.directions if d["gap"] > 0.0]
        if not open_dirs:
            return None
        return max(open_dirs, key=lambda d: d["gap"])

    def to_dict(self):
        return {
            "n_max": self.n_max,
            "has_corridor": self.has_corridor,
            "directions": self.directions,
        }


def _primitive_directions(n_max):
    out = [(0, 1), (1, 0)]
    for p in range(1, n_max + 1):
        for q in range(-n_max, n_max + 1):
            if q == 0 and p != 1:
                continue
            if p == 1 and q == 0:
                continue
            if math.gcd(p, abs(q)) != 1:
                continue
            out.append((p, q))
    return out


def check_finite_horizon(table, n_max=20):
    """Shadow-projection corridor check over primitive directions.

    For direction (p,q) the lattice of scatterer images projects, on the
    perpendicular axis, to a periodic family with period 1/sqrt(p^2+q^2);
    each disk contributes an interval of half-width r.  A positive gap in
    the union is exactly a corridor of that width.
    """
    report = FiniteHorizonReport(n_max=n_max)
    for (p, q) in _primitive_directions(n_max):
        norm = math.hypot(p, q)
        period = 1.0 / norm
        nx, ny = -q / norm, p / norm
        intervals = []
        full = False
        for s in table.scatterers:
            if 2.0 * s.radius >= period:
                full = True
                break
            c = (s.cx * nx + s.cy * ny) % period
            intervals.append((c - s.radius, c + s.radius))
        if full:
            gap = 0.0
        else:
            gap = _max_gap_mod(intervals, period)
        report.directions.append({"p": p, "q": q, "period": period, "gap": gap})
        if gap > 0.0:
            report.has_corridor = True
    return report


def _max_gap_mod(intervals, period):
    """Largest uncovered arc of a circle of circumference `period`."""
    # normalize each start into [0, period), split the piece at the wrap
    pieces = []
    for a, b in intervals:
        width = b - a
        a %= period
        b = a + width
        if b <= period:
            pieces.append((a, b))
        else:
            pieces.append((a, period))
            pieces.append((0.0, b - period))
    if not pieces:
        return period
    pieces.sort()
    merged = [list(pieces[0])]
    for a, b in pieces[1:]:
        if a <= merged[-1][1] + 1e-15:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    if len(merged) == 1 and merged[0][0] <= 1e-15 and merged[0][1] >= period - 1e-15:
        return 0.0
    # gaps between merged pieces, plus the wrap-around gap
    gaps = []
    for i in range(len(merged) - 1):
        gaps.append(merged[i + 1][0] - merged[i][1])
    gaps.append(merged[0][0] + period - merged[-1][1])
    g = max(gaps)
    return g if g > 1e-15 else 0.0


@dataclass
class TableRegularity:
    """Geometric regularity data; each entry tagged exact or estimated."""

    values: dict
    tags: dict

    def __getitem__(self, key):
        return self.values[key]


def regularity(table, n_rays=100_000, seed=7, complexity_samples=200):
    """Curvature/area data exact for circles; flight-time bounds sampled.

    tau bounds come from n_rays random boundary launches; the per-step
    complexity bound is the largest number of continuity pieces seen while
    scanning the outgoing angle at sampled collision points.
    """
    from . import dynamics  # deferred: dynamics imports table

    rmin = min(s.radius for s in table.scatterers)
    rmax = max(s.radius for s in table.scatterers)
    values = {
        "kappa_min": 1.0 / rmax,
        "kappa_max": 1.0 / rmin,
        "kappa_prime_max": 0.0,
        "area_min": table.area,
        "area_max": table.area,
        "perimeter": table.total_perimeter,
    }
    tags = {k: "exact" for k in values}

    taus = dynamics.sample_flight_times(table, n_rays, seed=seed)
    values["tau_min"] = float(taus.min())
    values["tau_max"] = float(taus.max())
    values["tau_mean"] = float(taus.mean())
    tags.update(tau_min="estimated", tau_max="estimated", tau_mean="estimated")

    values["complexity_max"] = dynamics.estimate_complexity(
        table, complexity_samples, seed=seed + 1
    )
    tags["complexity_max"] = "estimated"

    values["diameter"] = _estimate_diameter(table)
    tags["diameter"] = "estimated"
    return TableRegularity(values=values, tags=tags)


def _estimate_diameter(table, n=64):
    best = 0.0
    pts = []
    for i in range(n):
        for j in range(n):
            x, y = (i + 0.5) / n, (j + 0.5) / n
            if table.distance_to_walls(x, y) > 0:
                pts.append((x, y))
    step = max(1, len(pts) // 400)
    sub = pts[::step]
    for i in range(len(sub)):
        for j in range(i + 1, len(sub)):
            d = torus_dist(sub[i][0], sub[i][1], sub[j][0], sub[j][1])
            if d > best:
                best = d
    return best


def deep_point(table, grid=200, refine=25):
    """A point of Q far from every wall (pocket center) and its clearance."""
    best = (-1.0, 0.0, 0.0)
    for i in range(grid):
        for j in range(grid):
            x, y = (i + 0.5) / grid, (j + 0.5) / grid
            d = table.distance_to_walls(x, y)
            if d > best[0]:
                best = (d, x, y)
    d0, x0, y0 = best
    h = 1.0 / grid
    for _ in range(refine):
        improved = False
        for dx in (-h, 0.0, h):
            for dy in (-h, 0.0, h):
                x, y = wrap01(x0 + dx), wrap01(y0 + dy)
                d = table.distance_to_walls(x, y)
                if d > d0:
                    d0, x0, y0, improved = d, x, y, True
        if not improved:
            h *= 0.5
    return (x0, y0), d0


def default_table():
    """The frozen three-disk finite-horizon table shipped with the package."""
    import importlib.resources as res

    with res.files("billiardlab").joinpath("config/default_table.json").open() as fh:
        spec = json.load(fh)
    return build_table(spec)
