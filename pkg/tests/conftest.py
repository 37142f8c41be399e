import math

import numpy as np
import pytest

import billiardlab as bl


@pytest.fixture(scope="session")
def table():
    return bl.default_table()


@pytest.fixture(scope="session")
def one_disk():
    # single centered disk, the hand-checkable geometry
    return bl.build_table([(0.5, 0.5, 0.15)])


def ray_march_flight(tab, x, y, vx, vy, bound=5.0, step=1e-5):
    """Independent flight-time oracle: march until clearance goes negative,
    then bisect the clearance along the ray.  Never calls the solver."""

    def clearance(t):
        px, py = x + t * vx, y + t * vy
        best = math.inf
        for s in tab.scatterers:
            dx = px - s.cx
            dy = py - s.cy
            dx -= round(dx)
            dy -= round(dy)
            best = min(best, math.hypot(dx, dy) - s.radius)
        return best

    ts = np.arange(step, bound, step)
    pxs = x + ts * vx
    pys = y + ts * vy
    best = np.full(ts.shape, np.inf)
    for s in tab.scatterers:
        dx = pxs - s.cx
        dy = pys - s.cy
        dx -= np.round(dx)
        dy -= np.round(dy)
        best = np.minimum(best, np.hypot(dx, dy) - s.radius)
    inside = np.nonzero(best < 0.0)[0]
    if inside.size == 0:
        return None
    hi = ts[inside[0]]
    lo = hi - step
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if clearance(mid) < 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)
