"""Small geometry helpers on the unit two- and three-torus.

Scalars are plain floats (fast in tight loops); array variants used by the
batch engine live next to their callers and just call numpy directly.
"""

import math


def wrap01(u):
    """Map a real number to [0, 1)."""
    v = u - math.floor(u)
    # floor can round u up to an integer for u slightly below it
    return v if v < 1.0 else 0.0


def wrap_half(u):
    """Map a real number to [-1/2, 1/2) (minimal torus displacement)."""
    return u - math.floor(u + 0.5)


def min_image(dx, dy):
    """Minimal-image displacement vector on the unit torus."""
    return wrap_half(dx), wrap_half(dy)


def torus_dist2(ax, ay, bx, by):
    dx, dy = min_image(bx - ax, by - ay)
    return dx * dx + dy * dy


def torus_dist(ax, ay, bx, by):
    return math.sqrt(torus_dist2(ax, ay, bx, by))


def angle_dist(a, b):
    """Distance of two angle coordinates in R/Z."""
    return abs(wrap_half(a - b))


def phase_dist(p, q):
    """Product metric on the 3-torus for (x, y, xi) triples."""
    dx, dy = min_image(q[0] - p[0], q[1] - p[1])
    da = wrap_half(q[2] - p[2])
    return math.sqrt(dx * dx + dy * dy + da * da)


def unit(angle_rad):
    return math.cos(angle_rad), math.sin(angle_rad)


def dot(ax, ay, bx, by):
    return ax * bx + ay * by


def cross(ax, ay, bx, by):
    return ax * by - ay * bx
