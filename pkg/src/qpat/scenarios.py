"""Built-in coefficient scenarios with analytic formulas.

Coordinates are normalized by the domain: with c the bounding-box center
and R half the bounding-box diagonal, let z = (x - c)/R. The scenarios are

  constant:       D = 1,                                sigma_a = 0.2
  gaussian-bump:  D = 1 + 0.3 exp(-5 |z - p1|^2),       p1 = (-0.15, 0.10)
                  sigma_a = 0.1 + 0.1 exp(-6 |z - p2|^2), p2 = (0.20, -0.15)
  two-inclusion:  D = 1 + 0.25 exp(-18 |z - a|^2) + 0.20 exp(-22 |z - b|^2)
                  sigma_a = 0.1 + 0.15 exp(-20 |z - c2|^2) + 0.10 exp(-25 |z - d|^2)
                  a = (0.35, 0.20), b = (-0.30, -0.25),
                  c2 = (-0.25, 0.30), d = (0.30, -0.30)

The Grueneisen factor is 1 in all scenarios. All formulas are smooth, so
reference derivatives for tests can be recomputed symbolically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Scenario:
    name: str
    D_fn: object
    sigma_fn: object
    G_fn: object


def _norm_coords(domain):
    bx0, bx1, by0, by1 = domain.bbox
    cx, cy = 0.5 * (bx0 + bx1), 0.5 * (by0 + by1)
    R = 0.5 * np.hypot(bx1 - bx0, by1 - by0)

    def z(pts):
        p = np.asarray(pts, dtype=float)
        return (p[..., 0] - cx) / R, (p[..., 1] - cy) / R

    return z


def _bump(z, center, amp, rate):
    def fn(pts):
        zx, zy = z(pts)
        return amp * np.exp(-rate * ((zx - center[0]) ** 2 + (zy - center[1]) ** 2))
    return fn


def get_scenario(name: str, domain) -> Scenario:
    z = _norm_coords(domain)
    one = lambda pts: np.ones(np.asarray(pts, dtype=float).shape[:-1])

    if name == "constant":
        return Scenario(name, lambda p: 1.0 + 0.0 * one(p),
                        lambda p: 0.2 * one(p), one)
    if name == "gaussian-bump":
        b1 = _bump(z, (-0.15, 0.10), 0.3, 5.0)
        b2 = _bump(z, (0.20, -0.15), 0.1, 6.0)
        return Scenario(name, lambda p: 1.0 + b1(p), lambda p: 0.1 + b2(p), one)
    if name == "two-inclusion":
        d1 = _bump(z, (0.35, 0.20), 0.25, 18.0)
        d2 = _bump(z, (-0.30, -0.25), 0.20, 22.0)
        s1 = _bump(z, (-0.25, 0.30), 0.15, 20.0)
        s2 = _bump(z, (0.30, -0.30), 0.10, 25.0)
        return Scenario(name,
                        lambda p: 1.0 + d1(p) + d2(p),
                        lambda p: 0.1 + s1(p) + s2(p), one)
    raise ConfigError(f"unknown scenario {name!r} "
                      "(available: constant, gaussian-bump, two-inclusion)")
