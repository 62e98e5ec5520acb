"""Computational domain, grid, boundary geometry and partial-data partitions.

The boundary is sampled as the polyline of grid-line / boundary-curve
intersections ("crossings"), ordered by arc length. Normals come from the
analytic shape, never from the raster mask. The same crossing set serves
as the Dirichlet node set of the elliptic solvers, so boundary samples and
solver boundary conditions live at identical points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .errors import (
    ConfigError,
    EmptyRegionError,
    InvalidDomainError,
    PolePlacementError,
)

_TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# domain shapes
# ---------------------------------------------------------------------------

class DomainSpec:
    """Bounded connected 2D domain with piecewise-C2 boundary.

    Implementations provide a signed distance (negative inside), an arc
    length parameterization of the boundary and analytic outward normals.
    For shapes without a closed-form distance the signed distance may be
    approximate in magnitude but is exact in sign and zero set.
    """

    def signed_distance(self, pts):
        raise NotImplementedError

    def contains(self, pts):
        return self.signed_distance(pts) < 0.0

    @property
    def perimeter(self):
        raise NotImplementedError

    @property
    def diameter(self):
        x0, x1, y0, y1 = self.bbox
        return math.hypot(x1 - x0, y1 - y0)

    @property
    def bbox(self):
        raise NotImplementedError

    def boundary_point(self, s):
        raise NotImplementedError

    def normal_at(self, s):
        raise NotImplementedError

    def boundary_param(self, pts):
        """Arc-length coordinate of points lying on (or very near) the boundary."""
        raise NotImplementedError

    def to_json(self):
        raise NotImplementedError

    @staticmethod
    def from_json(obj) -> "DomainSpec":
        shape = obj.get("shape")
        if shape == "unit_disc":
            return Disc(tuple(obj["center"]), float(obj["radius"]))
        if shape == "rectangle":
            return Rectangle(*(float(obj[k]) for k in ("x_min", "x_max", "y_min", "y_max")))
        if shape == "superellipse":
            return Superellipse(tuple(obj["center"]), tuple(obj["semi_axes"]),
                                float(obj["exponent"]))
        raise ConfigError(f"unknown domain shape {shape!r}")


@dataclass(frozen=True)
class Disc(DomainSpec):
    center: tuple = (0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if not (self.radius > 0.0 and np.isfinite(self.radius)):
            raise InvalidDomainError(f"disc radius must be positive, got {self.radius}")

    def signed_distance(self, pts):
        p = np.asarray(pts, dtype=float)
        return np.hypot(p[..., 0] - self.center[0], p[..., 1] - self.center[1]) - self.radius

    @property
    def perimeter(self):
        return _TWO_PI * self.radius

    @property
    def diameter(self):
        return 2.0 * self.radius

    @property
    def bbox(self):
        cx, cy = self.center
        r = self.radius
        return (cx - r, cx + r, cy - r, cy + r)

    def boundary_point(self, s):
        th = np.asarray(s, dtype=float) / self.radius
        return np.stack([self.center[0] + self.radius * np.cos(th),
                         self.center[1] + self.radius * np.sin(th)], axis=-1)

    def normal_at(self, s):
        th = np.asarray(s, dtype=float) / self.radius
        return np.stack([np.cos(th), np.sin(th)], axis=-1)

    def boundary_param(self, pts):
        p = np.asarray(pts, dtype=float)
        th = np.arctan2(p[..., 1] - self.center[1], p[..., 0] - self.center[0])
        return np.mod(th, _TWO_PI) * self.radius

    def to_json(self):
        return {"shape": "unit_disc", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Rectangle(DomainSpec):
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise InvalidDomainError("rectangle has non-positive extent")

    @property
    def _w(self):
        return self.x_max - self.x_min

    @property
    def _h(self):
        return self.y_max - self.y_min

    def signed_distance(self, pts):
        p = np.asarray(pts, dtype=float)
        cx = 0.5 * (self.x_min + self.x_max)
        cy = 0.5 * (self.y_min + self.y_max)
        qx = np.abs(p[..., 0] - cx) - 0.5 * self._w
        qy = np.abs(p[..., 1] - cy) - 0.5 * self._h
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        return outside + inside

    @property
    def perimeter(self):
        return 2.0 * (self._w + self._h)

    @property
    def bbox(self):
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    # arc length runs counterclockwise from (x_min, y_min):
    # bottom, right, top, left.
    def _face_breaks(self):
        w, h = self._w, self._h
        return np.array([0.0, w, w + h, 2 * w + h, 2 * (w + h)])

    def boundary_point(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.perimeter)
        b = self._face_breaks()
        x = np.empty_like(s)
        y = np.empty_like(s)
        m0 = s < b[1]
        m1 = (s >= b[1]) & (s < b[2])
        m2 = (s >= b[2]) & (s < b[3])
        m3 = s >= b[3]
        x[m0], y[m0] = self.x_min + s[m0], self.y_min
        x[m1], y[m1] = self.x_max, self.y_min + (s[m1] - b[1])
        x[m2], y[m2] = self.x_max - (s[m2] - b[2]), self.y_max
        x[m3], y[m3] = self.x_min, self.y_max - (s[m3] - b[3])
        return np.stack([x, y], axis=-1)

    def normal_at(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.perimeter)
        b = self._face_breaks()
        n = np.zeros(s.shape + (2,))
        m0 = s < b[1]
        m1 = (s >= b[1]) & (s < b[2])
        m2 = (s >= b[2]) & (s < b[3])
        m3 = s >= b[3]
        n[m0] = (0.0, -1.0)
        n[m1] = (1.0, 0.0)
        n[m2] = (0.0, 1.0)
        n[m3] = (-1.0, 0.0)
        return n

    def corner_params(self):
        return self._face_breaks()[:4]

    def boundary_param(self, pts):
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        b = self._face_breaks()
        # distances to the four faces, pick the closest
        d_bot = np.abs(p[:, 1] - self.y_min)
        d_rgt = np.abs(p[:, 0] - self.x_max)
        d_top = np.abs(p[:, 1] - self.y_max)
        d_lft = np.abs(p[:, 0] - self.x_min)
        d = np.stack([d_bot, d_rgt, d_top, d_lft], axis=1)
        face = np.argmin(d, axis=1)
        x = np.clip(p[:, 0], self.x_min, self.x_max)
        y = np.clip(p[:, 1], self.y_min, self.y_max)
        s = np.empty(len(p))
        s[face == 0] = (x - self.x_min)[face == 0]
        s[face == 1] = b[1] + (y - self.y_min)[face == 1]
        s[face == 2] = b[2] + (self.x_max - x)[face == 2]
        s[face == 3] = b[3] + (self.y_max - y)[face == 3]
        out = np.mod(s, self.perimeter)
        return out if np.asarray(pts).ndim > 1 else out[0]

    def to_json(self):
        return {"shape": "rectangle", "x_min": self.x_min, "x_max": self.x_max,
                "y_min": self.y_min, "y_max": self.y_max}


@dataclass(frozen=True)
class Superellipse(DomainSpec):
    """|x/a|^p + |y/b|^p < 1, p >= 2.

    Signed distance is the level function normalized by its local gradient,
    which has the exact sign and zero set; the magnitude is first-order.
    """

    center: tuple = (0.0, 0.0)
    semi_axes: tuple = (1.0, 1.0)
    exponent: float = 4.0
    _tables: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        a, b = self.semi_axes
        if not (a > 0 and b > 0 and self.exponent >= 2):
            raise InvalidDomainError("superellipse needs positive axes and exponent >= 2")

    def _level(self, pts):
        p = np.asarray(pts, dtype=float)
        a, b = self.semi_axes
        xt = (p[..., 0] - self.center[0]) / a
        yt = (p[..., 1] - self.center[1]) / b
        return np.abs(xt) ** self.exponent + np.abs(yt) ** self.exponent - 1.0

    def _level_grad(self, pts):
        p = np.asarray(pts, dtype=float)
        a, b = self.semi_axes
        e = self.exponent
        xt = (p[..., 0] - self.center[0]) / a
        yt = (p[..., 1] - self.center[1]) / b
        gx = e * np.abs(xt) ** (e - 1) * np.sign(xt) / a
        gy = e * np.abs(yt) ** (e - 1) * np.sign(yt) / b
        return np.stack([gx, gy], axis=-1)

    def signed_distance(self, pts):
        lv = self._level(pts)
        g = np.linalg.norm(self._level_grad(pts), axis=-1)
        scale = min(self.semi_axes)
        return lv / np.maximum(g, 1.0 / scale)

    def _param_table(self):
        if "s" not in self._tables:
            t = np.linspace(0.0, _TWO_PI, 8193)
            pts = self._point_of_t(t)
            seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
            s = np.concatenate([[0.0], np.cumsum(seg)])
            self._tables["t"] = t
            self._tables["s"] = s
        return self._tables["t"], self._tables["s"]

    def _point_of_t(self, t):
        a, b = self.semi_axes
        e = 2.0 / self.exponent
        ct, st = np.cos(t), np.sin(t)
        x = self.center[0] + a * np.sign(ct) * np.abs(ct) ** e
        y = self.center[1] + b * np.sign(st) * np.abs(st) ** e
        return np.stack([x, y], axis=-1)

    @property
    def perimeter(self):
        _, s = self._param_table()
        return float(s[-1])

    @property
    def bbox(self):
        cx, cy = self.center
        a, b = self.semi_axes
        return (cx - a, cx + a, cy - b, cy + b)

    def boundary_point(self, s):
        tt, ss = self._param_table()
        t = np.interp(np.mod(np.asarray(s, dtype=float), ss[-1]), ss, tt)
        return self._point_of_t(t)

    def normal_at(self, s):
        pts = self.boundary_point(s)
        g = self._level_grad(pts)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def boundary_param(self, pts):
        p = np.asarray(pts, dtype=float)
        a, b = self.semi_axes
        e = self.exponent
        xt = (p[..., 0] - self.center[0]) / a
        yt = (p[..., 1] - self.center[1]) / b
        u = np.sign(xt) * np.abs(xt) ** (e / 2.0)
        v = np.sign(yt) * np.abs(yt) ** (e / 2.0)
        t = np.mod(np.arctan2(v, u), _TWO_PI)
        tt, ss = self._param_table()
        return np.interp(t, tt, ss)

    def to_json(self):
        return {"shape": "superellipse", "center": list(self.center),
                "semi_axes": list(self.semi_axes), "exponent": self.exponent}


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Grid:
    """Rectangular lattice covering the domain bounding box.

    ``interior`` marks nodes strictly inside the domain. Node (i, j) sits at
    (ox + i*dx, oy + j*dy), values arrays are indexed [ix, iy]. Instances are
    immutable after construction.
    """

    nx: int
    ny: int
    dx: float
    dy: float
    ox: float
    oy: float
    domain: DomainSpec | None
    interior: np.ndarray

    @cached_property
    def xs(self):
        return self.ox + np.arange(self.nx) * self.dx

    @cached_property
    def ys(self):
        return self.oy + np.arange(self.ny) * self.dy

    @cached_property
    def nodes(self):
        """All node coordinates, shape (nx, ny, 2)."""
        xx, yy = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([xx, yy], axis=-1)

    @cached_property
    def boundary_band(self):
        """Interior nodes with at least one non-interior 4-neighbor."""
        m = self.interior
        full = np.zeros_like(m)
        full[1:-1, 1:-1] = (m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:])
        return m & ~full

    @cached_property
    def bgeom(self):
        if self.domain is None:
            raise ConfigError("grid has no domain attached; boundary geometry unavailable")
        return BoundaryGeometry(self)

    def compatible(self, other: "Grid") -> bool:
        return (self.nx == other.nx and self.ny == other.ny
                and math.isclose(self.dx, other.dx, rel_tol=1e-12)
                and math.isclose(self.dy, other.dy, rel_tol=1e-12)
                and math.isclose(self.ox, other.ox, rel_tol=1e-12, abs_tol=1e-300)
                and math.isclose(self.oy, other.oy, rel_tol=1e-12, abs_tol=1e-300)
                and bool(np.array_equal(self.interior, other.interior)))

    def to_json(self):
        return {"nx": self.nx, "ny": self.ny, "dx": self.dx, "dy": self.dy,
                "ox": self.ox, "oy": self.oy}


def build_grid(domain: DomainSpec, nx: int, ny: int) -> Grid:
    """Sample the domain bounding box with an nx-by-ny lattice."""
    if nx < 3 or ny < 3:
        raise ConfigError(f"grid needs at least 3 nodes per side, got {nx}x{ny}")
    x0, x1, y0, y1 = domain.bbox
    if not (x1 > x0 and y1 > y0):
        raise InvalidDomainError("degenerate domain bounding box")
    dx = (x1 - x0) / (nx - 1)
    dy = (y1 - y0) / (ny - 1)
    xs = x0 + np.arange(nx) * dx
    ys = y0 + np.arange(ny) * dy
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    interior = domain.signed_distance(np.stack([xx, yy], axis=-1)) < 0.0
    if not interior.any():
        raise InvalidDomainError("domain contains no grid nodes; refine the grid")
    interior.setflags(write=False)
    return Grid(nx, ny, dx, dy, x0, y0, domain, interior)


def refine_grid(grid: Grid) -> Grid:
    """Halve the spacing; coarse nodes coincide exactly with every other fine node."""
    fine = build_grid(grid.domain, 2 * grid.nx - 1, 2 * grid.ny - 1)
    return fine


# ---------------------------------------------------------------------------
# boundary crossings and per-node arm table
# ---------------------------------------------------------------------------

def _bisect_crossing(domain, p_in, p_out, iters=60):
    """Root of the signed distance on the segment p_in (inside) -> p_out."""
    a = np.zeros(len(p_in))
    b = np.ones(len(p_in))
    for _ in range(iters):
        m = 0.5 * (a + b)
        pm = p_in + m[:, None] * (p_out - p_in)
        sd = domain.signed_distance(pm)
        neg = sd < 0.0
        a = np.where(neg, m, a)
        b = np.where(neg, b, m)
    lam = 0.5 * (a + b)
    return p_in + lam[:, None] * (p_out - p_in), lam


class BoundaryGeometry:
    """Crossings of grid lines with the domain boundary, plus the arm table.

    crossings: (N, 2) points sorted by arc length, with arc coordinates,
    analytic normals and trapezoid arc weights. ``arms`` gives, for every
    interior node and each of the four axis directions, either the interior
    neighbor or the crossing index and the fractional arm length.
    """

    # arm directions: +x, -x, +y, -y
    _SHIFTS = ((1, 0), (-1, 0), (0, 1), (0, -1))

    def __init__(self, grid: Grid):
        self.grid = grid
        dom = grid.domain
        m = grid.interior
        nx, ny = grid.nx, grid.ny
        nodes = grid.nodes

        edge_pts_in = []
        edge_pts_out = []
        edge_keys = []
        for d, (si, sj) in enumerate(self._SHIFTS):
            ii, jj = np.nonzero(m)
            ni, nj = ii + si, jj + sj
            ok = (ni >= 0) & (ni < nx) & (nj >= 0) & (nj < ny)
            ii, jj, ni, nj = ii[ok], jj[ok], ni[ok], nj[ok]
            cut = ~m[ni, nj]
            ii, jj, ni, nj = ii[cut], jj[cut], ni[cut], nj[cut]
            edge_pts_in.append(nodes[ii, jj])
            edge_pts_out.append(nodes[ni, nj])
            edge_keys.extend(zip([d] * len(ii), ii, jj))
        if edge_keys:
            p_in = np.concatenate(edge_pts_in)
            p_out = np.concatenate(edge_pts_out)
            pts, lam = _bisect_crossing(dom, p_in, p_out)
        else:
            pts = np.zeros((0, 2))
            lam = np.zeros(0)

        # dedupe coincident crossings (e.g. lattice nodes lying exactly on faces)
        tol = 1e-9 * max(grid.dx, grid.dy)
        order = np.lexsort((np.round(pts[:, 1] / tol), np.round(pts[:, 0] / tol)))
        canon = -np.ones(len(pts), dtype=int)
        uniq_pts = []
        for k in order:
            if uniq_pts and (abs(uniq_pts[-1][0] - pts[k, 0]) < tol
                             and abs(uniq_pts[-1][1] - pts[k, 1]) < tol):
                canon[k] = len(uniq_pts) - 1
            else:
                uniq_pts.append(pts[k])
                canon[k] = len(uniq_pts) - 1
        uniq_pts = np.array(uniq_pts) if uniq_pts else np.zeros((0, 2))

        s = dom.boundary_param(uniq_pts) if len(uniq_pts) else np.zeros(0)
        sort = np.argsort(s)
        rank = np.empty_like(sort)
        rank[sort] = np.arange(len(sort))

        self.points = uniq_pts[sort]
        self.s = np.asarray(s)[sort]
        self.normals = dom.normal_at(self.s) if len(self.s) else np.zeros((0, 2))
        per = dom.perimeter
        if len(self.s) >= 2:
            gaps = np.diff(np.concatenate([self.s, [self.s[0] + per]]))
            self.weights = 0.5 * (gaps + np.roll(gaps, 1))
        else:
            self.weights = np.full(len(self.s), per)

        # arm table: fraction arrays and crossing/neighbor indices
        self.arm_frac = np.ones((4, nx, ny))
        self.arm_cross = -np.ones((4, nx, ny), dtype=int)
        for (d, i, j), lam_k, k in zip(edge_keys, lam, range(len(edge_keys))):
            self.arm_frac[d, i, j] = max(lam_k, 1e-12)
            self.arm_cross[d, i, j] = rank[canon[k]]
        for arr in (self.points, self.s, self.normals, self.weights,
                    self.arm_frac, self.arm_cross):
            arr.setflags(write=False)

    def values_from(self, fn):
        """Evaluate a callable fn(points, s) at every crossing."""
        return np.asarray(fn(self.points, self.s))


# ---------------------------------------------------------------------------
# wrapped arc intervals
# ---------------------------------------------------------------------------

def _normalize_intervals(ivals, period):
    """Clip to [0, period), split wrapped pieces, merge overlaps."""
    pieces = []
    for a, b in ivals:
        if b - a >= period:
            return [(0.0, period)]
        a = math.fmod(a, period)
        b = math.fmod(b, period)
        if a < 0:
            a += period
        if b < 0:
            b += period
        if a <= b:
            pieces.append((a, b))
        else:
            pieces.append((a, period))
            pieces.append((0.0, b))
    pieces.sort()
    merged = []
    for a, b in pieces:
        if merged and a <= merged[-1][1] + 1e-12:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    # merge across the wrap point
    if len(merged) >= 2 and merged[0][0] <= 1e-12 and merged[-1][1] >= period - 1e-12:
        a0, b0 = merged.pop(0)
        a1, b1 = merged.pop()
        merged.append((a1, b0 + period))
    return merged


def _interval_member(s, ivals, period):
    s = np.mod(np.asarray(s, dtype=float), period)
    out = np.zeros(s.shape, dtype=bool)
    for a, b in ivals:
        out |= (s >= a) & (s <= b)
        if b > period:
            out |= s <= b - period
    return out


def _interval_distance(s, ivals, period):
    """Circular arc distance from s to the interval set (0 inside)."""
    s = np.mod(np.asarray(s, dtype=float), period)
    best = np.full(s.shape, np.inf)
    for a, b in ivals:
        for shift in (-period, 0.0, period):
            lo, hi = a + shift, b + shift
            d = np.where(s < lo, lo - s, np.where(s > hi, s - hi, 0.0))
            best = np.minimum(best, d)
    return best


def _interval_measure(ivals):
    return sum(b - a for a, b in ivals)


def _complement_intervals(ivals, period):
    ivals = _normalize_intervals(ivals, period)
    if not ivals:
        return [(0.0, period)]
    if len(ivals) == 1 and ivals[0][1] - ivals[0][0] >= period - 1e-15:
        return []
    arcs = []
    for a, b in ivals:
        if b <= period:
            arcs.append((a, b))
        else:
            arcs.append((a, period))
            arcs.append((0.0, b - period))
    arcs.sort()
    out = []
    for k, (a, b) in enumerate(arcs):
        nxt = arcs[(k + 1) % len(arcs)][0] + (period if k + 1 == len(arcs) else 0.0)
        if nxt > b + 1e-15:
            out.append((b, nxt))
    return _normalize_intervals(out, period)


# ---------------------------------------------------------------------------
# segmentation relative to a pole
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BoundarySegmentation:
    """Front/back split of the boundary and the illumination support Gamma.

    A boundary point x is on the front side when (x0 - x) . n(x) > 0.
    Gamma_minus (where illuminations vanish identically) consists of one
    excluded back-side window per front-arc end, starting ``gamma_margin``
    past the arc end; Gamma is the complement. Keeping the windows next to
    the horizon points leaves their downstream influence inside the margin
    neighborhood that the trusted region already excludes.
    """

    domain: DomainSpec
    grid: Grid
    x0: tuple
    gamma_margin: float
    gamma_minus_window: float
    points: np.ndarray
    s: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    in_front: np.ndarray
    in_gamma: np.ndarray
    in_gamma_minus: np.ndarray
    front_intervals: list
    gamma_intervals: list
    gamma_minus_intervals: list

    @property
    def perimeter(self):
        return self.domain.perimeter

    @property
    def front_measure(self):
        return _interval_measure(self.front_intervals)

    @property
    def gamma_measure(self):
        return self.perimeter - self.gamma_minus_measure

    @property
    def gamma_minus_measure(self):
        return _interval_measure(self.gamma_minus_intervals)

    def front_flag_at(self, s):
        return _interval_member(s, self.front_intervals, self.perimeter)

    def gamma_flag_at(self, s):
        return ~_interval_member(s, self.gamma_minus_intervals, self.perimeter)

    def front_distance(self, s):
        return _interval_distance(s, self.front_intervals, self.perimeter)

    def gamma_minus_distance(self, s):
        return _interval_distance(s, self.gamma_minus_intervals, self.perimeter)

    def back_points(self):
        return self.points[~self.in_front]

    def to_json(self):
        return {"x0": list(self.x0), "gamma_margin": self.gamma_margin,
                "gamma_minus_window": self.gamma_minus_window,
                "front_measure": self.front_measure,
                "gamma_measure": self.gamma_measure}


def _pole_outside_hull(points, x0):
    hull = ConvexHull(points)
    eq = hull.equations  # rows: [a, b, c] with a*x + b*y + c <= 0 inside
    vals = eq[:, :2] @ np.asarray(x0, dtype=float) + eq[:, 2]
    scale = max(1.0, float(np.abs(points).max()))
    return bool((vals > 1e-9 * scale).any())


def segment_boundary(domain: DomainSpec, grid: Grid, x0,
                     gamma_margin: float | None = None,
                     gamma_minus_window: float | None = None) -> BoundarySegmentation:
    """Split the boundary into front/back sides seen from the pole x0.

    The pole must lie outside the closed convex hull of the domain
    (support-function test against the boundary crossing points).
    ``gamma_margin`` is the guaranteed arc of back-side Gamma nodes past
    each front-arc end; ``gamma_minus_window`` the arc length of each
    excluded window beyond that margin.
    """
    bg = grid.bgeom
    if len(bg.points) < 8:
        raise InvalidDomainError("boundary too coarsely resolved for segmentation")
    if not _pole_outside_hull(bg.points, x0):
        raise PolePlacementError(f"pole {tuple(x0)} is not outside the convex hull")
    per = domain.perimeter
    if gamma_margin is None:
        gamma_margin = 0.04 * per
    if gamma_minus_window is None:
        gamma_minus_window = 0.025 * per
    if not (0.0 < gamma_margin < 0.5 * per):
        raise ConfigError("gamma_margin must lie in (0, perimeter/2)")
    if not (0.0 < gamma_minus_window < 0.5 * per):
        raise ConfigError("gamma_minus_window must lie in (0, perimeter/2)")

    x0 = (float(x0[0]), float(x0[1]))

    def side(svals):
        p = domain.boundary_point(svals)
        n = domain.normal_at(svals)
        return (x0[0] - p[..., 0]) * n[..., 0] + (x0[1] - p[..., 1]) * n[..., 1]

    # locate the sign changes of the front/back indicator on a dense sample,
    # then bisect each bracket; corners (jumps) resolve to the corner param
    ns = 8192
    sgrid = np.linspace(0.0, per, ns, endpoint=False)
    f = side(sgrid)
    roots = []
    for k in range(ns):
        k2 = (k + 1) % ns
        if (f[k] > 0) != (f[k2] > 0):
            a, b = sgrid[k], sgrid[k] + per / ns
            for _ in range(60):
                mid = 0.5 * (a + b)
                if (side(np.array([mid]))[0] > 0) == (f[k] > 0):
                    a = mid
                else:
                    b = mid
            roots.append(0.5 * (a + b))
    if f.max() <= 0:
        raise PolePlacementError("no front side visible from the pole")
    if f.min() > 0:
        raise PolePlacementError("entire boundary is front side; pole placement invalid")
    roots.sort()
    front_ivals = []
    for k, r in enumerate(roots):
        r2 = roots[(k + 1) % len(roots)]
        mid = r + (math.fmod(r2 - r, per) + per) % per / 2.0
        if side(np.array([math.fmod(mid, per)]))[0] > 0:
            end = r2 if r2 > r else r2 + per
            front_ivals.append((r, end))
    front_ivals = _normalize_intervals(front_ivals, per)

    # rectangle corners carry no normal: trim them out of the front set
    if isinstance(domain, Rectangle):
        eps = 1e-9 * per
        trimmed = []
        for a, b in front_ivals:
            for c in domain.corner_params():
                for cc in (c, c + per):
                    if a < cc < b:
                        trimmed.append((a, cc - eps))
                        a = cc + eps
            trimmed.append((a, b))
        front_ivals = _normalize_intervals(trimmed, per)

    # one excluded window past each front-arc end, gamma_margin away
    windows = []
    for a, b in front_ivals:
        windows.append((b + gamma_margin, b + gamma_margin + gamma_minus_window))
        windows.append((a - gamma_margin - gamma_minus_window, a - gamma_margin))
    gm_ivals = _normalize_intervals(windows, per)
    if _interval_measure(gm_ivals) < 2 * len(front_ivals) * gamma_minus_window - 1e-9:
        raise ConfigError("gamma_minus windows overlap; shrink gamma_margin or the window")
    front_dilated = _normalize_intervals(
        [(a - gamma_margin, b + gamma_margin) for a, b in front_ivals], per)
    for a, b in gm_ivals:
        pad = 1e-9 * per
        mids = np.linspace(a + pad, b - pad, 9)
        if _interval_member(mids, front_dilated, per).any():
            raise ConfigError("gamma_minus window reaches the front arc; "
                              "shrink gamma_margin or the window")
        pts = domain.boundary_point(np.mod(mids, per))
        nrm = domain.normal_at(np.mod(mids, per))
        side = (x0[0] - pts[:, 0]) * nrm[:, 0] + (x0[1] - pts[:, 1]) * nrm[:, 1]
        if (side > 0).any():
            raise ConfigError("gamma_minus window leaves the back side")
    gamma_ivals = _complement_intervals(gm_ivals, per)

    in_front = _interval_member(bg.s, front_ivals, per)
    in_gm = _interval_member(bg.s, gm_ivals, per)
    return BoundarySegmentation(
        domain=domain, grid=grid, x0=x0, gamma_margin=float(gamma_margin),
        gamma_minus_window=float(gamma_minus_window),
        points=bg.points, s=bg.s, normals=bg.normals, weights=bg.weights,
        in_front=in_front, in_gamma=~in_gm, in_gamma_minus=in_gm,
        front_intervals=front_ivals, gamma_intervals=gamma_ivals,
        gamma_minus_intervals=gm_ivals)


# ---------------------------------------------------------------------------
# trusted region
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TrustedRegion:
    """Interior nodes at least ``margin`` away from every back-side boundary node.

    ``eta`` is the recorded transversality constant: the minimum over masked
    nodes x and eligible front nodes y of (x0 - x) . n(y) / |x0 - x|^2.
    """

    mask: np.ndarray
    margin: float
    eta: float
    eligible_front: np.ndarray
    seg: BoundarySegmentation

    @property
    def node_count(self):
        return int(self.mask.sum())


def trusted_region(grid: Grid, seg: BoundarySegmentation, margin: float) -> TrustedRegion:
    if margin <= 2.0 * max(grid.dx, grid.dy):
        raise ConfigError("trusted-region margin must exceed twice the grid spacing")
    back = seg.back_points()
    if len(back) == 0:
        raise EmptyRegionError("segmentation has no back-side nodes")
    tree = cKDTree(back)
    nodes = grid.nodes[grid.interior]
    dist, _ = tree.query(nodes, k=1)
    mask = np.zeros_like(grid.interior)
    mask[grid.interior] = dist >= margin
    if not mask.any():
        raise EmptyRegionError(f"margin {margin} leaves no trusted nodes")

    front_pts = seg.points[seg.in_front]
    fdist, _ = tree.query(front_pts, k=1)
    eligible = np.zeros(len(seg.points), dtype=bool)
    eligible[np.nonzero(seg.in_front)[0][fdist >= margin]] = True
    if not eligible.any():
        raise EmptyRegionError("margin leaves no eligible front boundary nodes")

    x0 = np.asarray(seg.x0)
    xs = grid.nodes[mask]
    ny = seg.normals[eligible]
    eta = np.inf
    for k in range(0, len(ny), 64):
        blk = ny[k:k + 64]
        num = (x0 - xs) @ blk.T  # (Nx, nb)
        r2 = np.sum((x0 - xs) ** 2, axis=1)[:, None]
        eta = min(eta, float((num / r2).min()))
    mask.setflags(write=False)
    return TrustedRegion(mask=mask, margin=float(margin), eta=eta,
                         eligible_front=eligible, seg=seg)


def convexity_radius(seg: BoundarySegmentation) -> float:
    """Smallest R such that tangent balls of radius R at front nodes cover the domain.

    Returns inf when some front tangent ball cannot contain the boundary
    sample for any radius.
    """
    pts = seg.points
    worst = 0.0
    for idx in np.nonzero(seg.in_front)[0]:
        y = pts[idx]
        n = seg.normals[idx]
        d = pts - y
        dd = np.einsum("ij,ij->i", d, d)
        proj = -(d @ n)  # (y - b) . n(y)
        keep = dd > 1e-14
        if np.any(proj[keep] <= 0):
            return math.inf
        r_need = dd[keep] / (2.0 * proj[keep])
        worst = max(worst, float(r_need.max()))
    return worst
