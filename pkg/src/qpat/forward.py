"""Forward simulation: diffusion solves, internal data and smooth noise.

Synthetic data is produced on a finer grid than the reconstruction grid
(node-coincident refinement) and decimated, so the reconstruction never
sees its own discretization exactly. Boundary traces of the data are part
of the measurement: the reconstruction reads mu = d/g on the front arc
from them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .cgo import IlluminationSet
from .domain import Grid, build_grid, refine_grid, segment_boundary
from .elliptic import DirichletProblem, LinearSolveOptions, apply_laplacian, solve_dirichlet
from .errors import ConfigError
from .fields import ComplexField, ScalarField
from .scenarios import Scenario


@dataclass(eq=False)
class CoefficientPair:
    """Diffusion, absorption and Grueneisen coefficients with optional
    analytic evaluators (used for sub-grid boundary values and fine grids)."""

    D: ScalarField
    sigma_a: ScalarField
    G: ScalarField
    D_fn: object = None
    sigma_fn: object = None
    G_fn: object = None
    smoothness_bound: float | None = None

    def __post_init__(self):
        self.d0 = float(np.nanmin(self.D.values))
        self.sigma0 = float(np.nanmin(self.sigma_a.values))
        if not self.d0 > 0.0:
            raise ConfigError("diffusion coefficient must be bounded below by d0 > 0")
        if self.sigma0 < 0.0:
            raise ConfigError("absorption must be non-negative")
        if not float(np.nanmin(self.G.values)) > 0.0:
            raise ConfigError("Grueneisen coefficient must be positive")

    @classmethod
    def from_scenario(cls, grid: Grid, scen: Scenario) -> "CoefficientPair":
        return cls(D=ScalarField.from_function(grid, scen.D_fn),
                   sigma_a=ScalarField.from_function(grid, scen.sigma_fn),
                   G=ScalarField.from_function(grid, scen.G_fn),
                   D_fn=scen.D_fn, sigma_fn=scen.sigma_fn, G_fn=scen.G_fn)

    def on_grid(self, grid: Grid) -> "CoefficientPair":
        if self.D_fn is None:
            raise ConfigError("coefficient pair has no analytic evaluators")
        return CoefficientPair(D=ScalarField.from_function(grid, self.D_fn),
                               sigma_a=ScalarField.from_function(grid, self.sigma_fn),
                               G=ScalarField.from_function(grid, self.G_fn),
                               D_fn=self.D_fn, sigma_fn=self.sigma_fn, G_fn=self.G_fn,
                               smoothness_bound=self.smoothness_bound)

    def sqrtD_fn(self):
        if self.D_fn is None:
            return None
        Df = self.D_fn
        return lambda pts: np.sqrt(Df(pts))


@dataclass(eq=False)
class InternalDataSet:
    """Measured internal data: grid fields plus their boundary traces.

    ``traces[j]`` samples d_j at the boundary crossings of ``illum.seg`` in
    arc order; splines over arc length give values at flow exit points.
    """

    d: list
    traces: list
    illum: IlluminationSet
    noise_level: float = 0.0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.d) != len(self.traces) or len(self.d) != len(self.illum):
            raise ConfigError("data fields, traces and illuminations must align")
        self._splines = {}

    @property
    def grid(self) -> Grid:
        return self.d[0].grid

    def trace_spline(self, j):
        if j not in self._splines:
            seg = self.illum.seg
            s = np.concatenate([seg.s, [seg.s[0] + seg.perimeter]])
            v = np.concatenate([self.traces[j], [self.traces[j][0]]])
            self._splines[j] = CubicSpline(s, v, bc_type="periodic")
        return self._splines[j]

    def trace_at(self, j, s):
        return self.trace_spline(j)(np.mod(s, self.illum.seg.perimeter))

    def scaled(self, kappa) -> "InternalDataSet":
        """Rescale the whole experiment (sources and data) by kappa."""
        return InternalDataSet(
            d=[ComplexField(f.grid, f.values * kappa) for f in self.d],
            traces=[t * kappa for t in self.traces],
            illum=self.illum.scaled(kappa),
            noise_level=self.noise_level, seed=self.seed, meta=dict(self.meta))


def liouville_forward(coeffs: CoefficientPair):
    """Schroedinger-side view of the coefficients.

    q = -lap(sqrt D)/sqrt D - sigma_a/D and mu = sigma_a/sqrt D, with the
    discrete Laplacian (boundary values from the analytic evaluator when
    available, nearest-interior fallback otherwise).
    """
    grid = coeffs.D.grid
    sqrtD = ScalarField(grid, np.sqrt(coeffs.D.values))
    bvals = None
    if coeffs.D_fn is not None:
        bg = grid.bgeom
        bvals = np.sqrt(coeffs.D_fn(bg.points))
    lap = apply_laplacian(sqrtD, boundary_values=bvals).values
    if bvals is None:
        # fill the boundary ring with the nearest computed value
        from scipy.ndimage import distance_transform_edt
        missing = grid.interior & ~np.isfinite(lap)
        if missing.any():
            good = np.isfinite(lap)
            _, idx = distance_transform_edt(~good, return_indices=True)
            lap[missing] = lap[idx[0][missing], idx[1][missing]]
    q = ScalarField(grid, -lap / sqrtD.values - coeffs.sigma_a.values / coeffs.D.values)
    mu = ScalarField(grid, coeffs.sigma_a.values / sqrtD.values)
    mu.meta["mu0_lower"] = float(np.nanmin(mu.values))
    return q, mu


@dataclass
class SimulateOptions:
    fine_factor: int = 2
    solver: LinearSolveOptions = field(default_factory=LinearSolveOptions)

    def __post_init__(self):
        if self.fine_factor not in (1, 2, 4):
            raise ConfigError("fine_factor must be 1, 2 or 4")


def simulate_data(coeffs: CoefficientPair, illum: IlluminationSet,
                  opts: SimulateOptions | None = None) -> InternalDataSet:
    """Solve the diffusion problem for each real illumination and form d = G sigma_a u.

    The prescribed traces are the Schroedinger-side sources; the diffusion
    boundary condition divides out sqrt(D) on the boundary (D is known
    there). Each complex trace is realized as two real solves.
    """
    opts = opts or SimulateOptions()
    seg = illum.seg
    grid = seg.grid
    if coeffs.D_fn is None and opts.fine_factor > 1:
        raise ConfigError("coefficients without analytic evaluators require fine_factor=1")

    fine = grid
    for _ in range(opts.fine_factor.bit_length() - 1):
        fine = refine_grid(fine)
    cf = coeffs if fine is grid else coeffs.on_grid(fine)

    bg = fine.bgeom
    sqrtD_fn = coeffs.sqrtD_fn()
    if sqrtD_fn is not None:
        sqrtD_cross = sqrtD_fn(bg.points)
        D_cross = sqrtD_cross ** 2
    else:
        sqrtD_cross = np.sqrt(_nearest_interior(coeffs.D.values, grid, bg.points))
        D_cross = sqrtD_cross ** 2
    s_cross = bg.s

    fields = []
    traces = []
    step = opts.fine_factor
    for j in range(len(illum)):
        g_sch = illum.g_at(j, bg.points, s_cross)
        g_diff = g_sch / sqrtD_cross
        prob = DirichletProblem.diffusion(cf.D, cf.sigma_a, g_diff, D_crossings=D_cross)
        # two real solves per complex illumination
        u_re = solve_dirichlet(replace(prob, boundary_values=g_diff.real), opts.solver)
        u_im = solve_dirichlet(replace(prob, boundary_values=g_diff.imag), opts.solver)
        u = u_re.values.real + 1j * u_im.values.real
        d_fine = cf.G.values * cf.sigma_a.values * u
        d_coarse = d_fine[::step, ::step]
        d_coarse = np.where(grid.interior, d_coarse, np.nan + 1j * np.nan)
        fields.append(ComplexField(grid, d_coarse))

        # boundary trace of the data: u equals the Dirichlet value there
        gc = illum.g_at(j, seg.points, seg.s)
        if sqrtD_fn is not None:
            sD = sqrtD_fn(seg.points)
            sig = coeffs.sigma_fn(seg.points)
            Gv = coeffs.G_fn(seg.points)
        else:
            sD = np.sqrt(_nearest_interior(coeffs.D.values, grid, seg.points))
            sig = _nearest_interior(coeffs.sigma_a.values, grid, seg.points)
            Gv = _nearest_interior(coeffs.G.values, grid, seg.points)
        traces.append(Gv * sig * gc / sD)

    return InternalDataSet(d=fields, traces=traces, illum=illum,
                           noise_level=0.0, seed=None,
                           meta={"fine_factor": opts.fine_factor})


def _nearest_interior(values, grid, pts):
    """Nearest interior-node value, for coefficients given only as samples."""
    p = np.atleast_2d(pts)
    ix = np.clip(np.rint((p[:, 0] - grid.ox) / grid.dx).astype(int), 0, grid.nx - 1)
    iy = np.clip(np.rint((p[:, 1] - grid.oy) / grid.dy).astype(int), 0, grid.ny - 1)
    out = values[ix, iy]
    if np.isnan(out).any():
        from scipy.ndimage import distance_transform_edt
        good = np.isfinite(values)
        _, idx = distance_transform_edt(~good, return_indices=True)
        filled = values[idx[0], idx[1]]
        out = np.where(np.isnan(out), filled[ix, iy], out)
    return out


# ---------------------------------------------------------------------------
# smooth measurement noise
# ---------------------------------------------------------------------------

def _draw_modes(rng, diam, n_modes=6, max_wavenumber=3):
    amps = rng.uniform(-1.0, 1.0, size=n_modes)
    mx = rng.integers(0, max_wavenumber + 1, size=n_modes)
    my = rng.integers(0, max_wavenumber + 1, size=n_modes)
    both_zero = (mx == 0) & (my == 0)
    mx[both_zero] = 1
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_modes)
    k = np.pi / diam * np.stack([mx, my], axis=1)
    return amps, k, phases


def _mode_eval(amps, k, phases, pts):
    p = np.asarray(pts, dtype=float)
    arg = p[..., None, 0] * k[:, 0] + p[..., None, 1] * k[:, 1] + phases
    return np.sum(amps * np.cos(arg), axis=-1)


def add_noise(data: InternalDataSet, delta: float, seed: int) -> InternalDataSet:
    """Add a smooth low-mode perturbation of relative size delta to the data.

    The perturbation is synthesized from a handful of low-wavenumber cosine
    modes so its C1-type norm stays controlled, then scaled so that
    max(sup |p|, L sup |grad p|) = delta * sup |d| per real component, with
    L the shortest mode scale. The achieved sup ratio is recorded and lands
    in [0.5, 1] * delta. Deterministic per seed.
    """
    if delta < 0:
        raise ConfigError("noise level must be non-negative")
    if delta == 0.0:
        out = InternalDataSet(d=[f.copy() for f in data.d],
                              traces=[t.copy() for t in data.traces],
                              illum=data.illum, noise_level=0.0, seed=seed,
                              meta=dict(data.meta))
        return out
    grid = data.grid
    seg = data.illum.seg
    domain = seg.domain
    diam = domain.diameter
    nodes = grid.nodes[grid.interior]

    new_fields = []
    new_traces = []
    achieved = []
    for j, fld in enumerate(data.d):
        scale = float(np.nanmax(np.abs(fld.values)))
        pert_parts = []
        for part in range(2):
            rng = np.random.default_rng([int(seed), j, part])
            best = None
            for _ in range(20):
                amps, k, phases = _draw_modes(rng, diam)
                vals = _mode_eval(amps, k, phases, nodes)
                sup_p = float(np.max(np.abs(vals)))
                gsup = float(np.max(np.abs(amps) @ np.abs(k)))  # crude sup|grad p|
                L = 1.0 / max(np.hypot(k[:, 0], k[:, 1]).max(), 1e-12)
                proxy = max(sup_p, L * gsup)
                ratio = sup_p / proxy
                if best is None or ratio > best[0]:
                    best = (ratio, amps, k, phases, proxy)
                if ratio >= 0.5:
                    break
            _, amps, k, phases, proxy = best
            factor = delta * scale / proxy
            pert_parts.append((amps * factor, k, phases))
            achieved.append(float(np.max(np.abs(_mode_eval(amps * factor, k, phases,
                                                           nodes)))) / scale)

        def pert(pts, parts=tuple(pert_parts)):
            re = _mode_eval(*parts[0], pts)
            im = _mode_eval(*parts[1], pts)
            return re + 1j * im

        vals = fld.values.copy()
        vals[grid.interior] += pert(nodes)
        new_fields.append(ComplexField(grid, vals))
        new_traces.append(data.traces[j] + pert(seg.points))

    out = InternalDataSet(d=new_fields, traces=new_traces, illum=data.illum,
                          noise_level=float(delta), seed=int(seed),
                          meta=dict(data.meta))
    out.meta["achieved_noise_ratio"] = max(achieved)
    return out
