"""End-to-end drivers: geometry setup, forward simulation, reconstruction.

These are the building blocks shared by the command line front end, the
studies and the acceptance suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cgo import CGOConfig, default_h, make_illuminations, perpendicular_omega
from .domain import (
    DomainSpec,
    Grid,
    TrustedRegion,
    build_grid,
    segment_boundary,
    trusted_region,
)
from .elliptic import LinearSolveOptions
from .errors import ConfigError
from .fields import ComplexField, ScalarField
from .forward import (
    CoefficientPair,
    InternalDataSet,
    SimulateOptions,
    add_noise,
    liouville_forward,
    simulate_data,
)
from .inversion import assemble_report, recover_q, recover_sqrtD
from .scenarios import get_scenario
from .transport import (
    TraceOptions,
    build_gradient_system,
    build_transport_field,
    gradient_anchors,
    reconstruct_mu,
    reconstruct_mu_gradient,
)


@dataclass
class Setup:
    """Geometry and sources for one pole."""

    domain: DomainSpec
    grid: Grid
    seg: object
    trusted: TrustedRegion
    configs: tuple
    illum: object


def default_pole(domain) -> tuple:
    bx0, bx1, by0, by1 = domain.bbox
    cx, cy = 0.5 * (bx0 + bx1), 0.5 * (by0 + by1)
    return (cx + (bx1 - bx0), cy)


def build_setup(domain: DomainSpec, n: int, x0=None, omega=None, h=None,
                gamma_margin=None, gamma_minus_window=None, trusted_margin=None,
                cutoff_width=None, epsilon: float = 0.0,
                grid: Grid | None = None) -> Setup:
    """Grid, boundary segmentation, trusted region and illumination pair."""
    grid = grid if grid is not None else build_grid(domain, n, n)
    x0 = tuple(x0) if x0 is not None else default_pole(domain)
    seg = segment_boundary(domain, grid, x0, gamma_margin, gamma_minus_window)
    if trusted_margin is None:
        trusted_margin = 0.15 * domain.diameter
    trusted = trusted_region(grid, seg, trusted_margin)
    if omega is None:
        omega = perpendicular_omega(domain, x0)
    if h is None:
        h = 0.3
    if cutoff_width is None:
        cutoff_width = 0.9 * seg.gamma_margin
    plus = CGOConfig(x0=x0, omega=tuple(omega), h=float(h), sign="plus_phi",
                     cutoff_width=float(cutoff_width))
    minus = CGOConfig(x0=x0, omega=tuple(omega), h=float(h), sign="minus_phi",
                      cutoff_width=float(cutoff_width))
    illum = make_illuminations((plus, minus), seg, epsilon=epsilon)
    return Setup(domain=domain, grid=grid, seg=seg, trusted=trusted,
                 configs=(plus, minus), illum=illum)


def forward_dataset(setup: Setup, coeffs: CoefficientPair,
                    fine_factor: int = 2, delta: float = 0.0, seed: int = 0,
                    solver: LinearSolveOptions | None = None) -> InternalDataSet:
    opts = SimulateOptions(fine_factor=fine_factor,
                           solver=solver or LinearSolveOptions())
    data = simulate_data(coeffs, setup.illum, opts)
    if delta > 0:
        data = add_noise(data, delta, seed)
    return data


def normalize_grueneisen(data: InternalDataSet, coeffs: CoefficientPair) -> InternalDataSet:
    """Divide the known Grueneisen factor out of the data."""
    Gv = coeffs.G.values
    if np.allclose(Gv[np.isfinite(Gv)], 1.0):
        return data
    seg = data.illum.seg
    if coeffs.G_fn is not None:
        G_tr = coeffs.G_fn(seg.points)
    else:
        from .forward import _nearest_interior
        G_tr = _nearest_interior(Gv, data.grid, seg.points)
    return InternalDataSet(
        d=[ComplexField(f.grid, f.values / Gv) for f in data.d],
        traces=[t / G_tr for t in data.traces],
        illum=data.illum, noise_level=data.noise_level, seed=data.seed,
        meta=dict(data.meta))


@dataclass
class ReconstructionResult:
    mu_result: object
    q: ScalarField
    sqrtD: ScalarField
    report: object
    tfield: object
    timings: dict = dc_field(default_factory=dict)


def reconstruct_pair(setup: Setup, data: InternalDataSet,
                     truth: CoefficientPair | None = None,
                     mode: str = "strict",
                     solver: LinearSolveOptions | None = None,
                     sqrtD_boundary=None,
                     trace_opts: TraceOptions | None = None) -> ReconstructionResult:
    """Single-pole reconstruction: mu along characteristics, then q, sqrt(D).

    STRICT mode needs sqrt(D) data on the trusted region's interior cut;
    synthetic runs take it from the truth, otherwise use EXACT mode.
    """
    grid, seg, trusted = setup.grid, setup.seg, setup.trusted
    cfg = setup.configs[0]
    truth_mu = None
    if truth is not None:
        _, truth_mu = liouville_forward(truth)
    tfield = build_transport_field(data, cfg, grid, trusted, truth_mu=truth_mu)
    mu_res = reconstruct_mu(tfield, data, data.illum, seg, trusted,
                            opts=trace_opts)
    q = recover_q(mu_res, data)

    bg = grid.bgeom
    if sqrtD_boundary is None:
        if truth is None or truth.D_fn is None:
            raise ConfigError("sqrt(D) boundary values required (no truth available)")
        sqrtD_boundary = np.sqrt(truth.D_fn(bg.points))
    cut_values = None
    region = None
    if mode == "strict":
        region = trusted.mask & q.support & mu_res.mu.support
        if truth is not None and truth.D_fn is not None:
            cut_values = np.sqrt(truth.D_fn(grid.nodes))
        else:
            raise ConfigError(
                "strict mode requires interior-cut sqrt(D) data; synthetic runs "
                "take it from the scenario (use --mode exact otherwise)")
    sqrtD = recover_sqrtD(q, mu_res.mu, sqrtD_boundary,
                          opts=solver, mode=mode, region=region, cut_values=cut_values)
    report = assemble_report(mu_res, q, sqrtD, ground_truth=truth,
                             region=trusted.mask)
    report.meta.update({
        "transport": tfield.summary(),
        "coverage": mu_res.coverage,
        "eta": trusted.eta,
        "mode": mode,
        "eps_hat": list(map(float, data.illum.eps_hat)),
    })
    return ReconstructionResult(mu_result=mu_res, q=q, sqrtD=sqrtD,
                                report=report, tfield=tfield)


@dataclass
class MultiSourceResult:
    system: object
    mu_result: object
    per_pole: list


def reconstruct_multisource(setups, datasets, trace_opts=None) -> MultiSourceResult:
    """Two-pole gradient-system reconstruction of mu."""
    grid = setups[0].grid
    system = build_gradient_system(datasets, grid,
                                   [s.trusted for s in setups])
    anchors = []
    for s, d in zip(setups, datasets):
        anchors.extend(gradient_anchors(d, system.mask, trace_opts))
    mu_res = reconstruct_mu_gradient(system, grid, anchors)
    return MultiSourceResult(system=system, mu_result=mu_res, per_pole=datasets)


def scenario_coefficients(name: str, domain: DomainSpec, grid: Grid) -> CoefficientPair:
    return CoefficientPair.from_scenario(grid, get_scenario(name, domain))


def sup_rel_err(rec: np.ndarray, tru: np.ndarray, mask) -> float:
    m = mask & np.isfinite(rec) & np.isfinite(tru)
    if not m.any():
        return math.nan
    return float(np.max(np.abs(rec[m] - tru[m])) / np.max(np.abs(tru[m])))
