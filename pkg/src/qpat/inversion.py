"""Recovery of the potential q and inversion back to (D, sigma_a).

With mu known, u_j = d_j / mu are discrete solutions of (lap + q) u = 0, so
q comes from a pointwise least-squares over the illuminations. sqrt(D) then
solves (lap + q) w = -mu with Dirichlet data from the known boundary values
of D, and sigma_a = mu * sqrt(D).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt

from .elliptic import LinearSolveOptions, gradient_array, laplacian_array, solve_inhomogeneous
from .errors import ConfigError, PositivityError, UnresolvableNodeError
from .fields import ScalarField
from .forward import InternalDataSet
from .transport import MuResult


def recover_q(mu: MuResult, data: InternalDataSet,
              weight_threshold: float = 1e-9,
              allow_partial: bool = False) -> ScalarField:
    """Pointwise least-squares potential from all illuminations.

    q = -sum_j Re(conj(u_j) lap u_j) / sum_j |u_j|^2 with u_j = d_j / mu.
    The |u_j|^2 weights guard against zeros of individual solutions; nodes
    where the total weight collapses are refused.
    """
    grid = data.grid
    mu_vals = mu.mu.values
    if np.nanmin(mu_vals) <= 0:
        raise ConfigError("recover_q requires a positive mu")
    seg = data.illum.seg

    # u trace on the boundary: d/g read where the illumination is usable
    mu0_tr, bad_tr = mu.mu0_reader(seg.points, seg.s) if mu.mu0_reader else (None, None)

    num = np.zeros((grid.nx, grid.ny))
    den = np.zeros((grid.nx, grid.ny))
    support = None
    for j, fld in enumerate(data.d):
        with np.errstate(invalid="ignore", divide="ignore"):
            u = fld.values / mu_vals
        if mu0_tr is not None:
            with np.errstate(invalid="ignore", divide="ignore"):
                u_tr = np.where(bad_tr, np.nan, data.traces[j] / mu0_tr)
        else:
            u_tr = None
        lap = laplacian_array(u, grid, crossing_values=u_tr)
        good = np.isfinite(u) & np.isfinite(lap)
        support = good if support is None else (support & good)
        num += np.where(good, np.real(np.conj(u) * lap), 0.0)
        den += np.where(good, np.abs(u) ** 2, 0.0)

    core = support & grid.interior
    scale = float(den[core].max()) if core.any() else 0.0
    weak = core & (den < weight_threshold * scale)
    if weak.any() and not allow_partial:
        raise UnresolvableNodeError(
            f"{int(weak.sum())} nodes have vanishing illumination weight; "
            "q cannot be resolved there")
    vals = np.full((grid.nx, grid.ny), np.nan)
    ok = core & ~weak
    vals[ok] = -num[ok] / den[ok]
    out = ScalarField(grid, vals)
    out.meta["resolved_fraction"] = float(ok.sum()) / max(int(core.sum()), 1)
    return out


def recover_sqrtD(q: ScalarField, mu: ScalarField, D_boundary,
                  opts: LinearSolveOptions | None = None,
                  mode: str = "exact", region=None, cut_values=None) -> ScalarField:
    """Solve (lap + q) w = -mu for w = sqrt(D) and check positivity.

    STRICT mode solves on ``region`` only and needs Dirichlet data on its
    interior cut (``cut_values``, per-node sqrt(D) samples just outside the
    region); EXACT mode extends (q, mu) to the whole domain by nearest
    values first. ``D_boundary`` holds sqrt(D) at the boundary crossings.
    """
    opts = opts or LinearSolveOptions()
    grid = q.grid
    if mode not in ("strict", "exact"):
        raise ConfigError(f"unknown inversion mode {mode!r}")
    g = np.asarray(D_boundary, dtype=float)
    if mode == "strict":
        if region is None:
            region = q.support & mu.support
        if cut_values is None:
            # a region that touches only the true boundary needs no cut data
            ring = _cut_ring(region, grid)
            if ring.any():
                raise ConfigError(
                    "strict mode requires cut_values on the interior cut of the region")
            cut_values = np.full((grid.nx, grid.ny), np.nan)
        q_use, mu_use = q, mu
    else:
        region = grid.interior
        q_use = ScalarField(grid, _nearest_fill(q.values, grid))
        mu_use = ScalarField(grid, _nearest_fill(mu.values, grid))
        cut_values = None
    rhs = ScalarField(grid, np.where(region, -mu_use.values, 0.0))
    w = solve_inhomogeneous(q_use, rhs, g, opts, region=region, cut_values=cut_values)
    wmin = float(np.nanmin(w.values))
    if wmin <= 0.0:
        raise PositivityError(
            f"recovered sqrt(D) dips to {wmin:.3e}; coefficient hypothesis violated")
    w.meta["mode"] = mode
    w.meta["min_value"] = wmin
    return w


def _cut_ring(region, grid):
    """Nodes outside the region but interior, adjacent to the region."""
    from scipy.ndimage import binary_dilation
    return binary_dilation(region) & grid.interior & ~region


def _nearest_fill(values, grid):
    good = np.isfinite(values)
    if not good.any():
        raise ConfigError("cannot extend an empty field")
    _, idx = distance_transform_edt(~good, return_indices=True)
    out = values[idx[0], idx[1]]
    out[~grid.interior] = np.nan
    return out


@dataclass(eq=False)
class ReconstructionReport:
    """Recovered fields with residual diagnostics and errors vs. the truth."""

    mu: ScalarField
    q: ScalarField
    sqrtD: ScalarField
    sigma_a: ScalarField
    residuals: dict
    errors: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self):
        out = {"residuals": self.residuals, "meta": self.meta}
        if self.errors is not None:
            out["errors"] = self.errors
        return out


def _norms(diff, truth_vals, grad_diff, grad_truth, mask):
    sup = float(np.nanmax(np.abs(diff[mask])))
    ref = float(np.nanmax(np.abs(truth_vals[mask])))
    g_sup = float(np.nanmax(np.abs(grad_diff[mask]))) if grad_diff is not None else np.nan
    g_ref = float(np.nanmax(np.abs(grad_truth[mask]))) if grad_truth is not None else np.nan
    return {
        "sup": sup,
        "sup_rel": sup / ref if ref > 0 else np.nan,
        "c1": sup + g_sup,
        "c1_rel": (sup + g_sup) / (ref + g_ref) if ref + g_ref > 0 else np.nan,
    }


def assemble_report(mu: "MuResult | ScalarField", q: ScalarField, sqrtD: ScalarField,
                    ground_truth=None, region=None) -> ReconstructionReport:
    """Combine the recovered fields, compute residuals and optional errors.

    ``ground_truth`` is a CoefficientPair; errors are sup and discrete-C1
    norms over ``region`` (default: common support of the inputs).
    """
    mu_field = mu.mu if isinstance(mu, MuResult) else mu
    grid = mu_field.grid
    sigma = ScalarField(grid, mu_field.values * sqrtD.values)

    common = mu_field.support & q.support & sqrtD.support
    if region is not None:
        common &= region

    # the Liouville identity re-evaluated with the same discrete operator
    lapw = laplacian_array(sqrtD.values, grid, crossing_values=None)
    # second-order core only (4th-order entries would not match the solver)
    lapw2 = np.full_like(lapw, np.nan)
    core = binary_erosion(sqrtD.support)
    v = sqrtD.values
    lapw2[1:-1, 1:-1] = ((v[2:, 1:-1] - 2 * v[1:-1, 1:-1] + v[:-2, 1:-1]) / grid.dx ** 2
                         + (v[1:-1, 2:] - 2 * v[1:-1, 1:-1] + v[1:-1, :-2]) / grid.dy ** 2)
    resid = -lapw2 - q.values * v - mu_field.values
    rmask = core & np.isfinite(resid) & common
    mu_scale = float(np.nanmax(np.abs(mu_field.values[common]))) if common.any() else 1.0
    liou_res = float(np.nanmax(np.abs(resid[rmask]))) / mu_scale if rmask.any() else np.nan

    residuals = {
        "liouville_residual": liou_res,
        "positivity_margins": {
            "mu_min": float(np.nanmin(mu_field.values[common])) if common.any() else np.nan,
            "sqrtD_min": float(np.nanmin(sqrtD.values[common])) if common.any() else np.nan,
            "sigma_a_min": float(np.nanmin(sigma.values[common])) if common.any() else np.nan,
        },
    }
    if isinstance(mu, MuResult):
        residuals["coverage"] = mu.coverage
        residuals["imag_residue_max"] = mu.diagnostics.get("imag_residue_max")

    errors = None
    if ground_truth is not None:
        sqrtD_true = np.sqrt(ground_truth.D.values)
        from .forward import liouville_forward
        q_true, mu_true = liouville_forward(ground_truth)
        sig_true = ground_truth.sigma_a.values
        errors = {}
        for name, rec, tru in (("mu", mu_field.values, mu_true.values),
                               ("q", q.values, q_true.values),
                               ("sqrtD", sqrtD.values, sqrtD_true),
                               ("sigma_a", sigma.values, sig_true)):
            diff = rec - tru
            gd = gradient_array(diff, grid)
            gt = gradient_array(tru, grid)
            m = common & np.isfinite(diff)
            gmask = m & np.isfinite(gd).all(axis=-1) & np.isfinite(gt).all(axis=-1)
            errors[name] = _norms(diff, tru,
                                  np.linalg.norm(gd, axis=-1) if gmask.any() else None,
                                  np.linalg.norm(gt, axis=-1) if gmask.any() else None,
                                  m if not gmask.any() else gmask)
    return ReconstructionReport(mu=mu_field, q=q, sqrtD=sqrtD, sigma_a=sigma,
                                residuals=residuals, errors=errors,
                                meta={"region_nodes": int(common.sum())})
