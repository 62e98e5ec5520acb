"""Reconstruction of mu by integrating along characteristics of the
data-derived vector field, plus the multi-pole gradient-system variant.

For a complex data pair (d1, d2) the field

    beta_d = chi (d1 grad d2 - d2 grad d1),   chi = exp(-2 i psi / h)
    gamma_d = -(1/2) chi (d1 lap d2 - d2 lap d1)

annihilates mu: beta_d . grad mu + gamma_d mu = 0. With well-chosen
high-frequency illuminations the normalized field beta = (h/2) beta_d is
nearly radial toward the pole, so its integral curves leave the trusted
region through the front arc where mu = d/g is known, and

    mu(x) = mu0(x_plus) * exp( + integral of gamma along the curve ).

(The exponent sign follows from d mu/dt = beta . grad mu = -gamma mu along
the flow; integrating from x to the exit point picks up +gamma.)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.ndimage import binary_dilation, distance_transform_edt

from .cgo import CGOConfig, build_phases
from .domain import BoundarySegmentation, Grid, TrustedRegion
from .elliptic import gradient_array, laplacian_array
from .errors import (
    BoundaryDataError,
    ConfigError,
    CoverageError,
    DegenerateFieldError,
    PreconditionError,
)
from .fields import ScalarField
from .forward import InternalDataSet

_STATUS = {"running": -1, "exited_front": 0, "exited_elsewhere": 1, "max_time": 2,
           "stuck": 3}
_STATUS_NAME = {v: k for k, v in _STATUS.items()}


# ---------------------------------------------------------------------------
# transport field
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TransportField:
    """Normalized transport pair (beta, gamma) with the branch that drives
    the flow and the measured radial-alignment diagnostics."""

    grid: Grid
    trusted: TrustedRegion
    beta: np.ndarray            # (nx, ny, 2) complex
    gamma: np.ndarray           # (nx, ny) complex
    branch: str                 # "real_part" or "imag_part"
    chi_used: str
    h: float
    x0: tuple
    flatness: dict
    min_branch_modulus: float
    min_other_modulus: float
    meta: dict = field(default_factory=dict)

    @property
    def branch_vec(self):
        return self.beta.real if self.branch == "real_part" else self.beta.imag

    @property
    def branch_gamma(self):
        return self.gamma.real if self.branch == "real_part" else self.gamma.imag

    def summary(self):
        return {"branch": self.branch, "chi": self.chi_used, "h": self.h,
                "flatness": self.flatness,
                "min_branch_modulus": self.min_branch_modulus,
                "eta": self.trusted.eta}


def _radial_angle(vec, nodes, x0, mask):
    """Angle between the branch field and the direction toward the pole."""
    d = np.asarray(x0, dtype=float) - nodes
    dn = np.linalg.norm(d, axis=-1)
    vn = np.linalg.norm(vec, axis=-1)
    cosang = np.einsum("...k,...k->...", vec, d) / np.maximum(dn * vn, 1e-300)
    ang = np.arccos(np.clip(cosang, -1.0, 1.0))
    return ang[mask & (vn > 0)]


def build_transport_field(data: InternalDataSet, cfg: CGOConfig, grid: Grid,
                          trusted: TrustedRegion, chi: str = "cgo",
                          truth_mu: ScalarField | None = None) -> TransportField:
    """Assemble beta, gamma from a complex data pair and pick the flow branch.

    Data derivatives use 4th-order central differences where the stencil
    fits, 2nd-order otherwise, and one-sided formulas with the measured
    boundary traces next to the boundary. Refuses (degenerate-field error)
    when the selected branch loses a uniform lower bound on the trusted
    region.
    """
    if len(data.d) != 2:
        raise ConfigError("transport field needs exactly two complex data fields")
    c0, c1 = data.illum.configs
    if not (c0.matches(c1) and c0.matches(cfg)):
        raise ConfigError("data pair and config must share x0, omega and h")

    d1, d2 = data.d[0].values, data.d[1].values
    g1 = gradient_array(d1, grid, crossing_values=data.traces[0])
    g2 = gradient_array(d2, grid, crossing_values=data.traces[1])
    l1 = laplacian_array(d1, grid, crossing_values=data.traces[0])
    l2 = laplacian_array(d2, grid, crossing_values=data.traces[1])

    if chi == "cgo":
        phases = build_phases(cfg, grid)
        chi_vals = np.exp(-2j * phases.psi.values / cfg.h)
        chi_desc = "exp(-2i psi/h)"
    elif chi == "one":
        chi_vals = np.ones_like(d1)
        chi_desc = "1"
    else:
        raise ConfigError(f"unknown chi selector {chi!r}")

    beta_d = chi_vals[..., None] * (d1[..., None] * g2 - d2[..., None] * g1)
    gamma_d = -0.5 * chi_vals * (d1 * l2 - d2 * l1)
    beta = 0.5 * cfg.h * beta_d
    gamma = 0.5 * cfg.h * gamma_d

    tmask = trusted.mask
    re_mod = np.linalg.norm(beta.real, axis=-1)
    im_mod = np.linalg.norm(beta.imag, axis=-1)
    if not (np.isfinite(re_mod[tmask]).all() and np.isfinite(gamma[tmask]).all()):
        raise ConfigError("transport field not finite on the trusted region")
    min_re, min_im = float(re_mod[tmask].min()), float(im_mod[tmask].min())
    branch = "real_part" if min_re >= min_im else "imag_part"
    min_branch = min_re if branch == "real_part" else min_im
    min_other = min_im if branch == "real_part" else min_re

    vec = beta.real if branch == "real_part" else beta.imag
    max_branch = float(np.linalg.norm(vec, axis=-1)[tmask].max())
    if max_branch <= 0 or min_branch / max_branch < 1e-5:
        raise DegenerateFieldError(
            f"selected branch of beta vanishes on the trusted region "
            f"(min {min_branch:.3e}, max {max_branch:.3e})")

    ang = _radial_angle(vec, grid.nodes, cfg.x0, tmask)
    flat = {"sup": float(np.max(ang)), "p95": float(np.percentile(ang, 95)),
            "median": float(np.median(ang))}
    meta = {}
    if truth_mu is not None:
        nodes = grid.nodes
        dvec = np.asarray(cfg.x0) - nodes
        r2 = np.sum(dvec ** 2, axis=-1)
        ref = truth_mu.values[..., None] ** 2 * dvec / r2[..., None]
        dev = np.linalg.norm(beta.real - ref, axis=-1)
        meta["flatness_vs_truth"] = float(np.nanmax(dev[tmask])
                                          / np.nanmax(np.linalg.norm(ref, axis=-1)[tmask]))
    return TransportField(grid=grid, trusted=trusted, beta=beta, gamma=gamma,
                          branch=branch, chi_used=chi_desc, h=cfg.h, x0=tuple(cfg.x0),
                          flatness=flat, min_branch_modulus=min_branch,
                          min_other_modulus=min_other, meta=meta)


# ---------------------------------------------------------------------------
# characteristic tracing
# ---------------------------------------------------------------------------

@dataclass
class TraceOptions:
    pos_tol_factor: float = 1e-9    # absolute position tolerance = factor * diameter
    gamma_tol: float = 3e-9         # absolute tolerance on the gamma integral
    step_cell_fraction: float = 0.75
    boundary_approach: float = 0.4  # step length cap as a fraction of dist(x, boundary)
    max_steps: int = 60000
    bisect_iters: int = 52
    safety_time: float = 12.0       # max_time = safety * diameter / min branch speed
    front_g_threshold: float = 1e-6


@dataclass
class FlowTrace:
    start: tuple
    status: str
    x_plus: tuple | None
    t_plus: float | None
    s_plus: float | None
    gamma_integral: complex
    path: np.ndarray | None = None


class _Sampler:
    """C2 sampler (interpolating cubic B-splines) of the flow branch and
    gamma, with nearest-fill extension outside the valid set.

    Smooth interpolation matters: with a merely continuous interpolant the
    exit map inherits cell-scale kinks that later difference stencils
    amplify. The field is normalized by its largest modulus so that
    rescaling the data reparameterizes the internal flow time only;
    reported times are mapped back through ``scale``.
    """

    def __init__(self, grid: Grid, vec: np.ndarray, gamma: np.ndarray):
        from scipy.ndimage import spline_filter

        comp = np.stack([vec[..., 0], vec[..., 1], gamma.real, gamma.imag], axis=-1)
        good = np.isfinite(comp).all(axis=-1)
        if not good.any():
            raise ConfigError("flow field has no finite nodes")
        speed = np.hypot(comp[..., 0], comp[..., 1])
        self.scale = float(np.max(speed[good]))
        if self.scale <= 0:
            raise ConfigError("flow field vanishes everywhere")
        comp = comp / self.scale
        _, idx = distance_transform_edt(~good, return_indices=True)
        filled = comp[idx[0], idx[1]]
        self.coef = [spline_filter(np.ascontiguousarray(filled[..., k]), order=3,
                                   mode="nearest")
                     for k in range(4)]
        self.grid = grid

    def __call__(self, pts):
        from scipy.ndimage import map_coordinates

        g = self.grid
        fx = np.clip((pts[:, 0] - g.ox) / g.dx, 0.0, g.nx - 1.0)
        fy = np.clip((pts[:, 1] - g.oy) / g.dy, 0.0, g.ny - 1.0)
        coords = np.stack([fx, fy])
        out = np.empty((len(pts), 4))
        for k in range(4):
            out[:, k] = map_coordinates(self.coef[k], coords, order=3,
                                        prefilter=False, mode="nearest")
        return out


def _rk4(sampler, y, dt):
    """One classical step of the augmented state (x, y, Re I, Im I)."""
    def f(state):
        return sampler(state[:, :2])

    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _advance(sampler, y, dt):
    half = _rk4(sampler, y, 0.5 * dt)
    return _rk4(sampler, half, 0.5 * dt)


def _classify_exit(domain, seg, pts):
    s = np.atleast_1d(domain.boundary_param(pts))
    proj = domain.boundary_point(s)
    n = domain.normal_at(s)
    x0 = np.asarray(seg.x0)
    front = ((x0[0] - proj[..., 0]) * n[..., 0]
             + (x0[1] - proj[..., 1]) * n[..., 1]) > 0
    in_gamma = seg.gamma_flag_at(s)
    return s, proj, front & in_gamma


def trace_batch(sampler: _Sampler, starts: np.ndarray, domain, seg,
                min_speed: float, opts: TraceOptions | None = None,
                record_path: bool = False):
    """Trace all starts through the flow until they leave the domain.

    Classical RK4 with step-doubling adaptivity; the exit point is refined
    by bisection on the final step. Returns arrays keyed by start index.
    """
    opts = opts or TraceOptions()
    grid = sampler.grid
    diam = domain.diameter
    tol = opts.pos_tol_factor * diam
    cell = min(grid.dx, grid.dy)
    max_time = opts.safety_time * diam / max(min_speed / sampler.scale, 1e-300)

    n = len(starts)
    y = np.zeros((n, 4))
    y[:, :2] = starts
    t = np.zeros(n)
    status = np.full(n, _STATUS["running"], dtype=int)
    x_plus = np.full((n, 2), np.nan)
    s_plus = np.full(n, np.nan)
    t_plus = np.full(n, np.nan)
    gamma_int = np.zeros(n, dtype=complex)
    pend_y = np.zeros((n, 4))
    pend_dt = np.zeros(n)
    paths = [[starts[k].copy()] for k in range(n)] if record_path else None

    f0 = sampler(y[:, :2])
    speed0 = np.hypot(f0[:, 0], f0[:, 1])
    stuck = speed0 < 1e-14
    status[stuck] = _STATUS["stuck"]
    sd0 = np.abs(domain.signed_distance(starts))
    step_len0 = np.maximum(opts.step_cell_fraction * cell,
                           opts.boundary_approach * sd0)
    dt = step_len0 / np.maximum(speed0, 1e-300)

    PENDING = 9
    for _ in range(opts.max_steps):
        act = np.nonzero(status == _STATUS["running"])[0]
        if len(act) == 0:
            break
        ya = y[act]
        dta = dt[act][:, None]
        y_full = _rk4(sampler, ya, dta)
        y_half = _advance(sampler, ya, dta)
        err_pos = np.max(np.abs(y_full[:, :2] - y_half[:, :2]), axis=1)
        err_gam = np.max(np.abs(y_full[:, 2:] - y_half[:, 2:]), axis=1)
        # normalized error: 1.0 sits exactly at the acceptance threshold
        err = np.maximum(err_pos / tol, err_gam / opts.gamma_tol)

        ok = err <= 1.0
        rej = act[~ok]
        dt[rej] *= np.maximum(0.2, 0.9 / np.maximum(err[~ok], 1e-300) ** 0.25)

        acc = act[ok]
        if len(acc) == 0:
            continue
        y_new = y_half[ok]
        sd = domain.signed_distance(y_new[:, :2])
        exiting = sd >= 0.0

        inside = acc[~exiting]
        y[inside] = y_new[~exiting]
        t[inside] += dt[inside]
        if record_path:
            for k in inside:
                paths[k].append(y[k, :2].copy())
        over = inside[t[inside] > max_time]
        status[over] = _STATUS["max_time"]

        # grow accepted steps; the step length is capped by a fraction of the
        # distance to the boundary (never skipping it) with a cell-size floor
        fnew = sampler(y[inside, :2])
        spd = np.maximum(np.hypot(fnew[:, 0], fnew[:, 1]), 1e-300)
        step_cap = np.maximum(opts.step_cell_fraction * cell,
                              opts.boundary_approach * np.abs(sd[~exiting]))
        grow = 0.9 / np.maximum(err[ok][~exiting], 1e-300) ** 0.25
        dt[inside] = np.minimum(dt[inside] * np.minimum(grow, 4.0), step_cap / spd)

        # park exiting traces; the exit point is refined in one batch below
        exit_idx = acc[exiting]
        if len(exit_idx):
            pend_y[exit_idx] = y[exit_idx]
            pend_dt[exit_idx] = dt[exit_idx]
            status[exit_idx] = PENDING
    status[status == _STATUS["running"]] = _STATUS["max_time"]

    pend = np.nonzero(status == PENDING)[0]
    if len(pend):
        y0 = pend_y[pend]
        dte = pend_dt[pend][:, None]
        lo = np.zeros(len(pend))
        hi = np.ones(len(pend))
        for _ in range(opts.bisect_iters):
            mid = 0.5 * (lo + hi)
            ymid = _advance(sampler, y0, mid[:, None] * dte)
            ins = domain.signed_distance(ymid[:, :2]) < 0.0
            lo = np.where(ins, mid, lo)
            hi = np.where(ins, hi, mid)
        lam = 0.5 * (lo + hi)
        yend = _advance(sampler, y0, lam[:, None] * dte)
        se, proj, front_ok = _classify_exit(domain, seg, yend[:, :2])
        status[pend] = np.where(front_ok, _STATUS["exited_front"],
                                _STATUS["exited_elsewhere"])
        x_plus[pend] = proj
        s_plus[pend] = se
        t_plus[pend] = t[pend] + lam * pend_dt[pend]
        gamma_int[pend] = yend[:, 2] + 1j * yend[:, 3]
        if record_path:
            for m, k in enumerate(pend):
                paths[k].append(proj[m].copy())

    return {"status": status, "x_plus": x_plus, "s_plus": s_plus,
            "t_plus": t_plus / sampler.scale,
            "gamma_integral": gamma_int,
            "paths": [np.array(p) for p in paths] if record_path else None}


def trace_characteristic(tfield: TransportField, start, seg: BoundarySegmentation,
                         opts: TraceOptions | None = None) -> FlowTrace:
    """Trace a single characteristic from a trusted-region start point."""
    grid = tfield.grid
    start = np.asarray(start, dtype=float)
    ij = (int(round((start[0] - grid.ox) / grid.dx)),
          int(round((start[1] - grid.oy) / grid.dy)))
    if not (0 <= ij[0] < grid.nx and 0 <= ij[1] < grid.ny
            and tfield.trusted.mask[ij]):
        raise PreconditionError(f"start point {tuple(start)} is not in the trusted region")
    sampler = _Sampler(grid, tfield.branch_vec, tfield.gamma)
    res = trace_batch(sampler, start[None, :], grid.domain, seg,
                      tfield.min_branch_modulus, opts, record_path=True)
    k = 0
    return FlowTrace(start=tuple(start), status=_STATUS_NAME[res["status"][k]],
                     x_plus=(tuple(res["x_plus"][k]) if res["status"][k] == 0 else None),
                     t_plus=(float(res["t_plus"][k]) if res["status"][k] == 0 else None),
                     s_plus=(float(res["s_plus"][k]) if res["status"][k] == 0 else None),
                     gamma_integral=complex(res["gamma_integral"][k]),
                     path=res["paths"][k])


# ---------------------------------------------------------------------------
# mu reconstruction
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MuResult:
    mu: ScalarField
    coverage: float
    diagnostics: dict
    mu0_reader: object = None

    def summary(self):
        out = {"coverage": self.coverage}
        out.update({k: v for k, v in self.diagnostics.items()
                    if np.isscalar(v) or isinstance(v, (int, float, str))})
        return out


def _mu0_reader(data: InternalDataSet, opts: TraceOptions):
    """Boundary read of mu0 = d/g averaged over traces, weighted by |g|^2.

    The measured trace oscillates at the illumination frequency, so the
    ratio d/g is formed at the boundary nodes first (where g is known
    exactly) and the smooth ratio is splined, not the raw trace.
    """
    from scipy.interpolate import CubicSpline

    illum = data.illum
    seg = illum.seg
    per = seg.perimeter
    gmax = 0.0
    for j in range(len(illum)):
        gj = illum.traces[j][seg.in_front]
        if len(gj):
            gmax = max(gmax, float(np.abs(gj).max()))
    thresh = opts.front_g_threshold * gmax

    ratio_splines = []
    for j in range(len(illum)):
        gj = illum.traces[j]
        usable = np.abs(gj) > thresh
        vals = np.where(usable, data.traces[j] / np.where(usable, gj, 1.0), np.nan)
        # fill unusable stretches by linear interpolation so the periodic
        # spline stays tame; those stretches are never evaluated
        good = np.isfinite(vals)
        if not good.any():
            ratio_splines.append(None)
            continue
        sg = seg.s[good]
        vg = vals[good]
        all_vals = vals.copy()
        bad_idx = np.nonzero(~good)[0]
        if len(bad_idx):
            all_vals[bad_idx] = (np.interp(seg.s[bad_idx], sg, vg.real, period=per)
                                 + 1j * np.interp(seg.s[bad_idx], sg, vg.imag, period=per))
        s_nodes = np.concatenate([seg.s, [seg.s[0] + per]])
        v_nodes = np.concatenate([all_vals, [all_vals[0]]])
        ratio_splines.append(CubicSpline(s_nodes, v_nodes, bc_type="periodic"))

    def read(pts, s):
        s = np.mod(s, per)
        num = np.zeros(len(s), dtype=complex)
        den = np.zeros(len(s))
        for j in range(len(illum)):
            if ratio_splines[j] is None:
                continue
            gj = illum.g_at(j, pts, s)
            w = np.abs(gj) ** 2
            usable = np.abs(gj) > thresh
            num += np.where(usable, w * ratio_splines[j](s), 0.0)
            den += np.where(usable, w, 0.0)
        bad = den <= 0.0
        mu0 = np.where(bad, np.nan, num / np.where(bad, 1.0, den))
        return mu0, bad

    return read


def reconstruct_mu(tfield: TransportField, data: InternalDataSet,
                   illum, seg: BoundarySegmentation, trusted: TrustedRegion,
                   opts: TraceOptions | None = None,
                   allow_partial: bool = False) -> MuResult:
    """Integrate mu along every trusted-region characteristic.

    Reconstructs on the trusted mask dilated by two cells (the extra ring
    feeds later difference stencils); coverage is reported over the trusted
    mask proper and must be complete unless ``allow_partial``.
    """
    opts = opts or TraceOptions()
    grid = tfield.grid
    recon = binary_dilation(trusted.mask, iterations=2) & grid.interior
    starts = grid.nodes[recon]
    sampler = _Sampler(grid, tfield.branch_vec, tfield.gamma)
    res = trace_batch(sampler, starts, grid.domain, seg,
                      tfield.min_branch_modulus, opts)

    reader = _mu0_reader(data, opts)
    ok = res["status"] == _STATUS["exited_front"]
    mu_flat = np.full(len(starts), np.nan)
    imag_res = np.full(len(starts), np.nan)
    n_bad_reads = 0
    if ok.any():
        mu0, bad = reader(res["x_plus"][ok], res["s_plus"][ok])
        n_bad_reads = int(bad.sum())
        value = mu0 * np.exp(res["gamma_integral"][ok])
        mu_ok = np.where(bad, np.nan, value.real)
        with np.errstate(invalid="ignore", divide="ignore"):
            imag_ok = np.abs(value.imag) / np.maximum(np.abs(value), 1e-300)
        mu_flat[np.nonzero(ok)[0]] = mu_ok
        imag_res[np.nonzero(ok)[0]] = np.where(bad, np.nan, imag_ok)

    vals = np.full((grid.nx, grid.ny), np.nan)
    vals[recon] = mu_flat
    covered = np.isfinite(vals) & trusted.mask
    coverage = float(covered.sum()) / float(trusted.mask.sum())

    status_counts = {name: int((res["status"] == code).sum())
                     for name, code in _STATUS.items() if name != "running"}
    diagnostics = {
        "imag_residue_max": float(np.nanmax(imag_res)) if np.isfinite(imag_res).any() else 0.0,
        "imag_residue_mean": float(np.nanmean(imag_res)) if np.isfinite(imag_res).any() else 0.0,
        "t_plus_max": float(np.nanmax(res["t_plus"])) if np.isfinite(res["t_plus"]).any() else np.nan,
        "status_counts": status_counts,
        "mu_min": float(np.nanmin(vals)) if np.isfinite(vals).any() else np.nan,
    }
    if coverage < 1.0 and not allow_partial:
        unc = [tuple(p) for p in grid.nodes[trusted.mask & ~covered]][:50]
        n_missed = int((trusted.mask & ~covered).sum())
        if n_bad_reads >= n_missed and ok.any():
            raise BoundaryDataError(
                f"illumination magnitude below threshold at {n_bad_reads} exit "
                f"points; coverage {coverage:.4f}", uncovered=unc)
        raise CoverageError(
            f"characteristic coverage {coverage:.4f} < 1 on the trusted region "
            f"({status_counts})", uncovered=unc)
    if not np.isfinite(vals).any():
        raise BoundaryDataError("no usable boundary data at any exit point")
    mu = ScalarField(grid, vals)
    mu.meta["coverage"] = coverage
    return MuResult(mu=mu, coverage=coverage, diagnostics=diagnostics,
                    mu0_reader=reader)


# ---------------------------------------------------------------------------
# multi-pole gradient system
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GradientSystem:
    Lambda: np.ndarray        # (nx, ny, 2) real
    mask: np.ndarray
    min_abs_det: float
    min_normalized_det: float
    fields: list


def build_gradient_system(datasets, grid: Grid, trusteds, chi: str = "cgo",
                          det_threshold: float = 1e-3) -> GradientSystem:
    """Stack per-pole transport rows into grad(mu) + Lambda mu = 0.

    Needs one dataset per pole (two in 2D) with a common h; the poles must
    sit on a line outside the convex hull so the rows stay independent on
    the common trusted mask.
    """
    if len(datasets) != 2:
        raise ConfigError("two poles are required in two dimensions")
    tfs = []
    for data, tr in zip(datasets, trusteds):
        cfg = data.illum.configs[0]
        tfs.append(build_transport_field(data, cfg, grid, tr, chi=chi))
    if not math.isclose(tfs[0].h, tfs[1].h):
        raise ConfigError("datasets must share the semiclassical parameter")
    mask = trusteds[0].mask & trusteds[1].mask
    if not mask.any():
        raise ConfigError("trusted regions of the poles do not overlap")

    b1 = tfs[0].branch_vec
    b2 = tfs[1].branch_vec
    g1 = tfs[0].branch_gamma
    g2 = tfs[1].branch_gamma
    det = b1[..., 0] * b2[..., 1] - b1[..., 1] * b2[..., 0]
    norm = (np.linalg.norm(b1, axis=-1) * np.linalg.norm(b2, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        ndet = np.abs(det) / np.maximum(norm, 1e-300)
    min_det = float(np.abs(det)[mask].min())
    min_ndet = float(ndet[mask].min())
    if min_ndet < det_threshold:
        raise DegenerateFieldError(
            f"pole directions nearly parallel somewhere on the trusted region "
            f"(normalized det {min_ndet:.3e})")
    lam = np.full(grid.nodes.shape, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam[..., 0] = (g1 * b2[..., 1] - g2 * b1[..., 1]) / det
        lam[..., 1] = (g2 * b1[..., 0] - g1 * b2[..., 0]) / det
    lam[~mask] = np.nan
    return GradientSystem(Lambda=lam, mask=mask, min_abs_det=min_det,
                          min_normalized_det=min_ndet, fields=tfs)


def gradient_anchors(data: InternalDataSet, mask, opts: TraceOptions | None = None):
    """Anchor nodes for the gradient solve: masked nodes next to the front
    arc with mu0 read from the boundary, offset-corrected via Lambda later."""
    opts = opts or TraceOptions()
    seg = data.illum.seg
    grid = data.grid
    reader = _mu0_reader(data, opts)
    front_pts = seg.points[seg.in_front & (seg.front_distance(seg.s) == 0.0)]
    front_s = seg.s[seg.in_front]
    from scipy.spatial import cKDTree
    tree = cKDTree(seg.points[seg.in_front])
    nodes = grid.nodes[mask]
    dist, nearest = tree.query(nodes, k=1)
    close = dist <= 1.5 * max(grid.dx, grid.dy)
    if not close.any():
        return []
    idx_nodes = np.nonzero(mask)
    anchors = []
    sel = np.nonzero(close)[0]
    pts = seg.points[seg.in_front][nearest[sel]]
    s = front_s[nearest[sel]]
    mu0, bad = reader(pts, s)
    for m, k in enumerate(sel):
        if bad[m] or not np.isfinite(mu0[m].real) or mu0[m].real <= 0:
            continue
        i, j = idx_nodes[0][k], idx_nodes[1][k]
        offset = grid.nodes[i, j] - pts[m]
        anchors.append((i, j, float(mu0[m].real), offset))
    return anchors


def reconstruct_mu_gradient(system: GradientSystem, grid: Grid, anchors,
                            curl_flag_threshold: float = 1.0) -> MuResult:
    """Least-squares solution of grad(log mu) = -Lambda with boundary anchors.

    Path independent by construction; the curl of Lambda is recorded as a
    consistency diagnostic and flagged when it is large relative to the
    field scale.
    """
    mask = system.mask
    if not anchors:
        raise BoundaryDataError("no usable boundary anchors for the gradient solve")
    idx = -np.ones(mask.shape, dtype=np.int64)
    idx[mask] = np.arange(int(mask.sum()))
    K = int(mask.sum())
    rows, cols, vals, rhs = [], [], [], []
    lam = system.Lambda
    r = 0
    for axis, (si, sj, h) in enumerate(((1, 0, grid.dx), (0, 1, grid.dy))):
        a = np.array(np.nonzero(mask & np.roll(mask, (-si, -sj), axis=(0, 1))))
        # drop pairs that wrap around the array edge
        keep = (a[0] + si < grid.nx) & (a[1] + sj < grid.ny)
        a = a[:, keep]
        ia = idx[a[0], a[1]]
        ib = idx[a[0] + si, a[1] + sj]
        ok = (ia >= 0) & (ib >= 0)
        ia, ib = ia[ok], ib[ok]
        aa = (a[0][ok], a[1][ok])
        bb = (a[0][ok] + si, a[1][ok] + sj)
        lam_mid = 0.5 * (lam[aa][:, axis] + lam[bb][:, axis])
        n_e = len(ia)
        rows.extend([np.arange(r, r + n_e), np.arange(r, r + n_e)])
        cols.extend([ib, ia])
        vals.extend([np.full(n_e, 1.0 / h), np.full(n_e, -1.0 / h)])
        rhs.append(-lam_mid)
        r += n_e
    for (i, j, mu0, offset) in anchors:
        corr = -(lam[i, j, 0] * offset[0] + lam[i, j, 1] * offset[1])
        rows.append(np.array([r]))
        cols.append(np.array([idx[i, j]]))
        vals.append(np.array([1.0]))
        rhs.append(np.array([math.log(mu0) + corr]))
        r += 1
    E = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))), shape=(r, K))
    b = np.concatenate(rhs)
    AtA = (E.T @ E).tocsc()
    Atb = E.T @ b
    logmu = spla.splu(AtA).solve(Atb)

    vals_out = np.full(mask.shape, np.nan)
    vals_out[mask] = np.exp(logmu)
    mu = ScalarField(grid, vals_out)

    # curl diagnostic on interior of the mask
    cx = np.full(mask.shape, np.nan)
    cx[1:-1, 1:-1] = ((lam[2:, 1:-1, 1] - lam[:-2, 1:-1, 1]) / (2 * grid.dx)
                      - (lam[1:-1, 2:, 0] - lam[1:-1, :-2, 0]) / (2 * grid.dy))
    curl = cx[mask & np.isfinite(cx)]
    lam_scale = float(np.nanmax(np.linalg.norm(lam, axis=-1))) or 1.0
    curl_sup = float(np.max(np.abs(curl))) if len(curl) else 0.0
    diam = grid.domain.diameter if grid.domain is not None else 1.0
    flagged = bool(curl_sup * diam / max(lam_scale, 1e-300) > curl_flag_threshold)
    diagnostics = {"curl_sup": curl_sup, "curl_flagged": flagged,
                   "min_abs_det": system.min_abs_det,
                   "min_normalized_det": system.min_normalized_det,
                   "anchor_count": len(anchors),
                   "mu_min": float(np.nanmin(vals_out))}
    return MuResult(mu=mu, coverage=1.0, diagnostics=diagnostics)
