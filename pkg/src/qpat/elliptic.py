"""Discrete elliptic operators and Dirichlet solvers on masked grids.

Interior nodes use the standard 5-point stencil; nodes whose stencil arms
cross the boundary use Shortley-Weller corrections with Dirichlet values at
the exact grid-line/boundary intersections (the crossing set of
``BoundaryGeometry``). The variable-coefficient operator -div(D grad u)
uses face-averaged harmonic-mean fluxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import Grid
from .errors import ConfigError, SolverError, StencilError, ZeroEigenvalueError
from .fields import ComplexField, ScalarField

_DIRS = ((1, 0), (-1, 0), (0, 1), (0, -1))  # +x, -x, +y, -y
_MIN_ARM = 1e-3  # arms shorter than this glue the node to the boundary value


@dataclass
class LinearSolveOptions:
    method: str = "sparse_direct"
    tol: float = 1e-10
    max_iter: int | None = None
    cond_limit: float = 1e12

    def __post_init__(self):
        if self.method not in ("sparse_direct", "conjugate_residual"):
            raise ConfigError(f"unknown solver method {self.method!r}")
        if not (0.0 < self.tol <= 1e-4):
            raise ConfigError("solver tol must lie in (0, 1e-4]")


@dataclass(eq=False)
class DirichletProblem:
    """Dirichlet problem for either the diffusion or the Schroedinger operator.

    ``boundary_values`` are complex samples at the boundary crossings in arc
    order. For the diffusion kind, optional ``D_crossings`` provides the
    diffusion coefficient at those crossings (falls back to the adjacent
    node value).
    """

    grid: Grid
    kind: str
    boundary_values: np.ndarray
    D: ScalarField | None = None
    sigma_a: ScalarField | None = None
    q: ScalarField | None = None
    D_crossings: np.ndarray | None = None
    d0: float = 0.0

    @classmethod
    def diffusion(cls, D: ScalarField, sigma_a: ScalarField, boundary_values,
                  D_crossings=None):
        d0 = float(np.nanmin(D.values))
        if not d0 > 0.0:
            raise ConfigError("diffusion coefficient must be positive")
        if float(np.nanmin(sigma_a.values)) < 0.0:
            raise ConfigError("absorption must be non-negative")
        return cls(grid=D.grid, kind="diffusion", boundary_values=np.asarray(boundary_values),
                   D=D, sigma_a=sigma_a, D_crossings=D_crossings, d0=d0)

    @classmethod
    def schroedinger(cls, q: ScalarField, boundary_values):
        return cls(grid=q.grid, kind="schroedinger",
                   boundary_values=np.asarray(boundary_values), q=q)


def _unknown_index(region):
    idx = -np.ones(region.shape, dtype=np.int64)
    idx[region] = np.arange(int(region.sum()))
    return idx


def _assemble(grid: Grid, region, *, q_vals=None, D_vals=None, sigma_vals=None,
              crossing_vals=None, cut_vals=None, D_cross=None):
    """Assemble the operator on the unknowns in ``region``.

    Returns (A, b_bnd, idx, glued) where the linear system is
    A u = f_interior + b_bnd, ``idx`` maps nodes to unknowns and ``glued``
    lists nodes eliminated onto boundary values (value stored separately).
    """
    bg = grid.bgeom
    nx, ny = grid.nx, grid.ny
    dx, dy = grid.dx, grid.dy
    diffusion = D_vals is not None

    if crossing_vals is None:
        crossing_vals = np.zeros(len(bg.points))
    crossing_vals = np.asarray(crossing_vals)
    cdtype = np.result_type(crossing_vals.dtype, np.float64)

    # nodes glued to the boundary: any crossing arm shorter than _MIN_ARM
    glue_val = np.zeros((nx, ny), dtype=cdtype)
    glued = np.zeros((nx, ny), dtype=bool)
    for d in range(4):
        short = region & (bg.arm_cross[d] >= 0) & (bg.arm_frac[d] < _MIN_ARM)
        glued |= short
        glue_val[short] = crossing_vals[bg.arm_cross[d][short]]

    unk = region & ~glued
    idx = _unknown_index(unk)
    K = int(unk.sum())
    if K == 0:
        raise SolverError("no unknowns in solve region")

    h = {0: dx, 1: dx, 2: dy, 3: dy}

    # fast path: all four arms full and all four neighbors unknown
    full = unk.copy()
    for d, (si, sj) in enumerate(_DIRS):
        nb = np.zeros((nx, ny), dtype=bool)
        lo_i, hi_i = max(0, -si), nx - max(0, si)
        lo_j, hi_j = max(0, -sj), ny - max(0, sj)
        nb[lo_i:hi_i, lo_j:hi_j] = unk[lo_i + si:hi_i + si, lo_j + sj:hi_j + sj]
        full &= nb & (bg.arm_cross[d] < 0)

    rows, cols, vals = [], [], []
    b = np.zeros(K, dtype=cdtype)
    fi, fj = np.nonzero(full)
    diag = np.zeros(len(fi))

    if diffusion:
        Dfx = np.full((nx - 1, ny), np.nan)
        Dfy = np.full((nx, ny - 1), np.nan)
        with np.errstate(invalid="ignore", divide="ignore"):
            Dfx = 2.0 * D_vals[:-1, :] * D_vals[1:, :] / (D_vals[:-1, :] + D_vals[1:, :])
            Dfy = 2.0 * D_vals[:, :-1] * D_vals[:, 1:] / (D_vals[:, :-1] + D_vals[:, 1:])

    for d, (si, sj) in enumerate(_DIRS):
        if diffusion:
            if d == 0:
                face = Dfx[fi, fj]
            elif d == 1:
                face = Dfx[fi - 1, fj]
            elif d == 2:
                face = Dfy[fi, fj]
            else:
                face = Dfy[fi, fj - 1]
            coef = -face / h[d] ** 2
        else:
            coef = np.full(len(fi), 1.0 / h[d] ** 2)
        rows.append(idx[fi, fj])
        cols.append(idx[fi + si, fj + sj])
        vals.append(coef)
        diag -= coef

    if diffusion:
        diag += sigma_vals[fi, fj]
    elif q_vals is not None:
        diag += q_vals[fi, fj]
    rows.append(idx[fi, fj])
    cols.append(idx[fi, fj])
    vals.append(diag)

    # slow path: boundary-adjacent, cut-adjacent and glued-adjacent nodes
    irr = unk & ~full
    for i, j in zip(*np.nonzero(irr)):
        k = idx[i, j]
        dval = 0.0
        for pair in ((0, 1), (2, 3)):
            dplus, dminus = pair
            hh = h[dplus]
            arm = []
            for d in pair:
                si, sj = _DIRS[d]
                ni, nj = i + si, j + sj
                cross = bg.arm_cross[d, i, j]
                if cross >= 0:
                    frac = bg.arm_frac[d, i, j]
                    Dnb = (D_cross[cross] if (diffusion and D_cross is not None)
                           else (D_vals[i, j] if diffusion else None))
                    arm.append((frac * hh, None, crossing_vals[cross], Dnb))
                elif unk[ni, nj]:
                    arm.append((hh, idx[ni, nj], None,
                                D_vals[ni, nj] if diffusion else None))
                elif glued[ni, nj]:
                    arm.append((hh, None, glue_val[ni, nj],
                                D_vals[ni, nj] if diffusion else None))
                else:
                    if cut_vals is None:
                        raise StencilError(
                            f"node ({i},{j}) needs a Dirichlet value outside the "
                            "solve region but none was provided")
                    arm.append((hh, None, cut_vals[ni, nj],
                                D_vals[ni, nj] if diffusion else None))
            (hp, up, gp, Dp), (hm, um, gm, Dm) = arm
            fac = 2.0 / (hp + hm)
            if diffusion:
                Dc = D_vals[i, j]
                Dfp = 2.0 * Dc * Dp / (Dc + Dp)
                Dfm = 2.0 * Dc * Dm / (Dc + Dm)
                cp, cm = -fac * Dfp / hp, -fac * Dfm / hm
            else:
                cp, cm = fac / hp, fac / hm
            for c, u_idx, g in ((cp, up, gp), (cm, um, gm)):
                if u_idx is not None:
                    rows.append(np.array([k]))
                    cols.append(np.array([u_idx]))
                    vals.append(np.array([c]))
                else:
                    b[k] -= c * g
                dval -= c
        if diffusion:
            dval += sigma_vals[i, j]
        elif q_vals is not None:
            dval += q_vals[i, j]
        rows.append(np.array([k]))
        cols.append(np.array([k]))
        vals.append(np.array([dval]))

    A = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(K, K))
    return A, b, idx, glued, glue_val


def _conjugate_residual(A, b, tol, max_iter):
    x = np.zeros_like(b)
    r = b - A @ x
    p = r.copy()
    Ar = A @ r
    Ap = Ar.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0
    rAr = np.vdot(r, Ar)
    for it in range(max_iter):
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it
        alpha = rAr / np.vdot(Ap, Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        Ar = A @ r
        rAr_new = np.vdot(r, Ar)
        beta = rAr_new / rAr
        rAr = rAr_new
        p = r + beta * p
        Ap = Ar + beta * Ap
    if np.linalg.norm(r) > tol * bnorm:
        raise SolverError(f"conjugate residual failed to converge in {max_iter} iterations")
    return x, max_iter


def _solve_system(A, rhs, opts: LinearSolveOptions, *, guard_singular=False):
    K = A.shape[0]
    max_iter = opts.max_iter if opts.max_iter is not None else max(2 * K, 1000)
    if opts.method == "conjugate_residual":
        if np.iscomplexobj(rhs):
            xr, _ = _conjugate_residual(A, rhs.real.astype(float), opts.tol, max_iter)
            xi, _ = _conjugate_residual(A, rhs.imag.astype(float), opts.tol, max_iter)
            return xr + 1j * xi
        x, _ = _conjugate_residual(A, rhs.astype(float), opts.tol, max_iter)
        return x
    try:
        lu = spla.splu(A.tocsc())
    except RuntimeError as exc:
        if guard_singular:
            raise ZeroEigenvalueError(
                "discrete operator is singular; the potential violates the "
                "spectral assumption") from exc
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    if guard_singular:
        op = spla.LinearOperator(A.shape, matvec=lu.solve,
                                 rmatvec=lambda b: lu.solve(b, trans="T"),
                                 dtype=A.dtype)
        try:
            cond = spla.onenormest(A) * spla.onenormest(op)
        except Exception:
            cond = np.inf
        if not np.isfinite(cond) or cond > opts.cond_limit:
            raise ZeroEigenvalueError(
                f"operator condition estimate {cond:.3e} exceeds "
                f"{opts.cond_limit:.1e}; zero eigenvalue suspected")
    if np.iscomplexobj(rhs):
        x = lu.solve(np.ascontiguousarray(rhs.real)) \
            + 1j * lu.solve(np.ascontiguousarray(rhs.imag))
    else:
        x = lu.solve(np.ascontiguousarray(rhs))
    res = np.linalg.norm(A @ x - rhs)
    if res > max(1e-8, 100 * opts.tol) * max(np.linalg.norm(rhs), 1e-300):
        raise SolverError(f"direct solve residual {res:.3e} too large")
    return x


def _fill_solution(grid, region, idx, x, glued, glue_val, dtype):
    out = np.full((grid.nx, grid.ny), np.nan, dtype=dtype)
    out[idx >= 0] = x[idx[idx >= 0]]
    out[glued] = glue_val[glued].astype(dtype)
    return out


def solve_dirichlet(prob: DirichletProblem, opts: LinearSolveOptions | None = None,
                    region=None) -> ComplexField:
    """Solve the Dirichlet problem; returns the solution as a complex field.

    For the Schroedinger kind a condition estimate guards the spectral
    assumption (zero must not be an eigenvalue); a violation raises
    ZeroEigenvalueError rather than silently regularizing.
    """
    opts = opts or LinearSolveOptions()
    grid = prob.grid
    region = grid.interior if region is None else (region & grid.interior)
    g = np.asarray(prob.boundary_values)
    if len(g) != len(grid.bgeom.points):
        raise ConfigError("boundary_values length does not match the crossing count")
    if not np.isfinite(g).all():
        raise ConfigError("boundary values must be finite")
    if prob.kind == "diffusion":
        A, b, idx, glued, gv = _assemble(
            grid, region, D_vals=prob.D.values, sigma_vals=prob.sigma_a.values,
            crossing_vals=g, D_cross=prob.D_crossings)
        guard = False
    else:
        A, b, idx, glued, gv = _assemble(
            grid, region, q_vals=prob.q.values, crossing_vals=g)
        guard = True
    x = _solve_system(A, b.astype(np.complex128), opts, guard_singular=guard)
    vals = _fill_solution(grid, region, idx, x, glued, gv.astype(np.complex128),
                          np.complex128)
    fld = ComplexField(grid, _nan_outside(vals, region))
    fld.meta["boundary_values"] = g
    return fld


def _nan_outside(vals, mask):
    out = np.full_like(vals, np.nan)
    out[mask] = vals[mask]
    return out


def solve_inhomogeneous(q: ScalarField, rhs: ScalarField, boundary_values,
                        opts: LinearSolveOptions | None = None,
                        region=None, cut_values=None) -> ScalarField:
    """Solve (Laplacian + q) w = rhs with Dirichlet data on the crossings.

    ``region`` restricts the solve to a sub-mask; arms leaving the region
    into the domain interior then require ``cut_values`` (per-node Dirichlet
    data), arms crossing the true boundary use ``boundary_values``.
    """
    opts = opts or LinearSolveOptions()
    grid = q.grid
    region = grid.interior if region is None else (region & grid.interior)
    g = np.asarray(boundary_values, dtype=float)
    A, b, idx, glued, gv = _assemble(grid, region, q_vals=q.values,
                                     crossing_vals=g, cut_vals=cut_values)
    f = np.zeros(A.shape[0])
    f[idx[idx >= 0]] = rhs.values[idx >= 0]
    if not np.isfinite(f).all():
        raise ConfigError("right-hand side carries non-finite values on the solve region")
    x = _solve_system(A, f + b.real, opts, guard_singular=True)
    vals = _fill_solution(grid, region, idx, x, glued, gv.real, np.float64)
    fld = ScalarField(grid, _nan_outside(vals, region))
    fld.meta["boundary_values"] = g
    return fld


def operator_matrix(prob: DirichletProblem, region=None):
    """Assembled operator matrix and unknown index map (for spectra and tests)."""
    grid = prob.grid
    region = grid.interior if region is None else (region & grid.interior)
    g = np.zeros(len(grid.bgeom.points))
    if prob.kind == "diffusion":
        A, _, idx, _, _ = _assemble(grid, region, D_vals=prob.D.values,
                                    sigma_vals=prob.sigma_a.values, crossing_vals=g,
                                    D_cross=prob.D_crossings)
    else:
        A, _, idx, _, _ = _assemble(grid, region, q_vals=prob.q.values, crossing_vals=g)
    return A, idx


# ---------------------------------------------------------------------------
# pointwise discrete operators
# ---------------------------------------------------------------------------

def _shift(vals, si, sj):
    out = np.full_like(vals, np.nan)
    nx, ny = vals.shape
    lo_i, hi_i = max(0, -si), nx - max(0, si)
    lo_j, hi_j = max(0, -sj), ny - max(0, sj)
    out[lo_i:hi_i, lo_j:hi_j] = vals[lo_i + si:hi_i + si, lo_j + sj:hi_j + sj]
    return out


def apply_laplacian(f: "ComplexField | ScalarField", boundary_values=None,
                    strict: bool = False):
    """5-point discrete Laplacian with Shortley-Weller boundary correction.

    Nodes whose arms cross the boundary use ``boundary_values`` (samples at
    the crossings); without them such nodes return NaN, or raise when
    ``strict`` is set.
    """
    grid = f.grid
    v = f.values
    dx2, dy2 = grid.dx ** 2, grid.dy ** 2
    lap = ((_shift(v, 1, 0) + _shift(v, -1, 0) - 2 * v) / dx2
           + (_shift(v, 0, 1) + _shift(v, 0, -1) - 2 * v) / dy2)

    bg = grid.bgeom
    band = np.isfinite(v) & ~np.isfinite(lap)
    if boundary_values is not None:
        bvals = np.asarray(boundary_values)
        for i, j in zip(*np.nonzero(band)):
            total = 0.0
            ok = True
            for pair, hh in (((0, 1), grid.dx), ((2, 3), grid.dy)):
                arm = []
                for d in pair:
                    si, sj = _DIRS[d]
                    cross = bg.arm_cross[d, i, j]
                    if cross >= 0:
                        arm.append((bg.arm_frac[d, i, j] * hh, bvals[cross]))
                    else:
                        u_nb = v[i + si, j + sj]
                        if not np.isfinite(np.real(u_nb)):
                            ok = False
                            break
                        arm.append((hh, u_nb))
                if not ok:
                    break
                (hp, up), (hm, um) = arm
                total += 2.0 * (up / (hp * (hp + hm)) + um / (hm * (hp + hm))
                                - v[i, j] / (hp * hm))
            if ok:
                lap[i, j] = total
    if strict and np.any(np.isfinite(np.real(v)) & ~np.isfinite(np.real(lap))):
        raise StencilError("Laplacian stencil unavailable at some interior nodes")
    lap[~np.isfinite(np.real(v))] = np.nan
    if np.iscomplexobj(v):
        return ComplexField(grid, _nan_outside(lap, np.isfinite(lap.real) & grid.interior))
    return ScalarField(grid, _nan_outside(lap, np.isfinite(lap) & grid.interior))


def gradient_array(values: np.ndarray, grid: Grid, crossing_values=None):
    """Per-node gradient, 4th-order central where the stencil fits, then
    2nd-order central, then one-sided Shortley-Weller with boundary data.

    Returns an (nx, ny, 2) array with NaN where no formula applies.
    """
    v = values
    out = np.full(v.shape + (2,), np.nan, dtype=v.dtype)
    for axis, (dd, h) in enumerate((((1, 0), grid.dx), ((0, 1), grid.dy))):
        si, sj = dd
        p1, m1 = _shift(v, si, sj), _shift(v, -si, -sj)
        p2, m2 = _shift(v, 2 * si, 2 * sj), _shift(v, -2 * si, -2 * sj)
        g4 = (-p2 + 8 * p1 - 8 * m1 + m2) / (12 * h)
        g2 = (p1 - m1) / (2 * h)
        out[..., axis] = np.where(np.isfinite(g4.real), g4,
                                  np.where(np.isfinite(g2.real), g2, np.nan))
    if crossing_values is not None:
        bg = grid.bgeom
        bvals = np.asarray(crossing_values)
        need = np.isfinite(v.real) & ~np.isfinite(out[..., 0].real + out[..., 1].real)
        for i, j in zip(*np.nonzero(need)):
            for axis, pair in enumerate(((0, 1), (2, 3))):
                if np.isfinite(out[i, j, axis].real):
                    continue
                hh = grid.dx if axis == 0 else grid.dy
                arm = []
                ok = True
                for d in pair:
                    si, sj = _DIRS[d]
                    cross = bg.arm_cross[d, i, j]
                    if cross >= 0:
                        arm.append((bg.arm_frac[d, i, j] * hh, bvals[cross]))
                    else:
                        u_nb = v[i + si, j + sj]
                        if not np.isfinite(u_nb.real):
                            ok = False
                            break
                        arm.append((hh, u_nb))
                if not ok:
                    continue
                (hp, up), (hm, um) = arm
                out[i, j, axis] = (hm ** 2 * up - hp ** 2 * um
                                   + (hp ** 2 - hm ** 2) * v[i, j]) \
                    / (hp * hm * (hp + hm))
    return out


def laplacian_array(values: np.ndarray, grid: Grid, crossing_values=None):
    """Per-node Laplacian, 4th-order central falling back to 2nd order and
    Shortley-Weller near the boundary (same cascade as ``gradient_array``)."""
    v = values
    dx2, dy2 = grid.dx ** 2, grid.dy ** 2
    comp = []
    for (si, sj), h2 in (((1, 0), dx2), ((0, 1), dy2)):
        p1, m1 = _shift(v, si, sj), _shift(v, -si, -sj)
        p2, m2 = _shift(v, 2 * si, 2 * sj), _shift(v, -2 * si, -2 * sj)
        l4 = (-p2 + 16 * p1 - 30 * v + 16 * m1 - m2) / (12 * h2)
        l2 = (p1 - 2 * v + m1) / h2
        comp.append(np.where(np.isfinite(l4.real), l4,
                             np.where(np.isfinite(l2.real), l2, np.nan)))
    out = comp[0] + comp[1]
    if crossing_values is not None:
        need = np.isfinite(v.real) & ~np.isfinite(out.real)
        if need.any():
            kind = ComplexField if np.iscomplexobj(v) else ScalarField
            tmp = kind(grid, _nan_outside(v, np.isfinite(v.real) & grid.interior))
            sw = apply_laplacian(tmp, boundary_values=crossing_values).values
            out = np.where(need, sw, out)
    return out
