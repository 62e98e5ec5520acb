"""Complex-geometrical-optics phases, amplitude and partial-boundary traces.

The limiting-weight pair in 2D is the log distance to an exterior pole and
the angular coordinate around it, an exact harmonic-conjugate pair, so the
leading amplitude is constant and the eikonal identities hold pointwise.
Illumination traces are the high-frequency fields cut off smoothly inside
Gamma so they vanish identically on the untrusted part of the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import BoundarySegmentation, Grid
from .errors import (
    AmplitudeError,
    ConfigError,
    GeometryError,
    SemiclassicalRangeError,
    SingularPhaseError,
)
from .fields import ComplexField, ScalarField

_EXP_LIMIT = 700.0  # natural-log units before exp() overflows


@dataclass(frozen=True)
class CGOConfig:
    """Pole, direction, semiclassical parameter and trace-cutoff width."""

    x0: tuple
    omega: tuple
    h: float
    sign: str = "minus_phi"  # which factor of the pair: exp(+phi/h) or exp(-phi/h)
    cutoff_width: float | None = None

    def __post_init__(self):
        if self.sign not in ("plus_phi", "minus_phi"):
            raise ConfigError(f"unknown sign selector {self.sign!r}")
        if not (0.0 < self.h < 1.0):
            raise ConfigError(f"semiclassical parameter must lie in (0, 1), got {self.h}")
        w = np.asarray(self.omega, dtype=float)
        n = float(np.hypot(w[0], w[1]))
        if not math.isclose(n, 1.0, rel_tol=1e-9):
            raise ConfigError("direction omega must be a unit vector")
        if self.cutoff_width is not None and self.cutoff_width <= 0:
            raise ConfigError("cutoff_width must be positive")

    @property
    def sign_value(self) -> float:
        return 1.0 if self.sign == "plus_phi" else -1.0

    def matches(self, other: "CGOConfig") -> bool:
        return (np.allclose(self.x0, other.x0) and np.allclose(self.omega, other.omega)
                and math.isclose(self.h, other.h))

    def to_json(self):
        return {"x0": list(self.x0), "omega": list(self.omega), "h": self.h,
                "sign": self.sign, "cutoff_width": self.cutoff_width}

    @staticmethod
    def from_json(obj):
        return CGOConfig(tuple(obj["x0"]), tuple(obj["omega"]), float(obj["h"]),
                         obj.get("sign", "minus_phi"), obj.get("cutoff_width"))


def perpendicular_omega(domain, x0):
    """Unit direction perpendicular to the pole-to-domain axis.

    Keeps the angular phase away from its branch ends on the closed domain.
    """
    bx0, bx1, by0, by1 = domain.bbox
    c = np.array([0.5 * (bx0 + bx1), 0.5 * (by0 + by1)])
    d = c - np.asarray(x0, dtype=float)
    d /= np.hypot(d[0], d[1])
    return (-d[1], d[0])


def default_h(domain, x0, dynamic_range: float = 1e3) -> float:
    """Largest-useful-h heuristic: cap the exponential weight's dynamic range.

    Too small an h makes one trace huge and the other undetectable; this
    returns the h at which max/min of exp(phi/h) over the domain hits the
    given ratio, which callers may shrink but should not go far below.
    """
    bx0, bx1, by0, by1 = domain.bbox
    corners = np.array([[bx0, by0], [bx0, by1], [bx1, by0], [bx1, by1]])
    r = np.hypot(corners[:, 0] - x0[0], corners[:, 1] - x0[1])
    # nearest boundary distance: coarse but adequate for a heuristic
    rmin = max(1e-6, float(np.min(np.abs(domain.signed_distance(np.atleast_2d(x0))))))
    spread = math.log(float(r.max()) / rmin)
    return max(spread / math.log(dynamic_range), 0.05)


def _phase_pieces(x0, omega, pts):
    p = np.asarray(pts, dtype=float)
    rx = p[..., 0] - x0[0]
    ry = p[..., 1] - x0[1]
    r2 = rx * rx + ry * ry
    r = np.sqrt(r2)
    alpha = np.arctan2(ry, rx)
    alpha_w = math.atan2(omega[1], omega[0])
    delta = np.mod(alpha - alpha_w + np.pi, 2.0 * np.pi) - np.pi
    return rx, ry, r, r2, delta


@dataclass(eq=False)
class CGOPhasePair:
    """Log-distance weight phi and angular phase psi with analytic gradients.

    psi is the geodesic distance on the circle between the unit vector
    toward x0 and omega, taken in [0, pi]; its gradient uses the signed
    angle so the eikonal identities |grad psi| = |grad phi| and
    grad psi . grad phi = 0 hold at every node.
    """

    config: CGOConfig
    grid: Grid
    phi: ScalarField
    psi: ScalarField
    grad_phi: np.ndarray
    grad_psi: np.ndarray
    kink_clearance: float

    def phi_at(self, pts):
        _, _, r, _, _ = _phase_pieces(self.config.x0, self.config.omega, pts)
        return np.log(r)

    def psi_at(self, pts):
        _, _, _, _, delta = _phase_pieces(self.config.x0, self.config.omega, pts)
        return np.abs(delta)

    def grad_phi_at(self, pts):
        rx, ry, _, r2, _ = _phase_pieces(self.config.x0, self.config.omega, pts)
        return np.stack([rx / r2, ry / r2], axis=-1)

    def grad_psi_at(self, pts):
        rx, ry, _, r2, delta = _phase_pieces(self.config.x0, self.config.omega, pts)
        sgn = np.where(delta >= 0.0, 1.0, -1.0)
        return np.stack([-sgn * ry / r2, sgn * rx / r2], axis=-1)


def build_phases(cfg: CGOConfig, grid: Grid) -> CGOPhasePair:
    """Evaluate the phase pair and its analytic gradients on the grid."""
    pts = grid.nodes
    rx, ry, r, r2, delta = _phase_pieces(cfg.x0, cfg.omega, pts)
    if float(np.min(r[grid.interior])) < 1e-12:
        raise SingularPhaseError("a grid node coincides with the pole x0")
    if grid.domain is not None and grid.domain.contains(np.atleast_2d(cfg.x0)).any():
        raise ConfigError("pole x0 must lie outside the domain")
    phi = ScalarField(grid, np.log(r))
    psi = ScalarField(grid, np.abs(delta))
    sgn = np.where(delta >= 0.0, 1.0, -1.0)
    gphi = np.stack([rx / r2, ry / r2], axis=-1)
    gpsi = np.stack([-sgn * ry / r2, sgn * rx / r2], axis=-1)
    m = grid.interior
    clearance = float(np.minimum(np.abs(delta[m]), np.pi - np.abs(delta[m])).min())
    return CGOPhasePair(config=cfg, grid=grid, phi=phi, psi=psi,
                        grad_phi=gphi, grad_psi=gpsi, kink_clearance=clearance)


@dataclass(eq=False)
class CGOAmplitude:
    a: ComplexField
    transport_residual: float
    min_modulus: float


def transport_residual(phases: CGOPhasePair, a_values: np.ndarray) -> float:
    """Sup norm of the discrete transport operator applied to an amplitude.

    Uses central differences for grad(a) and the analytic phase Laplacians,
    which vanish identically for the conjugate-harmonic pair in 2D.
    """
    grid = phases.grid
    v = np.asarray(a_values, dtype=np.complex128)
    gax = np.full_like(v, np.nan)
    gay = np.full_like(v, np.nan)
    gax[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * grid.dx)
    gay[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * grid.dy)
    gp = phases.grad_phi
    gs = phases.grad_psi
    # analytic Laplacians of the conjugate-harmonic pair are zero
    lap_phi = 0.0
    lap_psi = 0.0
    res = (2.0 * ((gs[..., 0] + 1j * gp[..., 0]) * gax
                  + (gs[..., 1] + 1j * gp[..., 1]) * gay)
           + (lap_psi + 1j * lap_phi) * v)
    m = grid.interior & np.isfinite(res)
    return float(np.abs(res[m]).max()) if m.any() else 0.0


def build_amplitude(phases: CGOPhasePair, grid: Grid, value: complex = 1.0,
                    tol: float = 1e-8) -> CGOAmplitude:
    """Constant amplitude; the conjugate-harmonic phases annihilate it."""
    if abs(value) <= 0:
        raise AmplitudeError("amplitude must be non-vanishing")
    vals = np.full((grid.nx, grid.ny), complex(value))
    a = ComplexField(grid, vals)
    res = transport_residual(phases, a.values)
    if res > tol:
        raise AmplitudeError(f"amplitude transport residual {res:.3e} exceeds {tol:.1e}")
    return CGOAmplitude(a=a, transport_residual=res, min_modulus=abs(value))


def cgo_values(cfg: CGOConfig, pts, amplitude: complex = 1.0):
    """Evaluate exp((s*phi + i*psi)/h) * a at arbitrary points."""
    _, _, r, _, delta = _phase_pieces(cfg.x0, cfg.omega, pts)
    phi = np.log(r)
    psi = np.abs(delta)
    ex = cfg.sign_value * phi / cfg.h
    if np.max(np.abs(ex)) > _EXP_LIMIT:
        raise SemiclassicalRangeError(
            f"|phi|/h reaches {np.max(np.abs(ex)):.1f} log units; h is too small")
    return np.exp(ex + 1j * psi / cfg.h) * amplitude


def cgo_field(cfg: CGOConfig, phases: CGOPhasePair, amp: CGOAmplitude) -> ComplexField:
    """The leading-order high-frequency field on the grid."""
    grid = phases.grid
    ex = cfg.sign_value * phases.phi.values / cfg.h
    m = grid.interior
    if np.max(np.abs(ex[m])) > _EXP_LIMIT:
        raise SemiclassicalRangeError(
            f"|phi|/h reaches {np.max(np.abs(ex[m])):.1f} log units; h is too small")
    vals = np.full((grid.nx, grid.ny), np.nan + 1j * np.nan, dtype=np.complex128)
    vals[m] = np.exp(ex[m] + 1j * phases.psi.values[m] / cfg.h) * amp.a.values[m]
    return ComplexField(grid, vals)


# ---------------------------------------------------------------------------
# illumination traces
# ---------------------------------------------------------------------------

def _quintic_step(t):
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (t * (6.0 * t - 15.0) + 10.0)


@dataclass(eq=False)
class IlluminationSet:
    """Complex boundary traces supported in Gamma, one per phase factor.

    Each complex trace stands for two real illuminations (its real and
    imaginary parts), so a plus/minus pair represents four real boundary
    conditions. ``amplitudes`` carry any global rescaling of the sources.
    """

    seg: BoundarySegmentation
    configs: list
    traces: list            # complex arrays over the segmentation nodes
    eps_hat: list           # per-trace sup deviation from the uncut trace
    epsilon: float = 0.0
    amplitudes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.amplitudes:
            self.amplitudes = [1.0 + 0.0j] * len(self.configs)

    def __len__(self):
        return len(self.traces)

    @property
    def n_real_illuminations(self):
        return 2 * len(self.traces)

    def chi(self, s):
        """Smooth cutoff: 0 on the gamma_minus windows, quintic ramp to 1
        over cutoff_width of arc, 1 elsewhere (in particular on the front arc
        and across the far back)."""
        w = self.configs[0].cutoff_width
        d = self.seg.gamma_minus_distance(s)
        return _quintic_step(d / w)

    def _perturbation(self, j, s):
        if self.epsilon == 0.0:
            return 0.0
        scale = np.max(np.abs(self._raw_trace_at(j, self.seg.points, self.seg.s)))
        per = self.seg.perimeter
        return self.epsilon * scale * np.sin(2.0 * np.pi * np.asarray(s) / per + 0.7 * j)

    def _raw_trace_at(self, j, pts, s):
        return cgo_values(self.configs[j], pts) * self.amplitudes[j]

    def g_at(self, j, pts, s):
        """Exact evaluation of trace j at boundary points with arc coords s."""
        base = self._raw_trace_at(j, pts, s) + self._perturbation(j, s)
        return self.chi(s) * base

    def scaled(self, kappa) -> "IlluminationSet":
        out = IlluminationSet(seg=self.seg, configs=list(self.configs),
                              traces=[t * kappa for t in self.traces],
                              eps_hat=[e * abs(kappa) for e in self.eps_hat],
                              epsilon=self.epsilon,
                              amplitudes=[a * kappa for a in self.amplitudes])
        return out

    def to_json(self):
        return {"configs": [c.to_json() for c in self.configs],
                "epsilon": self.epsilon,
                "amplitudes": [[a.real, a.imag] for a in map(complex, self.amplitudes)],
                "eps_hat": list(map(float, self.eps_hat))}


def make_illuminations(cfg_pair, seg: BoundarySegmentation,
                       epsilon: float = 0.0) -> IlluminationSet:
    """Cut the high-frequency traces off smoothly inside Gamma.

    The traces equal the exact fields on the front arc, transition over
    ``cutoff_width`` and vanish identically on gamma_minus. ``epsilon``
    adds a controlled smooth in-Gamma perturbation (for stability sweeps);
    the reported eps_hat measures the total deviation from the uncut trace.
    """
    plus, minus = cfg_pair
    if plus.sign != "plus_phi" or minus.sign != "minus_phi":
        raise ConfigError("cfg_pair must be (plus_phi, minus_phi)")
    if not plus.matches(minus):
        raise ConfigError("the phase pair must share x0, omega and h")
    width = plus.cutoff_width
    if width is None:
        width = 0.5 * seg.gamma_margin
        plus = replace(plus, cutoff_width=width)
        minus = replace(minus, cutoff_width=width)
    if width >= seg.gamma_margin:
        raise GeometryError(
            f"cutoff width {width} does not fit inside the Gamma margin "
            f"{seg.gamma_margin}")
    illum = IlluminationSet(seg=seg, configs=[plus, minus], traces=[], eps_hat=[],
                            epsilon=float(epsilon))
    for j in range(2):
        raw = illum._raw_trace_at(j, seg.points, seg.s)
        g = illum.g_at(j, seg.points, seg.s)
        illum.traces.append(g)
        illum.eps_hat.append(float(np.max(np.abs(g - raw))))
    return illum
