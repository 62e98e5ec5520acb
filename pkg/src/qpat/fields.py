"""Grid-sampled scalar and complex fields with the QPF1 file format.

QPF1 layout: one ASCII header line

    QPF1 <real|complex> <nx> <ny> <dx> <dy> <ox> <oy>\n

followed by the node values in C (row-major over [ix, iy]) order as
little-endian IEEE float64, interleaved re/im for complex fields. Nodes
outside the domain carry NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import Grid
from .errors import FieldFormatError

_MAGIC = "QPF1"


def _check_grid(a: "ScalarField | ComplexField", b) -> None:
    if a.grid is not b.grid and not a.grid.compatible(b.grid):
        raise ValueError("field arithmetic requires fields on the identical grid")


@dataclass(eq=False)
class ScalarField:
    """Real samples on the grid's interior nodes.

    NaN marks "no value": exterior nodes always, and interior nodes outside
    the field's support for partial fields (e.g. quantities defined only on
    the trusted region). Infinities are rejected.
    """

    grid: Grid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.shape != (self.grid.nx, self.grid.ny):
            raise ValueError(f"values shape {v.shape} does not match grid")
        v[~self.grid.interior] = np.nan
        if np.isinf(v).any():
            raise ValueError("field carries infinite values")
        self.values = v

    @property
    def support(self):
        return np.isfinite(self.values) & self.grid.interior

    @property
    def full(self) -> bool:
        return bool(np.isfinite(self.values[self.grid.interior]).all())

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ScalarField":
        nodes = grid.nodes
        vals = np.full((grid.nx, grid.ny), np.nan)
        vals[grid.interior] = fn(nodes[grid.interior])
        return cls(grid, vals)

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "ScalarField":
        vals = np.full((grid.nx, grid.ny), float(c))
        return cls(grid, vals)

    def interior_values(self):
        return self.values[self.grid.interior]

    def copy(self):
        return ScalarField(self.grid, self.values, dict(self.meta))

    def __add__(self, other):
        if isinstance(other, (ScalarField, ComplexField)):
            _check_grid(self, other)
            return _wrap(self.grid, self.values + other.values)
        return _wrap(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, (ScalarField, ComplexField)):
            _check_grid(self, other)
            return _wrap(self.grid, self.values - other.values)
        return _wrap(self.grid, self.values - other)

    def __mul__(self, other):
        if isinstance(other, (ScalarField, ComplexField)):
            _check_grid(self, other)
            return _wrap(self.grid, self.values * other.values)
        return _wrap(self.grid, self.values * other)

    __rmul__ = __mul__

    def scale(self, c):
        return self * c


@dataclass(eq=False)
class ComplexField:
    grid: Grid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.complex128, copy=True)
        if v.shape != (self.grid.nx, self.grid.ny):
            raise ValueError(f"values shape {v.shape} does not match grid")
        v[~self.grid.interior] = np.nan + 1j * np.nan
        if np.isinf(v.real).any() or np.isinf(v.imag).any():
            raise ValueError("field carries infinite values")
        self.values = v

    @property
    def support(self):
        return np.isfinite(self.values) & self.grid.interior

    @property
    def full(self) -> bool:
        return bool(np.isfinite(self.values[self.grid.interior]).all())

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ComplexField":
        vals = np.full((grid.nx, grid.ny), np.nan + 1j * np.nan, dtype=np.complex128)
        vals[grid.interior] = fn(grid.nodes[grid.interior])
        return cls(grid, vals)

    @property
    def real(self) -> ScalarField:
        return ScalarField(self.grid, self.values.real)

    @property
    def imag(self) -> ScalarField:
        return ScalarField(self.grid, self.values.imag)

    def interior_values(self):
        return self.values[self.grid.interior]

    def copy(self):
        return ComplexField(self.grid, self.values, dict(self.meta))

    def __add__(self, other):
        if isinstance(other, (ScalarField, ComplexField)):
            _check_grid(self, other)
            return _wrap(self.grid, self.values + other.values)
        return _wrap(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, (ScalarField, ComplexField)):
            _check_grid(self, other)
            return _wrap(self.grid, self.values - other.values)
        return _wrap(self.grid, self.values - other)

    def __mul__(self, other):
        if isinstance(other, (ScalarField, ComplexField)):
            _check_grid(self, other)
            return _wrap(self.grid, self.values * other.values)
        return _wrap(self.grid, self.values * other)

    __rmul__ = __mul__

    def scale(self, c):
        return self * c


def _wrap(grid, values):
    if np.iscomplexobj(values):
        return ComplexField(grid, values)
    return ScalarField(grid, values)


def write_field(path, fld: "ScalarField | ComplexField") -> None:
    kind = "complex" if isinstance(fld, ComplexField) else "real"
    g = fld.grid
    header = f"{_MAGIC} {kind} {g.nx} {g.ny} {g.dx!r} {g.dy!r} {g.ox!r} {g.oy!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if kind == "complex":
            buf = np.empty((g.nx, g.ny, 2), dtype="<f8")
            buf[..., 0] = fld.values.real
            buf[..., 1] = fld.values.imag
        else:
            buf = fld.values.astype("<f8")
        fh.write(buf.tobytes(order="C"))


def read_field(path, grid: Grid | None = None):
    """Read a QPF1 field; reuses ``grid`` when given (geometry must match)."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 8 or parts[0] != _MAGIC:
            raise FieldFormatError(f"{path}: not a QPF1 file (header {header!r})")
        kind = parts[1]
        if kind not in ("real", "complex"):
            raise FieldFormatError(f"{path}: unknown field kind {kind!r}")
        try:
            nx, ny = int(parts[2]), int(parts[3])
            dx, dy, ox, oy = (float(p) for p in parts[4:8])
        except ValueError as exc:
            raise FieldFormatError(f"{path}: malformed header") from exc
        if nx <= 0 or ny <= 0 or dx <= 0 or dy <= 0:
            raise FieldFormatError(f"{path}: non-positive grid dimensions")
        ncomp = 2 if kind == "complex" else 1
        raw = fh.read()
        expect = nx * ny * ncomp * 8
        if len(raw) != expect:
            raise FieldFormatError(f"{path}: payload is {len(raw)} bytes, expected {expect}")
        data = np.frombuffer(raw, dtype="<f8").reshape(nx, ny, ncomp)

    if grid is not None:
        if grid.nx != nx or grid.ny != ny:
            raise FieldFormatError(f"{path}: grid shape mismatch "
                                   f"({nx}x{ny} file vs {grid.nx}x{grid.ny})")
        g = grid
    else:
        mask = np.isfinite(data[..., 0])
        mask.setflags(write=False)
        g = Grid(nx, ny, dx, dy, ox, oy, None, mask)
    if kind == "complex":
        return ComplexField(g, data[..., 0] + 1j * data[..., 1])
    return ScalarField(g, data[..., 0])
