"""Uniform spatial grids, tabulated functions and explicit tail models.

Heavy-tailed integrands cannot be truncated silently: every tabulated
function carries a declared law for its behavior beyond the grid window
(identically zero, or a signed power law C±·|z|^{-expo} per side).
Integration and generator application then split into a grid part and
an analytic tail part.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator


class GridTooNarrowError(ValueError):
    """Raised when a computation needs data beyond the grid window.

    Attributes
    ----------
    needed_halfwidth : float
        Half-width (from the grid center) that would have sufficed.
    """

    def __init__(self, msg: str, needed_halfwidth: float):
        super().__init__(msg)
        self.needed_halfwidth = needed_halfwidth


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform 1D grid with n points spanning [lo, hi] inclusive."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (self.hi > self.lo):
            raise ValueError("need hi > lo")
        if self.n < 8:
            raise ValueError("need at least 8 grid points")

    @classmethod
    def centered(cls, center: float, halfwidth: float, n: int) -> "SpatialGrid":
        return cls(center - halfwidth, center + halfwidth, n)

    @property
    def dz(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def center(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def trapz_weights(self) -> np.ndarray:
        w = np.full(self.n, self.dz)
        w[0] = w[-1] = 0.5 * self.dz
        return w

    def refine(self, factor: int = 2) -> "SpatialGrid":
        return SpatialGrid(self.lo, self.hi, (self.n - 1) * factor + 1)


@dataclass(frozen=True)
class TailModel:
    """Behavior of a tabulated function beyond the grid window.

    kind "zero": the function vanishes outside the window.
    kind "powerlaw": g(z) ≈ c_plus·z^{-expo} for z above the window and
    c_minus·|z|^{-expo} below; expo > 1 so tails are integrable (signed
    coefficients are allowed; densities have positive ones).
    """

    kind: str = "zero"
    c_plus: float = 0.0
    c_minus: float = 0.0
    expo: float = 2.0

    def __post_init__(self):
        if self.kind not in ("zero", "powerlaw"):
            raise ValueError(f"unknown tail kind {self.kind!r}")
        if self.kind == "powerlaw" and self.expo <= 1.0:
            raise ValueError("power-law tails need expo > 1 for integrability")

    @classmethod
    def zero(cls) -> "TailModel":
        return cls(kind="zero")

    @classmethod
    def fit_powerlaw(cls, grid: SpatialGrid, values: np.ndarray, expo: float,
                     edge_fraction: float = 0.05) -> "TailModel":
        """Match C± so that values ≈ C±|z|^{-expo} on the outer edge bands."""
        z = grid.points
        k = max(4, int(edge_fraction * grid.n))
        zc = grid.center
        right = slice(grid.n - k, grid.n)
        left = slice(0, k)
        with np.errstate(divide="ignore", invalid="ignore"):
            cp = float(np.mean(values[right] * np.abs(z[right] - zc) ** expo))
            cm = float(np.mean(values[left] * np.abs(z[left] - zc) ** expo))
        return cls(kind="powerlaw", c_plus=cp, c_minus=cm, expo=expo)

    def value(self, z: np.ndarray, center: float) -> np.ndarray:
        """Tail values at points z (meaningful only outside the window)."""
        z = np.asarray(z, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(z)
        r = np.abs(z - center)
        out = np.where(z >= center, self.c_plus, self.c_minus)
        with np.errstate(divide="ignore"):
            return out * r ** (-self.expo)

    def mass_beyond(self, radius: float) -> float:
        """∫ of the tail over both sides beyond |z-center| = radius."""
        if self.kind == "zero":
            return 0.0
        return ((self.c_plus + self.c_minus)
                * radius ** (1.0 - self.expo) / (self.expo - 1.0))


class GridFunction:
    """Function tabulated on a SpatialGrid with a declared tail model.

    Point evaluation inside the window uses monotone cubic (PCHIP)
    interpolation; outside it defers to the tail model.  The
    interpolant is built lazily and cached.
    """

    def __init__(self, grid: SpatialGrid, values: np.ndarray,
                 tail: TailModel | None = None):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.n,):
            raise ValueError("values must match the grid size")
        self.grid = grid
        self.values = values
        self.tail = tail
        self._interp: PchipInterpolator | None = None

    def _interpolator(self) -> PchipInterpolator:
        if self._interp is None:
            self._interp = PchipInterpolator(self.grid.points, self.values,
                                             extrapolate=False)
        return self._interp

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        scalar = z.ndim == 0
        z = np.atleast_1d(z)
        inside = (z >= self.grid.lo) & (z <= self.grid.hi)
        out = np.empty_like(z)
        if inside.any():
            out[inside] = self._interpolator()(z[inside])
        if (~inside).any():
            if self.tail is None:
                needed = float(np.max(np.abs(z - self.grid.center)))
                raise GridTooNarrowError(
                    f"evaluation at |z-center| up to {needed:.3g} exceeds the "
                    f"window half-width "
                    f"{0.5 * (self.grid.hi - self.grid.lo):.3g} and no tail "
                    f"model is declared", needed)
            out[~inside] = self.tail.value(z[~inside], self.grid.center)
        return float(out[0]) if scalar else out

    def derivative(self, z, order: int = 1) -> np.ndarray:
        """Interpolant derivative inside the window (tails not supported)."""
        z = np.asarray(z, dtype=float)
        if np.any((z < self.grid.lo) | (z > self.grid.hi)):
            raise GridTooNarrowError("derivative requested outside the window",
                                     float(np.max(np.abs(z - self.grid.center))))
        return self._interpolator().derivative(order)(z)

    def integral(self) -> float:
        """∫ g over R: trapezoid on the grid + analytic tail mass."""
        g = self.grid
        inner = float(np.trapezoid(self.values, dx=g.dz))
        if self.tail is None or self.tail.kind == "zero":
            return inner
        half = 0.5 * (g.hi - g.lo)
        return inner + self.tail.mass_beyond(half)

    def with_tail(self, tail: TailModel) -> "GridFunction":
        return GridFunction(self.grid, self.values, tail)

    def window_bounds(self) -> tuple[float, float]:
        return self.grid.lo, self.grid.hi

    @property
    def resolution(self) -> float:
        return self.grid.dz


class CallableFunction:
    """Adapter giving an exact callable the tabulated-function protocol.

    Useful when a closed-form g (with known derivatives) must flow
    through machinery written for GridFunction: quadratures then probe g
    at full floating-point accuracy instead of interpolation accuracy.
    ``resolution`` is an oscillation hint: quadrature panels will not
    exceed a few multiples of it.
    """

    def __init__(self, fn, derivative_fn=None, window: tuple[float, float]
                 | None = None, tail: TailModel | None = None,
                 resolution: float = np.inf):
        self._fn = fn
        self._dfn = derivative_fn
        self._window = window
        self.tail = tail
        self.resolution = resolution

    def window_bounds(self) -> tuple[float, float] | None:
        return self._window

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        scalar = z.ndim == 0
        z = np.atleast_1d(z)
        if self._window is None:
            out = np.asarray(self._fn(z), dtype=float)
        else:
            lo, hi = self._window
            inside = (z >= lo) & (z <= hi)
            out = np.empty_like(z)
            if inside.any():
                out[inside] = self._fn(z[inside])
            if (~inside).any():
                if self.tail is None:
                    raise GridTooNarrowError(
                        "evaluation outside the declared window without a "
                        "tail model", float(np.max(np.abs(z))))
                out[~inside] = self.tail.value(z[~inside],
                                               0.5 * (lo + hi))
        return float(out[0]) if scalar else out

    def derivative(self, z, order: int = 1):
        if self._dfn is not None and order == 1:
            return np.asarray(self._dfn(np.asarray(z, dtype=float)), dtype=float)
        # central difference fallback; adequate for smooth g
        h = 1e-5 if order == 1 else 1e-3
        z = np.asarray(z, dtype=float)
        if order == 1:
            return (self(z + h) - self(z - h)) / (2.0 * h)
        if order == 2:
            return (self(z + h) - 2.0 * self(z) + self(z - h)) / h**2
        raise ValueError("derivative order must be 1 or 2")


@dataclass
class DensityGrid(GridFunction):
    """A density snapshot p(t, x0, ·) on a grid, with provenance fields."""

    def __init__(self, grid: SpatialGrid, values: np.ndarray,
                 tail: TailModel | None, *, t: float, x0: float,
                 alpha: float, n_steps: int | None = None):
        super().__init__(grid, values, tail)
        self.t = t
        self.x0 = x0
        self.alpha = alpha
        self.n_steps = n_steps

    def to_csv(self, path: str) -> None:
        """Write (y, density) rows; '#'-prefixed preamble carries metadata."""
        import csv
        tail = self.tail if self.tail is not None else TailModel.zero()
        with open(path, "w", newline="") as fh:
            fh.write(f"# t = {self.t:.17g}\n")
            fh.write(f"# x0 = {self.x0:.17g}\n")
            fh.write(f"# alpha = {self.alpha:.17g}\n")
            fh.write(f"# N = {self.n_steps if self.n_steps is not None else 0}\n")
            fh.write(f"# tail_c_plus = {tail.c_plus:.17g}\n")
            fh.write(f"# tail_c_minus = {tail.c_minus:.17g}\n")
            fh.write(f"# tail_expo = {tail.expo:.17g}\n")
            w = csv.writer(fh)
            w.writerow(["y", "density"])
            for y, d in zip(self.grid.points, self.values):
                w.writerow([f"{y:.17g}", f"{d:.17g}"])

    @classmethod
    def from_csv(cls, path: str) -> "DensityGrid":
        import csv
        meta: dict[str, float] = {}
        ys: list[float] = []
        ds: list[float] = []
        with open(path, newline="") as fh:
            rows = []
            for line in fh:
                if line.startswith("#"):
                    key, _, val = line[1:].partition("=")
                    meta[key.strip()] = float(val)
                else:
                    rows.append(line)
            for row in csv.reader(rows):
                if row and row[0] != "y":
                    ys.append(float(row[0]))
                    ds.append(float(row[1]))
        y = np.asarray(ys)
        grid = SpatialGrid(y[0], y[-1], y.size)
        tail = TailModel(kind="powerlaw", c_plus=meta.get("tail_c_plus", 0.0),
                         c_minus=meta.get("tail_c_minus", 0.0),
                         expo=meta.get("tail_expo", 2.0)) \
            if meta.get("tail_expo", 0.0) > 1.0 else TailModel.zero()
        n_steps = int(meta.get("N", 0)) or None
        return cls(grid, np.asarray(ds), tail, t=meta["t"], x0=meta["x0"],
                   alpha=meta["alpha"], n_steps=n_steps)
