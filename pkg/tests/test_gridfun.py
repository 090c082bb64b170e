"""Grid container, tail extrapolation, and CSV round-trip tests."""

import numpy as np
import pytest

from stabledens.gridfun import (CallableFunction, DensityGrid, GridFunction,
                                GridTooNarrowError, SpatialGrid, TailModel)


def test_grid_basic_geometry():
    g = SpatialGrid(-2.0, 6.0, 9)
    assert g.dz == pytest.approx(1.0)
    np.testing.assert_allclose(g.points, np.arange(-2.0, 7.0))
    assert g.center == pytest.approx(2.0)
    assert g.trapz_weights().sum() == pytest.approx(8.0)
    r = g.refine()
    assert r.n == 17 and r.dz == pytest.approx(0.5)
    assert SpatialGrid.centered(1.0, 3.0, 13).lo == pytest.approx(-2.0)


def test_grid_rejects_degenerate():
    with pytest.raises(ValueError):
        SpatialGrid(1.0, 1.0, 16)
    with pytest.raises(ValueError):
        SpatialGrid(0.0, 1.0, 4)


def test_interpolation_accuracy_smooth():
    # pchip gives up an order of accuracy near extrema to stay monotone,
    # so expect dz^3-level errors there, not dz^4
    g = SpatialGrid(-4.0, 4.0, 801)
    f = GridFunction(g, np.cos(g.points), TailModel.zero())
    z = np.linspace(-3.9, 3.9, 511)
    np.testing.assert_allclose(f(z), np.cos(z), atol=5e-6)
    # derivative clamping at extrema is first order; probe a monotone stretch
    zm = np.linspace(0.5, 2.5, 101)
    np.testing.assert_allclose(f.derivative(zm), -np.sin(zm), atol=2e-4)
    np.testing.assert_allclose(f.derivative(z), -np.sin(z), atol=6e-3)


def test_call_without_tail_raises_outside():
    g = SpatialGrid(-1.0, 1.0, 41)
    f = GridFunction(g, np.ones(41))
    with pytest.raises(GridTooNarrowError) as exc:
        f(np.array([0.0, 1.5]))
    assert exc.value.needed_halfwidth >= 1.5


def test_powerlaw_tail_values_and_mass():
    tail = TailModel("powerlaw", c_plus=2.0, c_minus=1.0, expo=2.5)
    z = np.array([10.0, -10.0])
    np.testing.assert_allclose(tail.value(z, 0.0),
                               [2.0 * 10.0**-2.5, 1.0 * 10.0**-2.5])
    # mass beyond R: (c+ + c-) R^{1-expo}/(expo-1)
    assert tail.mass_beyond(10.0) == pytest.approx(3.0 * 10.0**-1.5 / 1.5)
    assert TailModel.zero().mass_beyond(10.0) == 0.0


def test_fit_powerlaw_recovers_coefficients():
    g = SpatialGrid(-50.0, 50.0, 2001)
    z = g.points
    vals = np.where(z >= 0, 3.0, 1.5) * (1.0 + np.abs(z)) ** -2.2
    tail = TailModel.fit_powerlaw(g, vals, expo=2.2, edge_fraction=0.05)
    # at the fit region |z| ~ 50 the (1+|z|) shift is a ~2% perturbation
    assert tail.c_plus == pytest.approx(3.0, rel=0.1)
    assert tail.c_minus == pytest.approx(1.5, rel=0.1)
    assert tail.expo == 2.2


def test_integral_includes_tail_mass():
    expo = 2.5
    g = SpatialGrid(-20.0, 20.0, 4001)
    vals = (1.0 + np.abs(g.points)) ** -expo
    f = GridFunction(g, vals, TailModel("powerlaw", 1.0, 1.0, expo))
    exact = 2.0 / (expo - 1.0)  # integral of (1+|z|)^-2.5 over R
    # tail model ignores the +1 shift; at |z|=20 that costs ~3.7%
    assert f.integral() == pytest.approx(exact, rel=0.01)


def test_window_protocol():
    g = SpatialGrid(-3.0, 5.0, 101)
    f = GridFunction(g, np.zeros(101), TailModel.zero())
    assert f.window_bounds() == (-3.0, 5.0)
    assert f.resolution == pytest.approx(0.08)
    f2 = f.with_tail(TailModel("powerlaw", 1.0, 1.0, 3.0))
    assert f2.tail.kind == "powerlaw"
    # tail distances are measured from the window center (here 1.0)
    assert f2(np.array([10.0]))[0] == pytest.approx(9.0**-3)


def test_callable_function_adapter():
    f = CallableFunction(np.cos, derivative_fn=None)
    z = np.array([0.0, 0.7])
    np.testing.assert_allclose(f(z), np.cos(z), rtol=1e-15)
    # central-difference fallback derivative
    np.testing.assert_allclose(f.derivative(z), -np.sin(z), atol=1e-7)
    assert f.window_bounds() is None
    g = CallableFunction(np.cos, window=(-1.0, 1.0), tail=TailModel.zero())
    assert g(np.array([2.0]))[0] == 0.0
    h = CallableFunction(np.cos, window=(-1.0, 1.0))
    with pytest.raises(GridTooNarrowError):
        h(np.array([2.0]))


def test_density_grid_csv_roundtrip(tmp_path):
    g = SpatialGrid(-5.0, 5.0, 257)
    vals = np.exp(-g.points**2) / np.sqrt(np.pi)
    d = DensityGrid(g, vals, TailModel("powerlaw", 0.25, 0.125, 2.5),
                    t=0.75, x0=-1.0, alpha=1.5, n_steps=64)
    path = tmp_path / "density.csv"
    d.to_csv(str(path))
    back = DensityGrid.from_csv(str(path))
    assert back.t == d.t and back.x0 == d.x0
    assert back.alpha == d.alpha and back.n_steps == d.n_steps
    assert back.grid.lo == d.grid.lo and back.grid.n == d.grid.n
    np.testing.assert_array_equal(back.values, d.values)
    assert back.tail.c_plus == d.tail.c_plus
    assert back.tail.expo == d.tail.expo
    header = path.read_text().splitlines()
    meta = [ln for ln in header if ln.startswith("#")]
    assert meta, "metadata preamble missing"
    cols = next(ln for ln in header if not ln.startswith("#"))
    assert cols.strip() == "y,density"
