"""Euler scheme: coupled-path sampling and chain-density propagation.

Sampling is pinned by the constant-coefficient exactness of the scheme
(the terminal law is the driver law, checked in characteristic
function), by bitwise determinism in (seed, path index), and by
recovering the shared driver increments across nesting levels.  The
one-step operator is checked entry by entry against direct quadrature
of tent times kernel, and row sums against the kernel distribution
function.  Propagation is pinned against the frozen density, which the
chain equals exactly for constant coefficients at every step count;
the tolerances step down as the per-step kernel width falls under the
grid spacing and the compensation switches to its accumulated form.
"""

import numpy as np
import pytest
from scipy.integrate import quad

from stabledens import euler as eu
from stabledens import frozen_density as fd
from stabledens import model as md
from stabledens import stable_law as sl
from stabledens.gridfun import SpatialGrid
from stabledens.profiles import get_profiles


def make_model(alpha, preset="constant", gamma=0.0, horizon=1.0, **kw):
    if preset == "constant":
        kw.setdefault("b0", 0.0)
        kw.setdefault("f0", 1.0)
    drift = np.array([gamma])
    coeffs = md.preset_coefficients(preset, **kw)
    return md.Model(sl.StableSpec(alpha, sl.OneDim(1.0), drift), coeffs,
                    horizon)


def ragged_model(alpha=1.5):
    return make_model(alpha, "tanh-affine", b_scale=0.3, b_slope=1.0,
                      f0=1.0, f_scale=0.2, f_slope=0.7)


# -- time grids and bundles ----------------------------------------------------

def test_grid_spec_arithmetic():
    g = eu.GridSpec(12, 3.0, nesting=(1, 2, 3, 6))
    assert g.h == pytest.approx(0.25)
    assert g.level_steps == (12, 24, 36, 72)


def test_grid_spec_rejections():
    with pytest.raises(ValueError, match="at least one time step"):
        eu.GridSpec(0, 1.0)
    with pytest.raises(ValueError, match="horizon must be positive"):
        eu.GridSpec(4, 0.0)
    with pytest.raises(ValueError, match="positive integers"):
        eu.GridSpec(4, 1.0, nesting=(0, 2))
    with pytest.raises(ValueError, match="increase strictly"):
        eu.GridSpec(4, 1.0, nesting=(1, 2, 2))
    with pytest.raises(ValueError, match="divide the finest"):
        eu.GridSpec(4, 1.0, nesting=(2, 3))


def test_bundle_save_load_roundtrip(tmp_path):
    model = ragged_model()
    bundle = eu.simulate_bundle(model, eu.GridSpec(4, 1.0, nesting=(1, 2)),
                                0.2, 700, seed=21)
    bundle.save(str(tmp_path))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["sidecar.txt", "terminal_N4.f64", "terminal_N8.f64"]
    raw = np.frombuffer((tmp_path / "terminal_N8.f64").read_bytes(),
                        dtype="<f8")
    assert np.array_equal(raw, bundle.terminal[1])
    sidecar = (tmp_path / "sidecar.txt").read_text()
    assert f"model = {bundle.model_hash}" in sidecar
    assert "flags = 0,0" in sidecar
    back = eu.PathBundle.load(str(tmp_path))
    assert np.array_equal(back.terminal, bundle.terminal)
    assert back.grid == bundle.grid
    assert (back.seed, back.x0, back.cap) == (21, 0.2, 1e12)
    # overflow masks are not persisted, only their counts in the sidecar
    assert back.flag_counts == (0, 0)


def test_terminal_for_unknown_level():
    bundle = eu.simulate_bundle(make_model(1.5), eu.GridSpec(4, 1.0),
                                0.0, 10, seed=1)
    assert bundle.terminal_for(4).shape == (10,)
    with pytest.raises(KeyError, match="no nesting level"):
        bundle.terminal_for(8)


def test_model_fingerprint_discriminates():
    base = make_model(1.5, b0=0.3)
    assert eu.model_fingerprint(base) == eu.model_fingerprint(
        make_model(1.5, b0=0.3))
    assert len(eu.model_fingerprint(base)) == 16
    others = [make_model(1.4, b0=0.3), make_model(1.5, b0=0.4),
              make_model(1.5, b0=0.3, gamma=0.1),
              make_model(1.5, b0=0.3, horizon=2.0), ragged_model()]
    prints = {eu.model_fingerprint(m) for m in others}
    assert eu.model_fingerprint(base) not in prints
    assert len(prints) == len(others)


# -- sampling ------------------------------------------------------------------

def test_constant_coefficients_reproduce_driver_law():
    # b = 0, f = 1: the scheme telescopes to X_T = x0 + Z_T exactly, so
    # the empirical characteristic function must match the driver's at
    # every nesting level
    model = make_model(1.1)
    n = 40_000
    bundle = eu.simulate_bundle(model, eu.GridSpec(6, 1.0, nesting=(1, 2)),
                                0.4, n, seed=9)
    u = np.array([0.3, 0.9, 1.7, 2.6, 4.0])
    exact = sl.cf(model.driver, 1.0, u)
    for steps in (6, 12):
        got = sl.empirical_cf(bundle.terminal_for(steps) - 0.4, u)
        assert np.abs(got - exact).max() < 4.0 / np.sqrt(n)


def test_finest_level_independent_of_nesting():
    # the finest level of a nested bundle runs the same arithmetic as a
    # flat bundle with that step count, so the match is bitwise
    model = ragged_model()
    nested = eu.simulate_bundle(model, eu.GridSpec(8, 1.0, nesting=(1, 2)),
                                0.1, 3000, seed=3)
    flat = eu.simulate_bundle(model, eu.GridSpec(16, 1.0), 0.1, 3000, seed=3)
    assert np.array_equal(nested.terminal_for(16), flat.terminal_for(16))


def test_deterministic_in_seed_and_path_index():
    model = ragged_model()
    grid = eu.GridSpec(6, 1.0)
    a = eu.simulate_bundle(model, grid, 0.1, 9000, seed=5)
    b = eu.simulate_bundle(model, grid, 0.1, 9000, seed=5, threads=4)
    assert np.array_equal(a.terminal, b.terminal)
    prefix = eu.simulate_bundle(model, grid, 0.1, 5000, seed=5)
    assert np.array_equal(a.terminal[:, :5000], prefix.terminal)
    other = eu.simulate_bundle(model, grid, 0.1, 9000, seed=6)
    assert not np.array_equal(a.terminal, other.terminal)


def test_coarse_increments_sum_fine_increments():
    model = ragged_model()
    bundle = eu.simulate_bundle(model, eu.GridSpec(8, 1.0, nesting=(1, 2, 4)),
                                0.1, 600, seed=3, keep_paths=True)
    recovered = []
    for li, steps in enumerate(bundle.grid.level_steps):
        p = bundle.paths[li]
        x = p[:, :-1]
        h = 1.0 / steps
        recovered.append((p[:, 1:] - x - model.coeffs.b(x) * h)
                         / model.coeffs.f(x))
    fine = recovered[-1]
    for li, m in enumerate(bundle.grid.nesting[:-1]):
        group = bundle.grid.nesting[-1] // m
        agg = fine.reshape(600, bundle.grid.level_steps[li], group).sum(axis=2)
        # the increments are shared by construction; recovering them
        # from the paths costs a few rounding steps
        np.testing.assert_allclose(agg, recovered[li], atol=1e-12)


def test_overflow_flagged_never_clipped():
    model = make_model(0.7)
    grid = eu.GridSpec(4, 1.0)
    capped = eu.simulate_bundle(model, grid, 0.0, 3000, seed=7, cap=10.0)
    assert sum(capped.flag_counts) > 100
    assert np.abs(capped.terminal).max() > 10.0
    roomy = eu.simulate_bundle(model, grid, 0.0, 3000, seed=7)
    assert roomy.flag_counts == (0,)
    assert np.array_equal(capped.terminal, roomy.terminal)


def test_simulation_rejections():
    model = make_model(1.5)
    with pytest.raises(ValueError, match="at least one path"):
        eu.simulate_bundle(model, eu.GridSpec(4, 1.0), 0.0, 0, seed=1)
    with pytest.raises(ValueError, match="exceeds the model horizon"):
        eu.simulate_bundle(model, eu.GridSpec(4, 2.0), 0.0, 10, seed=1)


# -- one-step operator ---------------------------------------------------------

def test_row_sums_match_kernel_distribution():
    # a row of ones paired against hats telescopes to the kernel mass
    # over the column span; the distribution function gives it directly
    model = make_model(1.5, b0=0.3, f0=1.2)
    h = 0.125
    grid = SpatialGrid.centered(0.0, 8.0, 401)
    k = eu.transition_matrix(model, h, grid)
    ps = get_profiles(1.5)
    sig = float(model.frozen_scale(grid.points)[0] * h) ** (1.0 / 1.5)
    shift = grid.points + 0.3 * h
    hi = (grid.points - shift[0]) / sig
    lo = (grid.points - shift[-1]) / sig
    np.testing.assert_allclose(k.sum(axis=1), ps.cdf0(hi) - ps.cdf0(lo),
                               atol=1e-12)


def test_matrix_entries_against_quadrature():
    model = ragged_model()
    h = 0.125
    grid = SpatialGrid.centered(0.0, 6.0, 301)
    cols, win = eu._geometric_columns(grid)
    k = eu.transition_matrix(model, h, grid, col_points=cols)
    assert k.min() > 0.0
    ps = get_profiles(model.alpha)

    def oracle(i, j):
        c = cols[j]
        sig = float(model.frozen_scale(np.array([c]))[0] * h) ** (1.0 / 1.5)
        shift = c + float(model.drift_B(np.array([c]))[0]) * h
        y = grid.points[i]

        def kernel(u):
            return ps.density((y - shift - (u - c)) / sig) / sig

        total = 0.0
        if j > 0:
            a = cols[j - 1]
            total += quad(lambda u: (u - a) / (c - a) * kernel(u), a, c,
                          epsabs=1e-13, epsrel=1e-12, limit=200)[0]
        if j < cols.size - 1:
            b = cols[j + 1]
            total += quad(lambda u: (b - u) / (b - c) * kernel(u), c, b,
                          epsabs=1e-13, epsrel=1e-12, limit=200)[0]
        return total

    # interior near and off the kernel center, a geometric extension
    # column, and the two half-hat end columns
    for i, j in [(150, win.start + 150), (150, win.start + 170),
                 (40, win.start - 3), (150, 0), (150, cols.size - 1)]:
        assert k[i, j] == pytest.approx(oracle(i, j), abs=5e-9)


def test_matrix_rejections():
    model = make_model(1.5)
    grid = SpatialGrid.centered(0.0, 5.0, 51)
    with pytest.raises(ValueError, match="time step must be positive"):
        eu.transition_matrix(model, 0.0, grid)
    with pytest.raises(ValueError, match="increase strictly"):
        eu.transition_matrix(model, 0.1, grid,
                             col_points=np.array([0.0, 1.0, 1.0]))


# -- density propagation -------------------------------------------------------

def test_single_step_is_frozen_density():
    model = ragged_model()
    sgrid = SpatialGrid.centered(0.0, 25.0, 1200)
    out, log = eu.propagate_density(model, eu.GridSpec(1, 0.25), 0.1, sgrid,
                                    oversample=2.0, keep_log=True)
    start = fd.on_grid(model, 0.1, 0.25, sgrid, x=0.1)
    assert np.array_equal(out.values, start.values)
    assert out.tail.c_plus == pytest.approx(float(start.tail.c_plus))
    assert (out.t, out.x0, out.n_steps) == (0.25, 0.1, 1)
    assert log.oversample == 2.0 and log.regrids == ()


@pytest.mark.parametrize("alpha,n_steps,tol,kw", [
    (1.5, 8, 1e-6, dict(b0=0.3)),
    (1.5, 512, 2e-6, dict(b0=0.3)),
    (0.7, 8, 1e-5, dict()),
    (0.7, 64, 2e-4, dict()),
])
def test_constant_coefficients_match_stable_density(alpha, n_steps, tol, kw):
    # the frozen chain is exact for constant coefficients, so p^N at
    # the horizon is the stable density itself for every step count
    model = make_model(alpha, **kw)
    out, log = eu.propagate_density(model, eu.GridSpec(n_steps, 1.0), 0.1,
                                    keep_log=True)
    exact = fd.on_grid(model, 0.1, 1.0, out.grid, x=0.1)
    assert np.abs(out.values - exact.values).max() < tol
    assert out.values.min() > 0.0
    steps = np.arange(1, n_steps + 1)
    assert (np.abs(log.masses - 1.0) <= steps * 1e-5).all()
    assert log.min_values.min() > 0.0
    assert log.n_columns > out.grid.n


def test_long_underresolved_run_stays_within_contract():
    # 512 steps at alpha = 0.7: the one-step kernel spends most of the
    # run far below the grid spacing, the regime the accumulated
    # compensation exists for; this is the loosest case of the 5e-4
    # contract
    model = make_model(0.7)
    out, log = eu.propagate_density(model, eu.GridSpec(512, 1.0), 0.1,
                                    keep_log=True)
    exact = fd.on_grid(model, 0.1, 1.0, out.grid, x=0.1)
    assert np.abs(out.values - exact.values).max() < 5e-4
    assert len(log.regrids) >= 4
    assert out.values.min() > 0.0


def test_mass_and_positivity_on_variable_coefficients():
    model = make_model(1.5, "sine-perturbed", gamma=0.1)
    out, log = eu.propagate_density(model, eu.GridSpec(32, 1.0), 0.1,
                                    keep_log=True)
    steps = np.arange(1, 33)
    assert (np.abs(log.masses - 1.0) <= steps * 1e-5).all()
    assert log.min_values.min() > 0.0
    assert (out.values > 0.0).all()
    assert out.integral() == pytest.approx(1.0, abs=3e-4)


def test_monte_carlo_histogram_cross_check():
    # the density and the sampler are built from the same one-step law
    # by entirely different routes; bin the paths and compare
    model = make_model(1.5, "sine-perturbed", gamma=0.1)
    x0, n_paths = 0.3, 200_000
    out = eu.propagate_density(model, eu.GridSpec(16, 1.0), x0)
    bundle = eu.simulate_bundle(model, eu.GridSpec(16, 1.0), x0, n_paths,
                                seed=5, threads=4)
    edges = np.linspace(x0 - 6.0, x0 + 6.0, 41)
    counts, _ = np.histogram(bundle.terminal_for(16), bins=edges)
    empirical = np.append(counts / n_paths, 1.0 - counts.sum() / n_paths)
    cum = np.concatenate([[0.0], np.cumsum(
        0.5 * (out.values[1:] + out.values[:-1]) * out.grid.dz)])
    binned = np.diff(np.interp(edges, out.grid.points, cum))
    predicted = np.append(binned, max(0.0, 1.0 - binned.sum()))
    tv = 0.5 * np.abs(empirical - predicted).sum()
    assert tv < 0.02


def test_heavy_tail_envelope_fitted_once():
    model = make_model(1.5, "sine-perturbed", gamma=0.1)
    x0 = 0.3
    out16 = eu.propagate_density(model, eu.GridSpec(16, 1.0), x0)
    out32 = eu.propagate_density(model, eu.GridSpec(32, 1.0), x0)

    def edge_ratio(out):
        k = out.grid.n // 10
        r = np.abs(out.grid.points - x0)
        ratio = out.values * (1.0 + r ** 2.5)
        return np.r_[ratio[:k], ratio[-k:]]

    c = 1.05 * edge_ratio(out16).max()
    assert (edge_ratio(out16) <= c).all()
    assert (edge_ratio(out32) <= c).all()


def test_mass_loss_aborts_with_step_index():
    # a window cut at two kernel widths cannot hold a believable tail
    # fit, and the audit must say so on the very first step
    model = make_model(0.7)
    narrow = SpatialGrid.centered(0.0, 2.0, 257)
    with pytest.raises(eu.MassLossError, match="at step 1") as err:
        eu.propagate_density(model, eu.GridSpec(4, 1.0), 0.0, narrow)
    assert err.value.step == 1
    assert 0.99 < err.value.mass < 1.0


def test_propagation_rejections():
    model = make_model(1.5)
    with pytest.raises(ValueError, match="exceeds the model horizon"):
        eu.propagate_density(model, eu.GridSpec(8, 2.0), 0.0)


def test_default_grid_arithmetic():
    model = make_model(1.5)
    grid = eu.default_grid(model, 0.1)
    scale = (model.base_cf_mass * model.coeffs.ellipticity[1] ** 1.5) \
        ** (1.0 / 1.5)
    assert grid.n == 2048
    assert grid.hi == pytest.approx(20.0 * scale)
    assert grid.lo == pytest.approx(-20.0 * scale)
    far = eu.default_grid(model, 25.0)
    assert far.hi == pytest.approx(35.0)
