"""Scaled profile functions of 1D symmetric α-stable laws.

Every frozen density query in the package reduces, by self-similarity,
to the one-parameter family

    P[β, cos](ζ) = (1/π) ∫₀^∞ u^β e^{-u^α} cos(uζ) du
    P[β, sin](ζ) = (1/π) ∫₀^∞ u^β e^{-u^α} sin(uζ) du

The standard density profile is q = P[0, cos] (the law with
characteristic function e^{-|u|^α}); spatial derivatives alternate
through the ladder q' = -P[1, sin], q'' = -P[2, cos], q''' = P[3, sin].
The jump-kernel profile is r = P[α, cos]: the inverse transform of
|u|^α e^{-|u|^α}, which also equals (q(ζ) + ζ q'(ζ))/α.  The running
integral ∫₀^ζ q is P[-1, sin] (plus the constant 1/2 hidden in its
k = 0 tail term).

Evaluation is hybrid: dense tables with cubic interpolation on
|ζ| ≤ 32, and the power-tail expansion

    P[β, tr](ζ) ~ (1/π) Σ_k (-1)^k/k! Γ(1+β+kα) tr(π(1+β+kα)/2) ζ^{-1-β-kα}

beyond (convergent for α < 1, asymptotic with optimal truncation for
α ≥ 1; the truncation error is tracked and is far below table accuracy
at the switch radius).  ``direct_transform`` is the slow high-accuracy
quadrature used to build tables, serve accuracy-critical queries, and
to cross-check the series in tests.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import gammaln

from .quadrature import gl_rule, panel_rule, geometric_edges

TABLE_ZMAX = 32.0
TABLE_DZ = 0.01
SWITCH = 31.8
# e^{-U^alpha} U^beta below this is negligible against double precision
_LOG_CUTOFF = 39.0
# max |phase| of the oscillatory factor per 16-point panel
_PANEL_PHASE = 6.0
_CHUNK = 4_000_000


def _freq_cutoff(alpha: float, beta: float) -> float:
    u = (_LOG_CUTOFF) ** (1.0 / alpha) + 1.0
    for _ in range(4):
        u = (_LOG_CUTOFF + max(beta, 0.0) * np.log(max(u, 1.0))) ** (1.0 / alpha)
    return u


def _transform_bucket(alpha: float, beta: float, parity: str,
                      az: np.ndarray, n_gl: int = 20) -> np.ndarray:
    """Quadrature of P[beta, parity] for one batch of |ζ| of similar size."""
    U = _freq_cutoff(alpha, beta)
    u0 = min(1.0, 0.5 * U)
    # graded panels into u = 0 resolve the u^beta and u^alpha endpoint behavior
    edges0 = geometric_edges(0.0, u0, first=u0 * 1e-12, ratio=2.0)
    zmax = float(az.max())
    w_osc = _PANEL_PHASE / zmax if zmax > 0 else np.inf
    # grow panels geometrically so both the curvature of e^{-u^alpha} near
    # u0 and the oscillation of trig(u zeta) stay resolved per panel
    edges1 = [u0]
    w = 0.5 * u0
    while edges1[-1] < U:
        w = min(1.6 * w, w_osc, 6.0)
        edges1.append(min(edges1[-1] + w, U))
    edges1 = np.asarray(edges1)
    nodes0, w0 = panel_rule(edges0, n_gl)
    nodes1, w1 = panel_rule(edges1, n_gl)
    u = np.concatenate([nodes0, nodes1])
    w = np.concatenate([w0, w1])
    amp = w * u**beta * np.exp(-(u**alpha))
    trig = np.cos if parity == "cos" else np.sin
    out = np.empty_like(az)
    step = max(1, int(_CHUNK // max(u.size, 1)))
    for i in range(0, az.size, step):
        blk = az[i:i + step]
        out[i:i + step] = trig(np.outer(blk, u)) @ amp
    return out / np.pi


def direct_transform(alpha: float, beta: float, parity: str,
                     zeta) -> np.ndarray:
    """High-accuracy quadrature evaluation of P[beta, parity](ζ).

    Parameters
    ----------
    alpha : float in (0, 2)
    beta : float > -1 for parity "cos", > -2 for parity "sin"
    parity : "cos" or "sin"
    zeta : array_like
        Evaluation points (any sign; parity symmetry applied).

    Returns
    -------
    ndarray of the same shape as ``zeta``.

    Notes
    -----
    Cost grows with max|ζ| through the oscillation-limited panel count;
    intended for table construction and accuracy-critical point queries,
    not for inner loops.
    """
    if parity not in ("cos", "sin"):
        raise ValueError("parity must be 'cos' or 'sin'")
    if not (0.0 < alpha < 2.0):
        raise ValueError(f"alpha must be in (0, 2), got {alpha}")
    z = np.atleast_1d(np.asarray(zeta, dtype=float))
    out = np.empty_like(z)
    az = np.abs(z)
    bounds = [0.0, 2.0, 8.0, 16.0, 32.0, 128.0, np.inf]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        m = (az >= lo) & (az < hi)
        if m.any():
            out[m] = _transform_bucket(alpha, beta, parity, az[m])
    if parity == "sin":
        out[z < 0.0] = -out[z < 0.0]
    return out.reshape(np.shape(zeta)) if np.ndim(zeta) else float(out[0])


def tail_series(alpha: float, beta: float, parity: str, zeta,
                kmax: int = 80) -> tuple[np.ndarray, np.ndarray]:
    """Power-tail expansion of P[beta, parity] for large positive ζ.

    Returns ``(value, err)`` where ``err`` is the magnitude of the first
    omitted term (the standard bound at optimal truncation).  Terms are
    accumulated in log space; per-element accumulation stops when terms
    start growing or fall below 1e-16 relatively.
    """
    z = np.atleast_1d(np.asarray(zeta, dtype=float))
    if np.any(z <= 0.0):
        raise ValueError("tail series requires zeta > 0")
    logz = np.log(z)
    acc = np.zeros_like(z)
    err = np.full_like(z, np.inf)
    prev_mag = np.full_like(z, np.inf)
    active = np.ones(z.shape, dtype=bool)
    for k in range(kmax + 1):
        s = 1.0 + beta + k * alpha
        if abs(s) < 1e-12:
            # regularized constant term: lim Γ(s) sin(πs/2) = π/2
            if parity == "sin":
                acc[active] += 0.5
            else:
                raise ValueError("cos-parity series hits the Γ pole at k=0")
            continue
        trig = np.cos(0.5 * np.pi * s) if parity == "cos" else np.sin(0.5 * np.pi * s)
        if abs(trig) < 1e-9:
            # exact zero of the trig factor up to rounding; skip the term
            continue
        sign = (-1.0) ** k * np.sign(trig)
        logmag = (gammaln(s) - gammaln(k + 1.0) + np.log(abs(trig))
                  - s * logz - np.log(np.pi))
        mag_full = np.exp(logmag)
        growing = mag_full >= prev_mag
        stopnow = active & growing
        err[stopnow] = mag_full[stopnow]
        active &= ~growing
        if not active.any():
            break
        acc[active] += sign * mag_full[active]
        small = active & (mag_full <= 1e-16 * np.maximum(np.abs(acc), 1e-300))
        err[small] = mag_full[small]
        active &= ~small
        prev_mag = np.where(active, mag_full, prev_mag)
        if not active.any():
            break
    err[active] = prev_mag[active]
    shape = np.shape(zeta)
    if shape:
        return acc.reshape(shape), err.reshape(shape)
    return float(acc[0]), float(err[0])


def _cubic_interp(table: np.ndarray, dz: float, x: np.ndarray) -> np.ndarray:
    """4-point Lagrange interpolation on a uniform table starting at 0."""
    n = table.size
    t = x / dz
    idx = np.clip(t.astype(np.int64), 1, n - 3)
    s = t - idx
    sm1 = s - 1.0
    sm2 = s - 2.0
    sp1 = s + 1.0
    w0 = -s * sm1 * sm2 / 6.0
    w1 = sp1 * sm1 * sm2 / 2.0
    w2 = -sp1 * s * sm2 / 2.0
    w3 = sp1 * s * sm1 / 6.0
    return (w0 * table[idx - 1] + w1 * table[idx]
            + w2 * table[idx + 1] + w3 * table[idx + 2])


class _FarSeries:
    """Evaluator const + L·log(z/Z) + z^A · Σ_k c_k (z^{-α})^k for z ≥ Z.

    A frozen-coefficient form of the power tails: truncation happens
    once, at the switch radius Z where the terms are largest, so the
    stored polynomial is valid (and only more accurate) further out.
    Horner evaluation replaces the per-call term loop of the adaptive
    series on hot paths.
    """

    def __init__(self, alpha: float, lead: float, coefs,
                 const: float = 0.0, logcoef: float = 0.0):
        self.alpha = alpha
        self.lead = lead
        self.coefs = np.asarray(coefs, dtype=float)
        self.const = const
        self.logcoef = logcoef

    def __call__(self, z: np.ndarray) -> np.ndarray:
        out = np.full_like(z, self.const)
        if self.coefs.size:
            w = z ** -self.alpha
            out += z**self.lead * npoly.polyval(w, self.coefs)
        if self.logcoef != 0.0:
            out += self.logcoef * np.log(z / SWITCH)
        return out


def _profile_far_series(alpha: float, beta: float, parity: str) -> _FarSeries:
    """Frozen tail series of P[β, parity]; same terms as ``tail_series``."""
    coefs: list[float] = []
    const = 0.0
    prev = np.inf
    for k in range(0, 61):
        s = 1.0 + beta + k * alpha
        if abs(s) < 1e-12:
            if parity != "sin":
                raise ValueError("cos-parity series hits the Γ pole at k=0")
            const += 0.5
            coefs.append(0.0)
            continue
        trig = np.cos(0.5 * np.pi * s) if parity == "cos" \
            else np.sin(0.5 * np.pi * s)
        if abs(trig) < 1e-9:
            coefs.append(0.0)
            continue
        c = ((-1.0) ** k / np.pi
             * np.exp(gammaln(s) - gammaln(k + 1.0)) * trig)
        mag = abs(c) * SWITCH**-s
        if k > 3 and mag > prev:
            break
        coefs.append(c)
        prev = mag
        if mag < 1e-18:
            break
    return _FarSeries(alpha, -1.0 - beta, coefs, const=const)


def _integrated_far_series(alpha: float, base: float,
                           coefs) -> _FarSeries:
    """Running integral ``base + Σ_k ∫_Z^z c_k s^{-α(k+1)} ds``.

    Powers cross zero when α(k+1) = 1 (α = 1, 1/2, ...); that term
    integrates to a logarithm and is carried separately.
    """
    poly: list[float] = []
    logcoef = 0.0
    for k, c in enumerate(coefs):
        p = 1.0 - alpha * (k + 1.0)
        if abs(p) < 1e-12:
            logcoef += c
            poly.append(0.0)
        else:
            poly.append(c / p)
    far = _FarSeries(alpha, 1.0 - alpha, poly, logcoef=logcoef)
    far.const = base - (0.0 if not poly else
                        SWITCH**far.lead * npoly.polyval(SWITCH**-alpha,
                                                         far.coefs))
    return far


class Profile:
    """Hybrid table/series evaluator for one P[β, parity] at fixed α."""

    def __init__(self, alpha: float, beta: float, parity: str):
        self.alpha = alpha
        self.beta = beta
        self.parity = parity
        grid = np.arange(0.0, TABLE_ZMAX + TABLE_DZ / 2, TABLE_DZ)
        self._table = direct_transform(alpha, beta, parity, grid)
        self._even = parity == "cos"
        self._far: _FarSeries | None = None

    def __call__(self, zeta) -> np.ndarray:
        z = np.atleast_1d(np.asarray(zeta, dtype=float))
        az = np.abs(z)
        out = np.empty_like(z)
        near = az <= SWITCH
        if near.any():
            out[near] = _cubic_interp(self._table, TABLE_DZ, az[near])
        far = ~near
        if far.any():
            if self._far is None:
                self._far = _profile_far_series(self.alpha, self.beta,
                                                self.parity)
            out[far] = self._far(az[far])
        if not self._even:
            out[z < 0.0] = -out[z < 0.0]
        if np.ndim(zeta):
            return out.reshape(np.shape(zeta))
        return float(out[0])


# sign and (beta, parity) ladder for d^a/dζ^a of q
_DERIV_LADDER = {
    0: (1.0, 0.0, "cos"),
    1: (-1.0, 1.0, "sin"),
    2: (-1.0, 2.0, "cos"),
    3: (1.0, 3.0, "sin"),
}


class ProfileSet:
    """All profiles of one stability index, built lazily and cached.

    Exposes the density profile ladder, the jump profile r with its
    antiderivatives J1, J2, the running integral Q0(ζ) = ∫₀^ζ q and the
    first-moment integral M0(ζ) = ∫₀^ζ sq(s)ds used for product
    integration of one-step kernels against hat functions.
    """

    def __init__(self, alpha: float):
        if not (0.0 < alpha < 2.0):
            raise ValueError(f"alpha must be in (0, 2), got {alpha}")
        self.alpha = alpha
        self.omega = min(1.0, 1.0 / alpha)
        self._profiles: dict[tuple[float, str], Profile] = {}
        self._m_table: np.ndarray | None = None
        self._j2_table: np.ndarray | None = None
        self._m_series: _FarSeries | None = None
        self._j2_series: _FarSeries | None = None

    def profile(self, beta: float, parity: str) -> Profile:
        key = (round(beta, 12), parity)
        if key not in self._profiles:
            self._profiles[key] = Profile(self.alpha, beta, parity)
        return self._profiles[key]

    def density(self, zeta, deriv: int = 0):
        """q^{(a)}(ζ) for a = deriv ∈ {0, 1, 2, 3}."""
        try:
            sign, beta, parity = _DERIV_LADDER[deriv]
        except KeyError:
            raise ValueError(f"derivative order {deriv} not supported") from None
        return sign * self.profile(beta, parity)(zeta)

    def density_accurate(self, zeta, deriv: int = 0):
        """Like ``density`` but through the direct quadrature."""
        sign, beta, parity = _DERIV_LADDER[deriv]
        return sign * direct_transform(self.alpha, beta, parity, zeta)

    def jump(self, zeta):
        """r(ζ): inverse cosine transform of |u|^α e^{-|u|^α} (zero mean)."""
        return self.profile(self.alpha, "cos")(zeta)

    def cdf0(self, zeta):
        """Q0(ζ) = ∫₀^ζ q(s) ds (odd; Q0(∞) = 1/2)."""
        return self.profile(-1.0, "sin")(zeta)

    def mass_between(self, a, b):
        """∫_a^b q(s) ds for array arguments."""
        return self.cdf0(b) - self.cdf0(a)

    def tail_mass(self, zeta):
        """∫_ζ^∞ q for ζ > 0, by the series of 1/2 - Q0 (stable far out)."""
        z = np.atleast_1d(np.asarray(zeta, dtype=float))
        if np.any(z <= 0):
            raise ValueError("tail_mass requires zeta > 0")
        val = 0.5 - self.cdf0(z)
        return val.reshape(np.shape(zeta)) if np.ndim(zeta) else float(val[0])

    # -- cumulative antiderivative tables --------------------------------

    def _cumulative_table(self, fn) -> np.ndarray:
        """∫₀^ζ fn over the table grid by per-cell 8-point Gauss rules."""
        grid = np.arange(0.0, TABLE_ZMAX + TABLE_DZ / 2, TABLE_DZ)
        x, w = gl_rule(8)
        mid = 0.5 * (grid[:-1] + grid[1:])
        half = 0.5 * TABLE_DZ
        nodes = mid[:, None] + half * x[None, :]
        vals = fn(nodes.ravel()).reshape(nodes.shape)
        cell = half * (vals @ w)
        return np.concatenate([[0.0], np.cumsum(cell)])

    def _build_m_table(self) -> np.ndarray:
        return self._cumulative_table(lambda s: s * self.density(s))

    def moment0(self, zeta):
        """M0(ζ) = ∫₀^ζ s q(s) ds (even in ζ; grows like ζ^{1-α} tail-wise)."""
        if self._m_table is None:
            self._m_table = self._build_m_table()
        z = np.atleast_1d(np.abs(np.asarray(zeta, dtype=float)))
        out = np.empty_like(z)
        near = z <= SWITCH
        if near.any():
            out[near] = _cubic_interp(self._m_table, TABLE_DZ, z[near])
        far = ~near
        if far.any():
            if self._m_series is None:
                # s·q has the tail Σ_m coef_m ζ^{-mα}; its running
                # integral from SWITCH freezes into a _FarSeries
                self._m_series = _integrated_far_series(
                    self.alpha, float(self.moment0(SWITCH)),
                    self._tail_coefs(
                        lambda m: gammaln(1.0 + m * self.alpha)
                        - gammaln(m + 1.0)))
            out[far] = self._m_series(z[far])
        if np.ndim(zeta):
            return out.reshape(np.shape(zeta))
        return float(out[0])

    def _tail_coefs(self, log_mag) -> list[float]:
        """Coefficients (-1)^{m+1}/π · e^{log_mag(m)} · sin(πmα/2).

        Slot m-1 multiplies ζ^{-mα}; truncated at the smallest term
        magnitude at the SWITCH radius, mirroring ``tail_series``.
        """
        alpha = self.alpha
        coefs: list[float] = []
        prev = np.inf
        for m in range(1, 40):
            trig = np.sin(0.5 * np.pi * m * alpha)
            if abs(trig) < 1e-9:
                coefs.append(0.0)
                continue
            c = (-1.0) ** (m + 1) / np.pi * np.exp(log_mag(m)) * trig
            mag = abs(c) * SWITCH ** (-m * alpha)
            if m > 3 and mag > prev:
                break
            coefs.append(c)
            prev = mag
            if mag < 1e-18:
                break
        return coefs

    # -- jump-kernel antiderivatives --------------------------------------

    def jump1(self, zeta):
        """J1(ζ) = ∫₀^ζ r(s) ds = P[α-1, sin] (odd; J1(∞) = 0)."""
        return self.profile(self.alpha - 1.0, "sin")(zeta)

    def jump2(self, zeta):
        """J2(ζ) = ∫₀^ζ J1(s) ds (even); J2'' = r pairs hats against r."""
        if self._j2_table is None:
            self._j2_table = self._cumulative_table(self.jump1)
        z = np.atleast_1d(np.abs(np.asarray(zeta, dtype=float)))
        out = np.empty_like(z)
        near = z <= SWITCH
        if near.any():
            out[near] = _cubic_interp(self._j2_table, TABLE_DZ, z[near])
        far = ~near
        if far.any():
            if self._j2_series is None:
                # J1 has the P[α-1, sin] tail Σ_m coef_m ζ^{-mα} with an
                # (m-1)! factorial; the integral crosses a log branch
                # whenever mα = 1 (α = 1, 1/2, 1/3, ...)
                self._j2_series = _integrated_far_series(
                    self.alpha, float(self.jump2(SWITCH)),
                    self._tail_coefs(
                        lambda m: gammaln(m * self.alpha) - gammaln(m)))
            out[far] = self._j2_series(z[far])
        if np.ndim(zeta):
            return out.reshape(np.shape(zeta))
        return float(out[0])


@lru_cache(maxsize=16)
def _profile_set_cached(alpha_key: float) -> ProfileSet:
    return ProfileSet(alpha_key)


def get_profiles(alpha: float) -> ProfileSet:
    """Shared per-α ProfileSet (α bucketed at 1e-12 for cache identity)."""
    return _profile_set_cached(round(float(alpha), 12))


def q_tail_coefficient(alpha: float) -> float:
    """Leading tail constant c₁ in q(ζ) ~ c₁ ζ^{-1-α}: sin(πα/2)Γ(1+α)/π."""
    from scipy.special import gamma
    return float(np.sin(0.5 * np.pi * alpha) * gamma(1.0 + alpha) / np.pi)
