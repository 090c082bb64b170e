"""Exact simulation and characteristic functions of symmetric stable laws.

Conventions
-----------
A law is specified by the stability index α ∈ (0, 2), a drift vector γ
and a finite symmetric spectral measure λ on the unit sphere.  The time-t
characteristic function is

    E exp(i⟨u, Z_t⟩) = exp( i t ⟨γ, u⟩ - t ∫ |⟨s, u⟩|^α λ(ds) ).

All scale parameters in this package live in these "characteristic
function units": an isotropic measure of mass m contributes the
exponent -t m |u|^α directly.  Translating a measure given in
Lévy-measure normalization ν(ds, dρ) = λ̄(ds) ρ^{-1-α} dρ multiplies the
mass by C_α = Γ(1-α) cos(πα/2)/α (α ≠ 1; π/2 at α = 1); see
``levy_to_cf_mass``.

Sampling uses the Chambers-Mallows-Stuck representation in the
symmetric case and Kanter's representation of one-sided laws for the
sub-Gaussian construction of isotropic vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def cf_unit_constant(alpha: float) -> float:
    """C_α such that a unit Lévy-normalized measure has CF mass C_α.

    C_α = Γ(1-α) cos(πα/2)/α for α ≠ 1 and π/2 for α = 1.  Evaluated in
    the equivalent form Γ(2-α)·(π/2α)·sinc((1-α)/2), which is smooth
    through α = 1 where the defining formula is a 0·∞ limit.
    """
    from scipy.special import gamma
    if not 0.0 < alpha < 2.0:
        raise ValueError(f"alpha must be in (0, 2), got {alpha}")
    return float(gamma(2.0 - alpha) * (np.pi / (2.0 * alpha))
                 * np.sinc((1.0 - alpha) / 2.0))


def levy_to_cf_mass(alpha: float, levy_mass: float) -> float:
    """Convert a spectral mass in Lévy normalization to CF units."""
    return cf_unit_constant(alpha) * levy_mass


def sample_1d(alpha: float, n: int, rng: np.random.Generator,
              t: float = 1.0, cf_scale: float = 1.0,
              drift: float = 0.0) -> np.ndarray:
    """Draw n i.i.d. samples of a 1D symmetric α-stable increment.

    The law has characteristic function
    exp(i t drift u - t cf_scale |u|^α).

    Parameters
    ----------
    alpha : float in (0, 2)
    n : int
        Number of samples.
    rng : numpy Generator
    t : float
        Time horizon (scales as t^{1/α} by self-similarity).
    cf_scale : float
        Spectral mass in CF units; must be positive.
    drift : float

    Notes
    -----
    Chambers-Mallows-Stuck: with V uniform on (-π/2, π/2) and W standard
    exponential,

        S = sin(αV)/cos(V)^{1/α} · [cos((1-α)V)/W]^{(1-α)/α}

    has characteristic function e^{-|u|^α}.  At α = 1 the second factor
    has exponent 0 and S degenerates to tan V, the standard Cauchy, so
    no branch is needed.
    """
    if not 0.0 < alpha < 2.0:
        raise ValueError(f"alpha must be in (0, 2), got {alpha}")
    if cf_scale <= 0.0 or t <= 0.0:
        raise ValueError("t and cf_scale must be positive")
    v = rng.uniform(-np.pi / 2.0, np.pi / 2.0, size=n)
    w = rng.standard_exponential(size=n)
    s = (np.sin(alpha * v) / np.cos(v) ** (1.0 / alpha)
         * (np.cos((1.0 - alpha) * v) / w) ** ((1.0 - alpha) / alpha))
    return drift * t + (cf_scale * t) ** (1.0 / alpha) * s


def sample_one_sided(alpha_pos: float, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Positive strictly stable samples with Laplace transform e^{-s^α'}.

    Kanter's representation for α' ∈ (0, 1): with V uniform on (0, π)
    and W standard exponential,

        A = sin(α'V)/sin(V)^{1/α'} · [sin((1-α')V)/W]^{(1-α')/α'}.

    At α' = 1/2 this reduces to 1/(2G²) for a standard Gaussian G (via
    Box-Muller), whose Laplace transform is e^{-√s}, fixing the
    normalization.
    """
    ap = alpha_pos
    if not 0.0 < ap < 1.0:
        raise ValueError(f"one-sided index must be in (0, 1), got {ap}")
    v = rng.uniform(0.0, np.pi, size=n)
    w = rng.standard_exponential(size=n)
    return (np.sin(ap * v) / np.sin(v) ** (1.0 / ap)
            * (np.sin((1.0 - ap) * v) / w) ** ((1.0 - ap) / ap))


class SpectralMeasure:
    """Finite symmetric spectral measure on the unit sphere (CF units)."""

    dim: int

    def cf_exponent(self, alpha: float, u: np.ndarray) -> np.ndarray:
        """∫ |⟨s, u⟩|^α λ(ds) for u of shape (..., dim)."""
        raise NotImplementedError

    def sample(self, alpha: float, t: float, n: int,
               rng: np.random.Generator) -> np.ndarray:
        """n draws of the driftless increment over time t, shape (n, dim)."""
        raise NotImplementedError

    def spectral_bounds(self, alpha: float) -> tuple[float, float]:
        """(C1, C2) with C1 ≤ ∫|⟨s,u⟩|^α λ(ds) ≤ C2 on the unit sphere."""
        u = _unit_sphere_grid(self.dim)
        vals = self.cf_exponent(alpha, u)
        return float(vals.min()), float(vals.max())


def _unit_sphere_grid(dim: int, n: int = 4096) -> np.ndarray:
    if dim == 1:
        return np.array([[1.0]])
    if dim == 2:
        th = np.linspace(0.0, np.pi, n, endpoint=False)
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    # Fibonacci lattice; adequate for the extremal search in low dimension
    if dim == 3:
        k = np.arange(n) + 0.5
        phi = np.arccos(1.0 - 2.0 * k / n)
        th = np.pi * (1.0 + 5.0**0.5) * k
        return np.stack([np.cos(th) * np.sin(phi),
                         np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    rng = np.random.default_rng(0)
    g = rng.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class OneDim(SpectralMeasure):
    """1D symmetric measure: exponent mass·|u|^α."""

    mass: float = 1.0
    dim: int = field(default=1, init=False)

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")

    def cf_exponent(self, alpha, u):
        u = np.asarray(u, dtype=float)
        return self.mass * np.abs(u[..., 0] if u.ndim > 1 else u) ** alpha

    def sample(self, alpha, t, n, rng):
        return sample_1d(alpha, n, rng, t=t, cf_scale=self.mass)[:, None]


@dataclass(frozen=True)
class Isotropic(SpectralMeasure):
    """Rotation-invariant measure: exponent mass·|u|^α in any dimension."""

    mass: float
    dim: int = 2

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    def cf_exponent(self, alpha, u):
        u = np.asarray(u, dtype=float)
        return self.mass * np.linalg.norm(u, axis=-1) ** alpha

    def sample(self, alpha, t, n, rng):
        # sub-Gaussian construction: X = σ √A G with A one-sided
        # (α/2)-stable gives E e^{i⟨u,X⟩} = e^{-(σ²|u|²/2)^{α/2}}, so
        # σ = √2 (m t)^{1/α} restores the exponent m t |u|^α
        a = sample_one_sided(alpha / 2.0, n, rng)
        g = rng.standard_normal((n, self.dim))
        pref = np.sqrt(2.0) * (self.mass * t) ** (1.0 / alpha)
        return pref * np.sqrt(a)[:, None] * g


@dataclass(frozen=True)
class Discrete(SpectralMeasure):
    """Atomic measure Σ m_i δ_{s_i}; directions are unit vectors.

    The law only depends on the symmetrization of the measure, so atoms
    are folded onto canonical representatives (±s merged) at
    construction; ``directions``/``masses`` keep the folded form.
    """

    directions: np.ndarray
    masses: np.ndarray
    dim: int = field(default=0, init=False)

    def __init__(self, directions, masses):
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        m = np.asarray(masses, dtype=float).ravel()
        if d.shape[0] != m.size:
            raise ValueError("one mass per direction required")
        if np.any(m <= 0):
            raise ValueError("masses must be positive")
        norms = np.linalg.norm(d, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero direction")
        d = d / norms[:, None]
        folded: dict[tuple, float] = {}
        for row, mass in zip(d, m):
            sgn = 1.0
            for c in row:
                if abs(c) > 1e-14:
                    sgn = 1.0 if c > 0 else -1.0
                    break
            key = tuple(np.round(sgn * row, 14))
            folded[key] = folded.get(key, 0.0) + float(mass)
        dirs = np.array(sorted(folded.keys()))
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "masses",
                           np.array([folded[tuple(r)] for r in dirs]))
        object.__setattr__(self, "dim", dirs.shape[1])

    def cf_exponent(self, alpha, u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        proj = np.abs(u @ self.directions.T) ** alpha
        out = proj @ self.masses
        return out if out.size > 1 else float(out[0])

    def sample(self, alpha, t, n, rng):
        out = np.zeros((n, self.dim))
        for s, m in zip(self.directions, self.masses):
            amp = sample_1d(alpha, n, rng, t=t, cf_scale=m)
            out += amp[:, None] * s[None, :]
        return out


@dataclass(frozen=True)
class StableSpec:
    """Full specification of a symmetric stable driver."""

    alpha: float
    measure: SpectralMeasure
    drift: np.ndarray | float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must be in (0, 2), got {self.alpha}")
        g = np.atleast_1d(np.asarray(self.drift, dtype=float))
        if g.size == 1 and self.measure.dim > 1:
            g = np.full(self.measure.dim, float(g[0]))
        if g.size != self.measure.dim:
            raise ValueError("drift dimension mismatch")
        object.__setattr__(self, "drift", g)


def cf(spec: StableSpec, t: float, u: np.ndarray) -> np.ndarray:
    """Characteristic function of Z_t at frequency rows u (..., dim)."""
    u = np.asarray(u, dtype=float)
    squeeze = False
    if u.ndim == 1 and spec.measure.dim == 1 and u.shape[-1] != 1:
        u = u[:, None]
        squeeze = True
    expo = spec.measure.cf_exponent(spec.alpha, u)
    phase = u @ spec.drift
    out = np.exp(1j * t * phase - t * np.asarray(expo))
    return out if not squeeze else out.reshape(-1)


def sample_vector(spec: StableSpec, t: float, n: int,
                  rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. draws of Z_t under ``spec``, shape (n, dim)."""
    if t <= 0:
        raise ValueError("t must be positive")
    z = spec.measure.sample(spec.alpha, t, n, rng)
    return z + t * spec.drift[None, :]


def empirical_cf(samples: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Monte Carlo characteristic function of sample rows at frequencies u.

    1d samples accept a flat array of scalar frequencies; vector samples
    expect frequency rows matching their dimension.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    u2 = np.asarray(u, dtype=float)
    if u2.ndim == 0:
        u2 = u2.reshape(1, 1)
    elif u2.ndim == 1:
        u2 = u2[:, None] if s.shape[1] == 1 else u2[None, :]
    return np.exp(1j * s @ u2.T).mean(axis=0)
