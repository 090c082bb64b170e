"""Numerical laboratory for symmetric α-stable driven SDEs.

The package is organized around six building blocks:

- ``stable_law``: exact simulation and characteristic functions of
  symmetric α-stable laws (1D and structured multivariate).
- ``model``: SDE coefficients, assumption checks, generator application.
- ``frozen_density``: Fourier inversion of the frozen transition density
  and its derivatives and tail asymptotics (1D).
- ``euler``: Euler scheme on nested grids and exact propagation of the
  scheme's transition density on a spatial grid.
- ``parametrix``: kernels H and H_N, time-space convolutions, truncated
  series for the exact and discrete densities, and the first-order
  correction functional.
- ``experiments``: configuration, CLI, convergence studies, reporting.
"""

__version__ = "0.1.0"

from . import euler, frozen_density, gridfun, model, profiles, quadrature, rng, stable_law  # noqa: F401,E501
