"""Gauss–Legendre panel quadrature helpers.

All heavy integrals in the package are composite Gauss–Legendre rules
on explicit panel decompositions: oscillation-limited panels for
Fourier inversion, geometrically graded panels toward algebraic
endpoint singularities, and substituted panels for the time
convolutions.  This module only builds nodes and weights; the callers
own the integrands.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def gl_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def panel_rule(edges: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite n-point Gauss–Legendre rule on consecutive panels.

    Parameters
    ----------
    edges : array of shape (m+1,)
        Strictly increasing panel edges.
    n : int
        Points per panel.

    Returns
    -------
    (nodes, weights) : flattened arrays of length m*n.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2:
        raise ValueError("edges must be a 1D array with at least two entries")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be strictly increasing")
    x, w = gl_rule(n)
    a = edges[:-1][:, None]
    half = (0.5 * np.diff(edges))[:, None]
    nodes = a + half * (x[None, :] + 1.0)
    weights = half * w[None, :]
    return nodes.ravel(), weights.ravel()


def geometric_edges(a: float, b: float, first: float, ratio: float = 2.0) -> np.ndarray:
    """Panel edges on [a, b] with widths growing geometrically from ``a``.

    The first panel has width ``first``; widths grow by ``ratio`` until
    ``b`` is reached.  Used to resolve algebraic endpoint behavior: any
    integrand analytic on (a, b] with an algebraic singularity at ``a``
    is resolved to near machine precision by per-panel Gauss rules.
    """
    if not (b > a):
        raise ValueError("need b > a")
    if first <= 0 or ratio <= 1:
        raise ValueError("need first > 0 and ratio > 1")
    edges = [a]
    width = first
    pos = a
    while pos + width < b:
        pos += width
        edges.append(pos)
        width *= ratio
    edges.append(b)
    return np.asarray(edges)


def graded_rule_toward(a: float, b: float, singular_end: str, n: int = 12,
                       first_rel: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Composite GL rule on [a, b] graded toward one endpoint.

    ``singular_end`` is "left" or "right".  ``first_rel`` sets the first
    panel width relative to (b - a).
    """
    span = b - a
    if singular_end == "left":
        edges = geometric_edges(a, b, first_rel * span)
    elif singular_end == "right":
        rev = geometric_edges(0.0, span, first_rel * span)
        edges = b - rev[::-1]
    else:
        raise ValueError("singular_end must be 'left' or 'right'")
    return panel_rule(edges, n)
