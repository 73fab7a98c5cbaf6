"""Gauss rules on the reference triangle {(0,0), (1,0), (0,1)} and on [0, 1]."""
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def line_rule(degree: int):
    """Gauss-Legendre points and weights on [0, 1], exact up to ``degree``."""
    n = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree: int):
    """Collapsed (Duffy) tensor Gauss rule on the reference triangle.

    The collapse adds one polynomial degree in the first direction, so the
    rule integrates all polynomials of total degree <= ``degree`` exactly.
    Weights sum to the reference area 1/2.
    """
    n = max(1, (degree + 3) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    a, wa = 0.5 * (x + 1.0), 0.5 * w
    u, v = np.meshgrid(a, a, indexing="ij")
    wu, wv = np.meshgrid(wa, wa, indexing="ij")
    xi = u.ravel()
    eta = (v * (1.0 - u)).ravel()
    weights = (wu * wv * (1.0 - u)).ravel()
    return np.stack([xi, eta], axis=1), weights
