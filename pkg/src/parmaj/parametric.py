"""Parametrized energy families ``theta -> SplitEnergy``.

A family builds the split energy for one data item and pulls gradients with
respect to atom data (centers, weights, linear terms, linear maps) back to
the parameter vector.  Atom-data gradients are passed as one dict per atom
with keys ``y``, ``weight``, ``c`` and ``op``; ``op`` holds pairs ``(u, v)``
standing for the gradient of ``<u, A v>`` with respect to the map.
"""

import numpy as np

from . import convex
from .convex import SplitEnergy
from .linops import MatrixMap


def new_cotangent():
    return ({}, {})


def accumulate(cot, key, value):
    if key == "op":
        cot.setdefault("op", []).append(value)
    elif key in cot:
        cot[key] = cot[key] + value
    else:
        cot[key] = value


class ParametricEnergy:
    """Interface for families; subclasses implement ``split`` and ``pullback``."""

    def split(self, theta, y):
        raise NotImplementedError

    def pullback(self, theta, y, cot):
        raise NotImplementedError

    def solve(self, theta, y, config=None, warm=None):
        """Lower-level minimizer ``x(theta)`` and its solver residual."""
        from .surrogates import minimize_energy
        return minimize_energy(self.split(theta, y), config, warm)

    def solve_batch(self, theta, ys, config=None, warm=None):
        out = [self.solve(theta, y, config, None if warm is None else warm[i]) for i, y in enumerate(ys)]
        return [o[0] for o in out], [o[1] for o in out]


class WeightedSparsity(ParametricEnergy):
    """``1/2 |x - y|^2 + sum_j theta_j |(A x)_j|``.

    A scalar-sized theta gives a single shared weight; with ``matrix=None`` the
    map is the identity.  The one-dimensional sparsity toy is the case
    ``n = 1`` with a scalar weight.
    """

    def __init__(self, matrix=None):
        self.op = None if matrix is None else MatrixMap(matrix)

    def _weight(self, theta):
        theta = np.asarray(theta, dtype=float)
        return float(theta.reshape(-1)[0]) if theta.size == 1 else theta

    def split(self, theta, y):
        return SplitEnergy(convex.quadratic(y), convex.l1(self._weight(theta), self.op), y=y, theta=theta)

    def pullback(self, theta, y, cot):
        theta = np.asarray(theta, dtype=float)
        gw = cot[1].get("weight", 0.0)
        return np.broadcast_to(np.sum(gw) if theta.size == 1 else gw, theta.shape).astype(float).copy()
