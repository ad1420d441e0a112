"""One-dimensional sparsity bi-level problem with closed-form surrogates.

Lower level ``x(theta) = argmin_x 1/2 (x - y)^2 + theta |x|`` and loss
``1/2 (x* - x(theta))^2``.  Everything here is explicit and serves as the
reference for the generic surrogate machinery.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .parametric import WeightedSparsity

COLUMNS = ("theta", "loss", "bregman", "partial", "gradient_penalty")


@dataclass(frozen=True)
class ToyInstance:
    x_star: float = 0.3
    y: float = 1.5


def _check_theta(theta):
    if theta < 0:
        raise DomainError(f"theta must be nonnegative, got {theta}")


def toy_lower_level(y, theta):
    _check_theta(theta)
    return float(np.sign(y) * max(abs(y) - theta, 0.0))


def toy_loss(inst, theta):
    return 0.5 * (inst.x_star - toy_lower_level(inst.y, theta)) ** 2


def toy_energy(inst, theta):
    """The toy energy as a generic split energy (quadratic plus weighted |x|)."""
    return WeightedSparsity().split(np.array([theta], dtype=float), np.array([inst.y]))


def toy_surrogates_closed_form(inst, theta):
    """Loss and the three majorizers in closed form.

    Bregman: ``E(x*) - min E`` with the minimum attained at the soft
    threshold.  Partial (l1 side frozen at ``theta sign(x*)``) and gradient
    penalty both reduce to ``1/2 (x* - y + theta sign(x*))^2``.
    """
    _check_theta(theta)
    xs, y = inst.x_star, inst.y
    x = toy_lower_level(y, theta)
    energy = lambda v: 0.5 * (v - y) ** 2 + theta * abs(v)
    q = xs - y + theta * np.sign(xs)
    return {
        "loss": 0.5 * (xs - x) ** 2,
        "bregman": energy(xs) - energy(x),
        "partial": 0.5 * q * q,
        "gradient_penalty": 0.5 * q * q,
    }


def toy_partial_e1(inst, theta):
    """Partial surrogate with the quadratic side frozen: ``z = x* - y``.

    Finite only when ``|y - x*| <= theta``, where it equals
    ``theta |x*| - (y - x*) x*``.
    """
    _check_theta(theta)
    z = inst.x_star - inst.y
    if abs(z) > theta * (1 + 1e-12):
        return np.inf
    return theta * abs(inst.x_star) + z * inst.x_star


def sweep(inst, thetas):
    """Rows ``(theta, loss, bregman, partial, gradient_penalty)`` over a grid."""
    rows = []
    for t in thetas:
        r = toy_surrogates_closed_form(inst, float(t))
        rows.append((float(t), r["loss"], r["bregman"], r["partial"], r["gradient_penalty"]))
    return rows


def collapse_sweep(samples, thetas):
    """Naive ``sum (theta^2 x* - theta y)^2`` against ``sum (x* - y/theta)^2``.

    The naive subgradient penalty of ``(theta x - y)^2`` vanishes at
    ``theta = 0`` for any data; dividing by the scale removes that collapse.
    The reformulated column is ``inf`` at ``theta = 0``.
    """
    xs = np.array([s[0] for s in samples], dtype=float)
    ys = np.array([s[1] for s in samples], dtype=float)
    rows = []
    for t in thetas:
        t = float(t)
        naive = float(np.sum((t * t * xs - t * ys) ** 2))
        reform = float(np.sum((xs - ys / t) ** 2)) if t != 0 else np.inf
        rows.append((t, naive, reform))
    return rows
