"""Energy atoms and the convex-analysis toolkit built on them.

An energy is a sum of two atoms.  Each atom knows how to evaluate itself,
return a canonical subgradient, evaluate its convex conjugate and compute
its proximal map.  Conjugates of indicator-type terms return ``inf`` when
the argument is infeasible instead of raising.

Entropy atoms act on probability vectors stored along the last axis; a field
of shape ``(H, W, C)`` is treated as ``H*W`` independent simplex points.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.optimize import lsq_linear
from scipy.special import wrightomega

from .errors import ContractError, DomainError
from .linops import LinearMap, as_matrix

KINDS = ("quadratic", "l1", "linear", "entropy", "zero")
ENTROPY_FLOOR = 1e-12
SIMPLEX_TOL = 1e-8


def residual_tol(x, base=1e-8):
    """Absolute tolerance scaled by ``max(1, |x|_inf)``."""
    x = np.asarray(x, dtype=float)
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    return base * max(1.0, scale)


@dataclass(frozen=True)
class EnergyAtom:
    """One convex term of an energy.

    kind
        ``quadratic``: ``weight/2 * ||x - y||^2``
        ``l1``: ``sum(weight * |A x|)`` (``op=None`` means A = identity)
        ``linear``: ``<c, x>``
        ``entropy``: ``sum x log x - <c, x>`` restricted to the simplex
        ``zero``: ``0``
    """

    kind: str
    y: Optional[np.ndarray] = None
    weight: Union[float, np.ndarray] = 1.0
    op: Optional[LinearMap] = None
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown atom kind {self.kind!r}")
        if self.kind == "quadratic" and not np.isscalar(self.weight):
            raise ValueError("quadratic atoms take a scalar weight")
        if np.any(np.asarray(self.weight) < 0):
            raise ValueError("atom weights must be nonnegative")

    @property
    def modulus(self):
        """Strong-convexity modulus with respect to the Euclidean norm."""
        if self.kind == "quadratic":
            return float(self.weight)
        if self.kind == "entropy":
            # KL(x, z) >= 1/2 |x - z|_1^2 >= 1/2 |x - z|_2^2 per simplex point
            return 1.0
        return 0.0

    @property
    def smooth_conjugate(self):
        return self.kind in ("quadratic", "entropy")

    def _c(self, like):
        return np.zeros_like(like, dtype=float) if self.c is None else self.c

    def __call__(self, x):
        return atom_eval(self, x)


def quadratic(y, weight=1.0):
    return EnergyAtom("quadratic", y=np.asarray(y, dtype=float), weight=float(weight))


def l1(weight=1.0, op=None):
    w = weight if np.isscalar(weight) else np.asarray(weight, dtype=float)
    return EnergyAtom("l1", weight=w, op=op)


def linear(c):
    return EnergyAtom("linear", c=np.asarray(c, dtype=float))


def entropy(c=None):
    return EnergyAtom("entropy", c=None if c is None else np.asarray(c, dtype=float))


def zero():
    return EnergyAtom("zero")


@dataclass(frozen=True)
class SplitEnergy:
    """``E(x) = e1(x) + e2(x)`` for fixed data ``y`` and parameters ``theta``."""

    e1: EnergyAtom
    e2: EnergyAtom
    y: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None

    @property
    def modulus(self):
        return self.e1.modulus + self.e2.modulus

    @property
    def atoms(self):
        return (self.e1, self.e2)

    def __call__(self, x):
        return eval_energy(self, x)


@dataclass(frozen=True)
class BregmanGenerator:
    """Strictly convex ``w`` inducing the loss ``l(x, z) = D_w(x, z)``."""

    kind: str = "quadratic"

    def __post_init__(self):
        if self.kind not in ("quadratic", "entropy"):
            raise ValueError(f"unknown generator {self.kind!r}")

    def loss(self, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        if self.kind == "quadratic":
            return 0.5 * float(np.sum((x - z) ** 2))
        return kl_divergence(x, z)

    def loss_grad(self, x, z):
        """Gradient of ``l(x, z)`` in its second argument."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        if self.kind == "quadratic":
            return z - x
        return 1.0 - x / np.maximum(z, ENTROPY_FLOOR)


# -- elementary pieces ------------------------------------------------------

def _reduce(ufunc, p, axis):
    n = p.shape[axis]
    if n == 0 or n > 16:
        return ufunc.reduce(p, axis=axis)
    # numpy reduces a short trailing axis slowly; an elementwise fold is much faster
    q = np.moveaxis(p, axis, 0)
    out = q[0]
    for j in range(1, n):
        out = ufunc(out, q[j])
    return out


def log_sum_exp(p, axis=-1):
    """Stabilized ``log sum exp`` along ``axis``."""
    p = np.asarray(p, dtype=float)
    m = _reduce(np.maximum, p, axis)
    return m + np.log(_reduce(np.add, np.exp(p - np.expand_dims(m, axis)), axis))


def softmax(p, axis=-1):
    p = np.asarray(p, dtype=float)
    e = np.exp(p - np.expand_dims(_reduce(np.maximum, p, axis), axis))
    return e / np.expand_dims(_reduce(np.add, e, axis), axis)


def xlogx(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def kl_divergence(x, z):
    """Generalized KL ``sum x log(x/z) - x + z`` with the entropy floor on z."""
    x = np.asarray(x, dtype=float)
    z = np.maximum(np.asarray(z, dtype=float), ENTROPY_FLOOR)
    return float(np.sum(xlogx(x) - x * np.log(z) - x + z))


def check_simplex(x, tol=SIMPLEX_TOL):
    x = np.asarray(x, dtype=float)
    if np.any(x < -tol) or np.any(np.abs(np.sum(x, axis=-1) - 1.0) > tol * max(1, x.shape[-1])):
        raise DomainError("point is not on the probability simplex")


def _apply(op, x):
    return x if op is None else op.forward(x)


def _adjoint(op, p):
    return p if op is None else op.adjoint(p)


# -- evaluation -------------------------------------------------------------

def atom_eval(atom, x):
    x = np.asarray(x, dtype=float)
    k = atom.kind
    if k == "quadratic":
        return 0.5 * atom.weight * float(np.sum((x - atom.y) ** 2))
    if k == "l1":
        return float(np.sum(atom.weight * np.abs(_apply(atom.op, x))))
    if k == "linear":
        return float(np.sum(atom.c * x))
    if k == "entropy":
        check_simplex(x)
        x = np.clip(x, 0.0, None)
        return float(np.sum(xlogx(x) - atom._c(x) * x))
    return 0.0


def eval_energy(E, x):
    """Total energy ``e1(x) + e2(x)``; raises DomainError off the domain."""
    if isinstance(E, EnergyAtom):
        return atom_eval(E, x)
    return atom_eval(E.e1, x) + atom_eval(E.e2, x)


def subgradient(atom, x):
    """Canonical subgradient; the minimal-norm choice 0 at kinks of |.|."""
    if isinstance(atom, SplitEnergy):
        return subgradient(atom.e1, x) + subgradient(atom.e2, x)
    x = np.asarray(x, dtype=float)
    k = atom.kind
    if k == "quadratic":
        return atom.weight * (x - atom.y)
    if k == "l1":
        return _adjoint(atom.op, atom.weight * np.sign(_apply(atom.op, x)))
    if k == "linear":
        return np.array(atom.c, dtype=float, copy=True)
    if k == "entropy":
        check_simplex(x)
        return np.log(np.maximum(x, ENTROPY_FLOOR)) + 1.0 - atom._c(x)
    return np.zeros_like(x)


def _l1_dual_feasible(atom, p):
    p = np.asarray(p, dtype=float)
    w = atom.weight
    if atom.op is None:
        return bool(np.all(np.abs(p) <= w + residual_tol(w)))
    A = as_matrix(atom.op, p.shape)
    m = A.shape[0]
    wv = np.broadcast_to(np.asarray(w, dtype=float), (m,)) if np.ndim(w) == 0 else np.ravel(w)
    if np.allclose(wv, 0.0):
        return bool(np.allclose(p, 0.0, atol=residual_tol(p)))
    # p = A^T q with |q| <= w  <=>  bounded least squares residual vanishes
    sol = lsq_linear(A.T, np.ravel(p), bounds=(-wv, wv), method="bvls", tol=1e-13)
    return bool(np.linalg.norm(A.T @ sol.x - np.ravel(p)) <= residual_tol(p, 1e-7))


def conjugate_eval(atom, p):
    """Convex conjugate ``sup_x <p, x> - atom(x)``; ``inf`` when infeasible."""
    p = np.asarray(p, dtype=float)
    k = atom.kind
    if k == "quadratic":
        return float(np.sum(p * atom.y) + np.sum(p ** 2) / (2.0 * atom.weight))
    if k == "entropy":
        return float(np.sum(log_sum_exp(p + atom._c(p))))
    if k == "l1":
        return 0.0 if _l1_dual_feasible(atom, p) else np.inf
    if k == "linear":
        return 0.0 if np.allclose(p, atom.c, rtol=0, atol=residual_tol(p)) else np.inf
    return 0.0 if np.allclose(p, 0.0, rtol=0, atol=residual_tol(p)) else np.inf


def conjugate_grad(atom, p):
    """Gradient of a smooth conjugate (quadratic and entropy atoms)."""
    p = np.asarray(p, dtype=float)
    if atom.kind == "quadratic":
        return atom.y + p / atom.weight
    if atom.kind == "entropy":
        return softmax(p + atom._c(p))
    raise ContractError(f"conjugate of a {atom.kind} atom is not differentiable")


def w_gap(atom, p, x):
    """Fenchel-Young gap ``atom*(p) + atom(x) - <p, x>``; zero iff p in the subdifferential."""
    conj = conjugate_eval(atom, p)
    if not np.isfinite(conj):
        return np.inf
    return max(conj + atom_eval(atom, x) - float(np.sum(np.asarray(p) * np.asarray(x))), 0.0)


def bregman_distance(energy, p, x, z, check=True):
    """``E(x) - E(z) - <p, x - z>`` for a subgradient p of E at z."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    p = np.asarray(p, dtype=float)
    if check and isinstance(energy, EnergyAtom) and energy.kind != "l1":
        gap = w_gap(energy, p, z)
        if gap > residual_tol(p):
            raise ContractError(f"p is not a subgradient at z (Fenchel-Young gap {gap:.3e})")
    d = eval_energy(energy, x) - eval_energy(energy, z) - float(np.sum(p * (x - z)))
    if check and isinstance(energy, EnergyAtom) and energy.kind == "l1":
        # the l1 conjugate test is an LP; the sign pattern check is exact and cheap
        r = _apply(energy.op, z)
        if energy.op is None and np.any(np.abs(p - energy.weight * np.sign(r))[r != 0] > residual_tol(p)):
            raise ContractError("p is not a subgradient of the l1 term at z")
    if check and d < -residual_tol(np.concatenate([np.ravel(x), np.ravel(z)])):
        raise ContractError(f"negative Bregman distance {d:.3e}: p is not a subgradient at z")
    return max(d, 0.0)


# -- proximal maps ----------------------------------------------------------

def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _entropy_prox(xbar, tau, c):
    """argmin_x 1/2|x - xbar|^2 + tau (sum x log x - <c, x>) on each simplex row.

    Stationarity gives ``x = tau * omega((xbar + tau c - nu)/tau - 1 - log tau)``
    with the Wright omega function; the multiplier ``nu`` is found by
    bisection so that every row sums to one.
    """
    shifted = xbar + tau * c
    offset = -1.0 - np.log(tau)

    def rows(nu):
        return tau * np.real(wrightomega((shifted - nu[..., None]) / tau + offset))

    # x_j <= 1 forces nu >= min; x_j >= 0 sums to one needs nu below max + tau*log(n)
    lo = np.min(shifted, axis=-1) - tau * (2.0 + abs(np.log(tau))) - 2.0
    hi = np.max(shifted, axis=-1) + tau * (2.0 + abs(np.log(tau))) + 2.0
    while np.any(np.sum(rows(lo), axis=-1) < 1.0):
        lo = lo - (hi - lo)
    while np.any(np.sum(rows(hi), axis=-1) > 1.0):
        hi = hi + (hi - lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        big = np.sum(rows(mid), axis=-1) > 1.0
        lo = np.where(big, mid, lo)
        hi = np.where(big, hi, mid)
        if np.max(hi - lo) < 1e-15 * max(1.0, float(np.max(np.abs(mid)))):
            break
    x = rows(0.5 * (lo + hi))
    return x / np.sum(x, axis=-1, keepdims=True)


def _l1_prox_with_map(atom, xbar, tau):
    # x = xbar - tau A^T q, q = argmin_{|q| <= w} 1/2 |xbar - tau A^T q|^2
    shape = xbar.shape
    A = as_matrix(atom.op, shape)
    m = A.shape[0]
    w = atom.weight
    wv = np.broadcast_to(np.asarray(w, dtype=float), (m,)) if np.ndim(w) == 0 else np.ravel(w)
    sol = lsq_linear(tau * A.T, np.ravel(xbar), bounds=(-wv, wv + 0.0), method="bvls", tol=1e-14)
    return (np.ravel(xbar) - tau * A.T @ sol.x).reshape(shape)


def prox(atom, xbar, tau):
    """``argmin_x 1/2 |x - xbar|^2 + tau * atom(x)``."""
    if tau <= 0:
        raise ContractError("prox step must be positive")
    xbar = np.asarray(xbar, dtype=float)
    k = atom.kind
    if k == "quadratic":
        # written as a step toward y so that xbar == y is a fixed point in floating point
        return xbar + (tau * atom.weight / (1.0 + tau * atom.weight)) * (atom.y - xbar)
    if k == "l1":
        if atom.op is None:
            return soft_threshold(xbar, tau * atom.weight)
        return _l1_prox_with_map(atom, xbar, tau)
    if k == "linear":
        return xbar - tau * atom.c
    if k == "entropy":
        return _entropy_prox(xbar, tau, atom._c(xbar))
    return xbar.copy()


def entropy_bregman_prox(xbar, g, tau):
    """``argmin_x <g, x> + D_h(x, xbar)/tau`` on each simplex row: ``xbar * exp(-tau g)``, renormalized."""
    xbar = np.asarray(xbar, dtype=float)
    logits = np.log(np.maximum(xbar, ENTROPY_FLOOR)) - tau * np.asarray(g, dtype=float)
    return softmax(logits)


def prox_residual(atom, x, xbar, tau):
    """Distance of 0 from ``x - xbar + tau * d atom(x)`` using the best subgradient."""
    x = np.asarray(x, dtype=float)
    r = x - xbar
    k = atom.kind
    if k == "l1" and atom.op is None:
        w = np.broadcast_to(atom.weight, x.shape)
        nz = x != 0
        res = np.where(nz, r + tau * w * np.sign(x), np.maximum(np.abs(r) - tau * w, 0.0))
        return float(np.max(np.abs(res))) if res.size else 0.0
    if k == "entropy":
        # exact logs here: the entropy floor would distort tiny but valid entries
        logx = np.log(np.maximum(x, np.finfo(float).tiny))
        g = r + tau * (logx + 1.0 - atom._c(x))
        g = g - np.mean(g, axis=-1, keepdims=True)  # normal cone of the affine hull
        return float(np.max(np.abs(g)))
    if k == "l1":
        # stationarity through the dual certificate: x = xbar - tau A^T q, |q| <= w
        return float(np.max(np.abs(x - prox(atom, xbar, tau))))
    return float(np.max(np.abs(r + tau * subgradient(atom, x))))
