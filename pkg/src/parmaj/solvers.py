"""First-order solvers: accelerated proximal gradient, primal-dual,
projected Adam and refining grid search."""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import convex
from .convex import EnergyAtom
from .errors import ContractError, SolverError
from .linops import LinearMap

log = logging.getLogger(__name__)

STRONG_TAU_SCALE = 10.0


@dataclass
class SolverConfig:
    max_iter: int = 2000
    tol: float = 1e-6
    backtrack: float = 0.5
    accelerate: bool = True
    check_every: int = 10


# -- proximal gradient --------------------------------------------------------

@dataclass
class ProxGradProblem:
    """Minimize ``f(x) + g(x)``.

    ``smooth(x)`` returns ``(f(x), grad f(x))``.  The nonsmooth part is given
    either as an atom ``g`` or as a ``prox_map(v, step)`` with optional
    ``g_value`` (an indicator is assumed when omitted).  When ``smooth`` is
    only defined on a set, ``domain`` maps extrapolated points back into it.
    """

    smooth: Callable
    x0: np.ndarray
    g: Optional[EnergyAtom] = None
    prox_map: Optional[Callable] = None
    g_value: Optional[Callable] = None
    lipschitz: float = 1.0
    domain: Optional[Callable] = None

    def prox(self, v, step):
        if self.g is not None:
            return convex.prox(self.g, v, step)
        if self.prox_map is not None:
            return self.prox_map(v, step)
        return v

    def nonsmooth(self, x):
        if self.g is not None:
            return convex.atom_eval(self.g, x)
        if self.g_value is not None:
            return self.g_value(x)
        return 0.0


def prox_gradient(problem, config=None, history=None, callback=None):
    """FISTA with backtracking and function-value restart.

    Returns ``(x, residual)`` where ``residual`` is the norm of the gradient
    mapping at the last step; the solve stops once it falls below
    ``config.tol * max(1, |x|_inf)``.  Pass a list as ``history`` to collect
    the objective at every accepted iterate; ``callback(k, x)`` runs after every
    accepted iterate.
    """
    cfg = config or SolverConfig()
    x = np.array(problem.x0, dtype=float, copy=True)
    L = max(float(problem.lipschitz), 1e-12)
    fx, _ = problem.smooth(x)
    Fx = fx + problem.nonsmooth(x)
    y, t = x.copy(), 1.0
    residual = np.inf
    restarted = True
    for k in range(cfg.max_iter):
        fy, gy = problem.smooth(y)
        if not np.all(np.isfinite(gy)) or not np.isfinite(fy):
            raise SolverError("non-finite gradient in proximal gradient")
        while True:
            step = 1.0 / L
            xn = problem.prox(y - step * gy, step)
            d = xn - y
            fxn, _ = problem.smooth(xn)
            bound = fy + float(np.sum(gy * d)) + 0.5 * L * float(np.sum(d * d))
            if fxn <= bound + 1e-12 * max(1.0, abs(fy)):
                break
            L /= cfg.backtrack
            if L > 1e300:
                raise SolverError("backtracking failed: Lipschitz estimate overflowed")
        residual = L * float(np.sqrt(np.sum(d * d)))
        Fn = fxn + problem.nonsmooth(xn)
        if Fn > Fx + 1e-10 * max(1.0, abs(Fx)):
            if not cfg.accelerate or restarted:
                # a plain step from x cannot increase F under the descent test
                raise SolverError("objective increased under backtracking", residual)
            t, y, restarted = 1.0, x.copy(), True
            continue
        restarted = False
        if cfg.accelerate:
            tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = xn + ((t - 1.0) / tn) * (xn - x)
            if problem.domain is not None:
                y = problem.domain(y)
            t = tn
        else:
            y = xn
        x, Fx = xn, Fn
        if history is not None:
            history.append(Fn)
        if callback is not None:
            callback(k, x)
        if residual <= cfg.tol * max(1.0, float(np.max(np.abs(x))) if x.size else 1.0):
            break
    return x, residual


# -- primal-dual --------------------------------------------------------------

@dataclass
class SaddleProblem:
    """``min_x G(x) + F(K x)`` solved through its saddle-point form.

    ``geometry='entropy'`` replaces the Euclidean primal prox by the entropy
    Bregman prox, so every primal iterate stays on the simplex (last axis).
    ``strong_convexity`` is the modulus of G relative to the primal geometry;
    when positive the step sizes follow the accelerated schedule.
    """

    K: LinearMap
    F: EnergyAtom
    G: EnergyAtom
    x0: np.ndarray
    p0: Optional[np.ndarray] = None
    tau: Optional[float] = None
    sigma: Optional[float] = None
    geometry: str = "euclidean"
    strong_convexity: float = 0.0

    def steps(self):
        nb = float(self.K.norm_bound or 0.0)
        tau, sigma = self.tau, self.sigma
        if tau is None and sigma is None:
            # the accelerated schedule shrinks tau, so start large when it applies
            scale = STRONG_TAU_SCALE if self.strong_convexity > 0 else 1.0
            tau = scale / nb if nb > 0 else 1.0
            sigma = 1.0 / (scale * nb) if nb > 0 else 1.0
        elif tau is None:
            tau = 1.0 / (sigma * nb * nb) if nb > 0 else 1.0
        elif sigma is None:
            sigma = 1.0 / (tau * nb * nb) if nb > 0 else 1.0
        return tau, sigma

    def validate(self, rng=None):
        tau, sigma = self.steps()
        nb = float(self.K.norm_bound or 0.0)
        if tau <= 0 or sigma <= 0 or tau * sigma * nb * nb > 1.0 + 1e-12:
            raise ContractError(f"step sizes violate tau*sigma*|K|^2 <= 1 ({tau * sigma * nb * nb:.6g})")
        if self.geometry not in ("euclidean", "entropy"):
            raise ContractError(f"unknown primal geometry {self.geometry!r}")
        rng = rng or np.random.default_rng(0)
        x = rng.standard_normal(np.shape(self.x0))
        Kx = self.K.forward(x)
        p = rng.standard_normal(Kx.shape)
        lhs, rhs = float(np.sum(Kx * p)), float(np.sum(x * self.K.adjoint(p)))
        if abs(lhs - rhs) > 1e-8 * max(1.0, abs(lhs)):
            raise ContractError(f"adjoint mismatch {abs(lhs - rhs):.3e}")


def _dual_prox(F, v, sigma):
    """prox of sigma F* via Moreau."""
    if F.kind == "l1" and F.op is None:
        return np.clip(v, -F.weight, F.weight)
    if F.kind == "zero":
        return np.zeros_like(v)
    return v - sigma * convex.prox(F, v / sigma, 1.0 / sigma)


def _primal_step(G, geometry, x, Ktp, tau):
    if geometry == "euclidean":
        return convex.prox(G, x - tau * Ktp, tau)
    if G.kind == "entropy":
        c = G._c(x)
        logits = (tau * (c - Ktp) + np.log(np.maximum(x, convex.ENTROPY_FLOOR))) / (1.0 + tau)
        return convex.softmax(logits)
    if G.kind == "linear":
        return convex.entropy_bregman_prox(x, G.c + Ktp, tau)
    if G.kind == "zero":
        return convex.entropy_bregman_prox(x, Ktp, tau)
    raise ContractError(f"entropy geometry does not support a {G.kind} primal term")


def _primal_conjugate(G, v, geometry):
    if G.smooth_conjugate:
        return convex.conjugate_eval(G, v)
    if geometry == "entropy" and G.kind in ("linear", "zero"):
        # (<c, .> + simplex indicator)^*(v) = sum over rows of max_j (v - c)_j
        c = G.c if G.kind == "linear" else 0.0
        return float(np.sum(np.max(v - c, axis=-1)))
    return np.inf


def saddle_gap(problem, x, p):
    """Primal-dual gap ``P(x) - D(p)``; ``inf`` if the dual is not computable."""
    K, F, G = problem.K, problem.F, problem.G
    Kx = K.forward(x)
    primal = convex.atom_eval(G, x) + convex.atom_eval(F, Kx)
    fstar = 0.0 if (F.kind == "l1" and F.op is None) else convex.conjugate_eval(F, p)
    dual = -_primal_conjugate(G, -K.adjoint(p), problem.geometry) - fstar
    return primal - dual, primal


def primal_dual(problem, config=None):
    """Accelerated primal-dual iteration; returns ``(x, p, gap)``.

    The returned ``gap`` is the primal-dual gap when the conjugate of G is
    available, otherwise the scaled fixed-point residual.
    """
    cfg = config or SolverConfig(max_iter=500, tol=1e-6)
    problem.validate()
    tau, sigma = problem.steps()
    K, F, G = problem.K, problem.F, problem.G
    x = np.array(problem.x0, dtype=float, copy=True)
    if problem.geometry == "entropy":
        convex.check_simplex(x)
    p = np.zeros_like(K.forward(x)) if problem.p0 is None else np.array(problem.p0, dtype=float, copy=True)
    xbar = x.copy()
    gamma = problem.strong_convexity if cfg.accelerate else 0.0
    gap = np.inf
    for it in range(1, cfg.max_iter + 1):
        p_new = _dual_prox(F, p + sigma * K.forward(xbar), sigma)
        x_new = _primal_step(G, problem.geometry, x, K.adjoint(p_new), tau)
        if not np.all(np.isfinite(x_new)) or not np.all(np.isfinite(p_new)):
            raise SolverError("non-finite iterate in primal-dual")
        theta = 1.0 / np.sqrt(1.0 + 2.0 * gamma * tau) if gamma > 0 else 1.0
        xbar = x_new + theta * (x_new - x)
        dx, dp = x_new - x, p_new - p
        x, p = x_new, p_new
        step_tau, step_sigma = tau, sigma
        if gamma > 0:
            tau, sigma = theta * tau, sigma / theta
        if it % cfg.check_every == 0 or it == cfg.max_iter:
            gap, primal = saddle_gap(problem, x, p)
            if np.isfinite(gap):
                if gap <= cfg.tol * max(1.0, abs(primal)):
                    break
            else:
                gap = max(float(np.max(np.abs(dx))) / step_tau, float(np.max(np.abs(dp))) / step_sigma)
                if gap <= cfg.tol * max(1.0, float(np.max(np.abs(x)))):
                    break
    return x, p, float(gap)


# -- projected adaptive moments ----------------------------------------------

@dataclass
class AdamConfig:
    max_iter: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tol: float = 0.0


class Adam:
    """Adaptive-moment state with bias correction and an optional projection."""

    def __init__(self, theta0, tau, projection=None, config=None):
        self.cfg = config or AdamConfig()
        self.theta = np.array(theta0, dtype=float, copy=True)
        self.tau = float(tau)
        self.projection = projection
        self.m = np.zeros_like(self.theta)
        self.v = np.zeros_like(self.theta)
        self.t = 0

    def state(self):
        return self.theta.copy(), self.m.copy(), self.v.copy(), self.t

    def restore(self, state):
        self.theta, self.m, self.v, self.t = (state[0].copy(), state[1].copy(), state[2].copy(), state[3])

    def step(self, grad):
        g = np.asarray(grad, dtype=float)
        if not np.all(np.isfinite(g)):
            raise SolverError("non-finite gradient in adaptive moment descent")
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * g
        self.v = c.beta2 * self.v + (1 - c.beta2) * g * g
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        new = self.theta - self.tau * mhat / (np.sqrt(vhat) + c.eps)
        if self.projection is not None:
            new = self.projection(new)
        moved = float(np.max(np.abs(new - self.theta))) if new.size else 0.0
        self.theta = new
        return moved


def adaptive_moment_descent(fun_grad, theta0, tau, projection=None, config=None):
    """Run projected Adam on ``fun_grad(theta) -> (value, grad)``."""
    opt = Adam(theta0, tau, projection, config)
    for _ in range(opt.cfg.max_iter):
        _, g = fun_grad(opt.theta)
        if opt.step(g) <= opt.cfg.tol:
            break
    return opt.theta


# -- grid search --------------------------------------------------------------

def grid_search(objective, lo, hi, points=21, refine_levels=1):
    """Minimize a scalar function over a uniform grid, then refine around the incumbent.

    Ties keep the earliest (lowest) grid point.
    """
    if not lo < hi:
        raise ContractError("grid search needs lo < hi")
    if points < 3:
        raise ContractError("grid search needs at least 3 points")
    best_arg, best_val = None, np.inf
    a, b = float(lo), float(hi)
    for _ in range(refine_levels + 1):
        grid = np.linspace(a, b, points)
        for t in grid:
            v = objective(float(t))
            if best_arg is None or v < best_val:
                best_arg, best_val = float(t), v
        step = (b - a) / (points - 1)
        a, b = max(lo, best_arg - step), min(hi, best_arg + step)
        if not a < b:
            break
    return best_arg, best_val
