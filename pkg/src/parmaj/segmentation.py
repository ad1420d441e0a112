"""Variational multi-class segmentation with a linear convolutional potential.

Lower level, per image::

    x(theta) = argmin_{x in simplex field} h(x) - <N(theta, y), x> + lam |D x|_1

with h the per-pixel entropy, D anisotropic forward differences (Neumann
boundary, per class) and N a bank of 3 x 3 x C_in correlations plus a bias per
class.  The loss is the KL divergence to label-smoothed one-hot targets.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import convex
from .convex import BregmanGenerator, SplitEnergy
from .errors import ContractError, DomainError
from .linops import FiniteDifference
from .parametric import ParametricEnergy
from .solvers import ProxGradProblem, SaddleProblem, SolverConfig, primal_dual, prox_gradient
from .surrogates import (IterationConfig, SurrogateProblem, conjugate_at, iterative_surrogate, iterative_train,
                         minimize_surrogate, partial_surrogate)

log = logging.getLogger(__name__)

SMOOTHING = 1e-3
INFERENCE = SolverConfig(max_iter=500, tol=1e-6)
KIND_MAP = {"bregman": "bregman-dual", "partial": "partial-E2"}


def check_field(x, tol=convex.SIMPLEX_TOL):
    """Validate an H x W x C probability field."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 3:
        raise ContractError(f"a simplex field has shape H x W x C, got {x.shape}")
    convex.check_simplex(x, tol)
    return x


def one_hot(labels, C):
    labels = np.asarray(labels)
    return (labels[..., None] == np.arange(C)).astype(float)


def smooth_labels(onehot, eps=SMOOTHING):
    """Move one-hot targets off the simplex boundary: ``(1 - eps, eps / (C - 1))``."""
    C = onehot.shape[-1]
    return onehot * (1.0 - eps) + (1.0 - onehot) * (eps / (C - 1))


def im2col(y, size=3):
    """Zero-padded ``size x size`` neighbourhoods: ``(H, W, C_in)`` to ``(H, W, size*size*C_in)``."""
    y = np.asarray(y, dtype=float)
    H, W, _ = y.shape
    r = size // 2
    yp = np.pad(y, ((r, size - 1 - r), (r, size - 1 - r), (0, 0)))
    cols = [yp[a:a + H, b:b + W] for a in range(size) for b in range(size)]
    return np.concatenate(cols, axis=-1)


@dataclass
class LinearPotential:
    """Per-class kernels ``(C, 3, 3, C_in)`` and biases ``(C,)``."""

    kernels: np.ndarray
    bias: np.ndarray

    @property
    def C(self):
        return self.kernels.shape[0]

    @property
    def c_in(self):
        return self.kernels.shape[-1]

    @classmethod
    def zeros(cls, C, c_in, size=3):
        return cls(np.zeros((C, size, size, c_in)), np.zeros(C))

    @classmethod
    def from_theta(cls, theta, C, c_in, size=3):
        theta = np.asarray(theta, dtype=float)
        n = C * size * size * c_in
        return cls(theta[:n].reshape(C, size, size, c_in), theta[n:n + C].copy())

    @property
    def theta(self):
        return np.concatenate([self.kernels.ravel(), self.bias])

    def matrix(self):
        return self.kernels.reshape(self.C, -1).T

    def __call__(self, y):
        return im2col(y, self.kernels.shape[1]) @ self.matrix() + self.bias


class SegmentationFamily(ParametricEnergy):
    """``theta -> (h - <N(theta, y), .>) + lam |D .|_1``."""

    def __init__(self, C, c_in, lam=1.0):
        if lam < 0:
            raise DomainError(f"perimeter weight must be nonnegative, got {lam}")
        self.C, self.c_in, self.lam = C, c_in, float(lam)
        self.grad_op = FiniteDifference("neumann", channel_last=True)
        self._cols = {}

    def _features(self, y):
        key = id(y)
        hit = self._cols.get(key)
        if hit is None or hit[0] is not y:
            hit = (y, im2col(y))
            self._cols[key] = hit
        return hit[1]

    def potential(self, theta):
        return LinearPotential.from_theta(theta, self.C, self.c_in)

    def scores(self, theta, y):
        pot = self.potential(theta)
        return self._features(y) @ pot.matrix() + pot.bias

    def split(self, theta, y):
        return SplitEnergy(convex.entropy(self.scores(theta, y)), convex.l1(self.lam, self.grad_op), y=y, theta=theta)

    def pullback(self, theta, y, cot):
        gc = cot[0].get("c")
        if gc is None:
            return np.zeros_like(np.asarray(theta, dtype=float))
        F = self._features(y)
        gk = np.tensordot(F, gc, axes=([0, 1], [0, 1]))  # (9*C_in, C)
        gb = gc.sum(axis=(0, 1))
        return np.concatenate([gk.T.ravel(), gb])

    def solve(self, theta, y, config=None, warm=None):
        return field_inference(self.scores(theta, y), self.lam, config, warm)


def field_inference(scores, lam, config=None, warm=None):
    """``argmin h(x) - <scores, x> + lam |D x|_1`` over simplex fields; returns ``(x, residual)``."""
    scores = np.asarray(scores, dtype=float)
    if lam == 0:
        return convex.softmax(scores), 0.0
    op = FiniteDifference("neumann", channel_last=True)
    x0 = convex.softmax(scores) if warm is None else warm
    problem = SaddleProblem(op, convex.l1(lam), convex.entropy(scores), x0=x0, geometry="entropy",
                            strong_convexity=1.0)
    x, _, gap = primal_dual(problem, config or INFERENCE)
    energy = float(np.sum(convex.xlogx(x)) - np.sum(scores * x) + lam * np.sum(np.abs(op.forward(x))))
    return x, gap / max(1.0, abs(energy))


def seg_inference(pot, y, lam=1.0, config=None):
    """Simplex field minimizing the segmentation energy for potential ``pot``."""
    if lam < 0:
        raise DomainError(f"perimeter weight must be nonnegative, got {lam}")
    return field_inference(pot(y), lam, config)[0]


def seg_energy(pot, y, lam=1.0):
    fam = SegmentationFamily(pot.C, pot.c_in, lam)
    return fam.split(pot.theta, y)


# -- surrogates ------------------------------------------------------------------

def _target(pair):
    x_star = np.asarray(pair[0], dtype=float)
    if np.any(x_star <= 0):
        raise DomainError("targets must be smoothed off the simplex boundary")
    return x_star


def seg_bregman_surrogate(pot, pair, lam=1.0, config=None):
    """Exact Bregman surrogate and the optimal dual field ``p = lam u``."""
    x_star = _target(pair)
    E = seg_energy(pot, pair[1], lam)
    conj, _, u = conjugate_at(E, np.zeros_like(x_star), None, config)
    return convex.eval_energy(E, x_star) + conj, lam * u


def seg_partial_surrogate(pot, pair, lam=1.0):
    """``D_h(x*, softmax(N - D^T p))`` with p the canonical subgradient of the TV term at x*."""
    return partial_surrogate(seg_energy(pot, pair[1], lam), _target(pair), "E2")


def seg_iterative_surrogate(pot, pair, anchor, lam=1.0, config=None):
    anchor = np.asarray(anchor, dtype=float)
    if np.any(anchor <= 0):
        raise DomainError("anchor must be strictly positive")
    return iterative_surrogate(seg_energy(pot, pair[1], lam), _target(pair), anchor,
                               BregmanGenerator("entropy"), config)


def seg_iterative_surrogate_direct(pot, pair, anchor, lam=1.0, u=None, config=None):
    """Iterative surrogate written out for the entropy loss.

    With ``g = 1 - x*/xbar`` and per-pixel log-sum-exp::

        h(xbar) - <N, xbar> + lam |D xbar|_1
          + min_{|u| <= 1} lse(N - x*/xbar - lam D^T u) + HW + KL(x*, xbar)

    The shift by one per pixel comes from the constant in g.  Given ``u`` the
    minimum is replaced by the value at u.
    """
    x_star = _target(pair)
    xbar = np.asarray(anchor, dtype=float)
    N = pot(pair[1])
    D = FiniteDifference("neumann", channel_last=True)
    v = N - x_star / xbar
    if u is None:
        E = seg_energy(pot, pair[1], lam)
        _, _, u = conjugate_at(E, 1.0 - x_star / xbar, None, config)
    lse = float(np.sum(convex.log_sum_exp(v - lam * D.adjoint(u))))
    HW = x_star.shape[0] * x_star.shape[1]
    return (float(np.sum(convex.xlogx(xbar)) - np.sum(N * xbar)) + lam * float(np.sum(np.abs(D.forward(xbar))))
            + lse + HW + convex.kl_divergence(x_star, xbar))


def cross_entropy_objective(theta, corpus, C, c_in):
    """``sum KL(x* | softmax(N))`` and its gradient in theta.

    Equivalent to cross-entropy training of ``softmax(N)`` up to the target
    entropy, which is constant in theta.
    """
    fam = SegmentationFamily(C, c_in, 0.0)
    total, grad = 0.0, np.zeros_like(theta)
    for x_star, y in corpus:
        N = fam.scores(theta, y)
        lse = convex.log_sum_exp(N)
        total += float(np.sum(convex.xlogx(x_star)) - np.sum(x_star * N) + np.sum(lse))
        grad = grad + fam.pullback(theta, y, ({"c": convex.softmax(N) - x_star}, {}))
    return total, grad


# -- training -------------------------------------------------------------------

def accuracy_hard_argmax(pred, target):
    """Fraction of pixels whose argmax matches; ties go to the lowest class index."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if target.ndim == pred.ndim - 1:
        labels = target
    elif target.shape == pred.shape:
        labels = np.argmax(target, axis=-1)
    else:
        raise ContractError(f"shape mismatch {pred.shape} vs {target.shape}")
    if labels.shape != pred.shape[:-1]:
        raise ContractError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.argmax(pred, axis=-1) == labels))


def corpus_accuracy(pot, corpus, lam, config=None):
    """Pixel accuracy pooled over the corpus."""
    hits, total = 0.0, 0
    for x_star, y in corpus:
        pred = seg_inference(pot, y, lam, config)
        n = x_star.shape[0] * x_star.shape[1]
        hits += accuracy_hard_argmax(pred, x_star) * n
        total += n
    return hits / total


@dataclass
class SegmentConfig:
    epochs: int = 100
    step: float = 1.0
    outer_iterations: int = 4
    round_epochs: int = 50
    record_every: int = 10
    inference: SolverConfig = field(default_factory=lambda: SolverConfig(max_iter=500, tol=1e-6))
    # loss evaluations in the iterative scheme must reach the trusted gap
    loss_solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iter=6000, tol=1e-6))


@dataclass
class SegmentRun:
    potential: LinearPotential
    accuracy: List[tuple]
    objective: List[float]
    state: object = None


def _prepare(corpus):
    return [(smooth_labels(np.asarray(x, dtype=float)), np.asarray(y, dtype=float)) for x, y in corpus]


def train_segmentation(corpus, kind="bregman", lam=1.0, config=None, theta0=None):
    """Train a linear potential with accelerated proximal gradient.

    ``corpus`` holds ``(one_hot_labels, image)`` pairs.  ``kind`` is one of
    ``cross-entropy``, ``bregman``, ``partial`` or ``iterative``.  Accuracy
    (hard argmax of the lower-level solution, pooled over the corpus) is
    recorded every ``record_every`` epochs as ``(epoch, accuracy)``.  The
    cross-entropy model is evaluated as the plain softmax of its potential.
    """
    cfg = config or SegmentConfig()
    if not corpus:
        raise ContractError("empty corpus")
    data = _prepare(corpus)
    C, c_in = data[0][0].shape[-1], data[0][1].shape[-1]
    theta0 = np.zeros(C * 9 * c_in + C) if theta0 is None else np.asarray(theta0, dtype=float)
    eval_lam = 0.0 if kind == "cross-entropy" else lam
    acc = []

    def record(epoch, theta):
        if epoch % cfg.record_every == 0:
            acc.append((epoch, corpus_accuracy(LinearPotential.from_theta(theta, C, c_in), data, eval_lam,
                                               cfg.inference)))

    record(0, theta0)
    fista = SolverConfig(max_iter=cfg.epochs, tol=1e-12)
    if kind == "cross-entropy":
        trace = []
        pg = ProxGradProblem(smooth=lambda t: cross_entropy_objective(t, data, C, c_in), x0=theta0,
                             lipschitz=1.0 / cfg.step)
        theta, _ = prox_gradient(pg, fista, history=trace, callback=lambda k, t: record(k + 1, t))
        return SegmentRun(LinearPotential.from_theta(theta, C, c_in), acc, trace)
    family = SegmentationFamily(C, c_in, lam)
    if kind in KIND_MAP:
        problem = SurrogateProblem(data, family, BregmanGenerator("entropy"), KIND_MAP[kind])
        run = minimize_surrogate(problem, theta0, method="fista", step=cfg.step, iterations=cfg.epochs,
                                 callback=lambda k, t: record(k + 1, t))
        return SegmentRun(LinearPotential.from_theta(run.theta, C, c_in), acc, run.trace)
    if kind != "iterative":
        raise ContractError(f"unknown training kind {kind!r}")
    problem = SurrogateProblem(data, family, BregmanGenerator("entropy"), "bregman-dual")
    run = minimize_surrogate(problem, theta0, method="fista", step=cfg.step, iterations=cfg.epochs,
                             callback=lambda k, t: record(k + 1, t))
    it_cfg = IterationConfig(outer_iterations=cfg.outer_iterations, method="fista", step=cfg.step,
                             inner_iterations=cfg.round_epochs, lower=cfg.loss_solver,
                             trust_residual=cfg.loss_solver.tol, anchor_start="solution")

    def on_round(rec):
        log.info("segmentation round %d: loss %.6g accepted %d", rec["iteration"], rec["loss"], rec["accepted"])

    state = iterative_train(problem, run.theta, it_cfg, on_record=on_round, inner0=run.inner)
    final = LinearPotential.from_theta(state.theta, C, c_in)
    acc.append((cfg.epochs + cfg.outer_iterations * cfg.round_epochs,
                corpus_accuracy(final, data, lam, cfg.inference)))
    return SegmentRun(final, acc, run.trace, state)


# -- synthetic data --------------------------------------------------------------

def class_colors(C, seed=0):
    """Fixed, well-separated mean colours per class (shared by every image of a corpus)."""
    rng = np.random.default_rng(seed)
    base = np.linspace(0.15, 0.85, C)
    return np.stack([rng.permutation(base) for _ in range(3)], axis=1)


def synth_corpus(seed, count=4, H=64, W=128, C=3, noise=0.25, regions=10):
    """Voronoi label maps with noisy class colours, clipped to [0, 1].

    Returns ``(one_hot_labels, image)`` pairs; every class appears in every
    label map.
    """
    if C < 2:
        raise ContractError(f"need at least two classes, got {C}")
    rng = np.random.default_rng(seed)
    colors = class_colors(C, seed)
    yy, xx = np.mgrid[0:H, 0:W]
    out = []
    for _ in range(count):
        while True:
            pts = rng.uniform([0, 0], [H, W], size=(regions, 2))
            cls = np.concatenate([np.arange(C), rng.integers(0, C, size=regions - C)])
            rng.shuffle(cls)
            d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
            labels = cls[np.argmin(d, axis=-1)]
            if len(np.unique(labels)) == C:
                break
        img = colors[labels] + noise * rng.standard_normal((H, W, 3))
        out.append((one_hot(labels, C), np.clip(img, 0.0, 1.0)))
    return out
