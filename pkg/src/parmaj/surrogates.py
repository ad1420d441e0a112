"""Parametric majorizers of the bi-level loss and the guarded iterative scheme.

For a split energy ``E = E1 + E2`` and ground truth ``x*``:

* Bregman surrogate, dual form: ``E(x*) + min_z E1*(-z) + E2*(z)``
* Bregman surrogate, primal form: ``E(x*) - min_x E(x)``
* partial surrogate: the dual form with z frozen at a subgradient of one part
* gradient penalty: ``|q|^2 / (2m)`` with q a subgradient of E at x*
* iterative surrogate: ``E(xbar) + E*(grad l(x*, xbar)) + C``

All values keep their parameter-independent constants, so a zero surrogate
certifies a zero loss.

The conjugate of the split energy is evaluated through an inner variable.
One atom must have a smooth conjugate (quadratic or entropy); for an l1 atom
``w |A x|_1`` the other side is parametrized as ``z = A^T (w * u)`` with
``|u|_inf <= 1``, which keeps the constraint independent of the parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import convex
from .convex import BregmanGenerator, SplitEnergy
from .errors import ContractError, SolverError
from .parametric import accumulate, new_cotangent
from .solvers import Adam, AdamConfig, ProxGradProblem, SaddleProblem, SolverConfig, primal_dual, prox_gradient

log = logging.getLogger(__name__)

KINDS = ("bregman-dual", "bregman-primal", "partial-E1", "partial-E2", "gradient-penalty", "iterative")
INNER_CONFIG = SolverConfig(max_iter=2000, tol=1e-10)
LOWER_CONFIG = SolverConfig(max_iter=5000, tol=1e-10)


# -- roles and inner parametrization ------------------------------------------

def _roles(E):
    """Return ``(S, G, iS, iG)``: the atom with smooth conjugate and the other one."""
    if E.e1.smooth_conjugate:
        return E.e1, E.e2, 0, 1
    if E.e2.smooth_conjugate:
        return E.e2, E.e1, 1, 0
    raise ContractError("one energy part needs a smooth conjugate (quadratic or entropy atom)")


def _apply(op, x):
    return x if op is None else op.forward(x)


def _adjoint(op, p):
    return p if op is None else op.adjoint(p)


def inner_template(E, x):
    """Zero inner variable for the conjugate of E, or None when none is needed."""
    _, G, _, _ = _roles(E)
    if G.kind == "l1":
        return np.zeros_like(_apply(G.op, np.asarray(x, dtype=float)))
    if G.smooth_conjugate:
        return np.zeros_like(np.asarray(x, dtype=float))
    return None


def inner_is_boxed(E):
    return _roles(E)[1].kind == "l1"


def _z_of(G, u, like):
    if G.kind == "l1":
        return _adjoint(G.op, G.weight * u)
    if G.smooth_conjugate:
        return u
    if G.kind == "linear":
        return G.c
    return np.zeros_like(like)


def _reduce_weight(atom, value):
    return float(np.sum(value)) if np.ndim(atom.weight) == 0 else value


def _conj_cot(atom, v, cot, scale=1.0):
    """Cotangents of ``scale * atom*(v)`` with respect to atom data."""
    if atom.kind == "quadratic":
        accumulate(cot, "y", scale * v)
        accumulate(cot, "weight", -scale * float(np.sum(v * v)) / (2.0 * atom.weight ** 2))
    elif atom.kind == "entropy":
        accumulate(cot, "c", scale * convex.softmax(v + atom._c(v)))


def _eval_cot(atom, x, cot, scale=1.0):
    """Cotangents of ``scale * atom(x)`` with respect to atom data."""
    k = atom.kind
    if k == "quadratic":
        accumulate(cot, "y", -scale * atom.weight * (x - atom.y))
        accumulate(cot, "weight", 0.5 * scale * float(np.sum((x - atom.y) ** 2)))
    elif k == "l1":
        r = _apply(atom.op, x)
        accumulate(cot, "weight", _reduce_weight(atom, scale * np.abs(r)))
        if atom.op is not None:
            accumulate(cot, "op", (scale * atom.weight * np.sign(r), x))
    elif k == "linear":
        accumulate(cot, "c", scale * x)
    elif k == "entropy":
        accumulate(cot, "c", -scale * x)


def _subgrad_cot(atom, x, gq, cot):
    """Cotangents of ``<gq, subgradient(atom, x)>`` with respect to atom data."""
    k = atom.kind
    if k == "quadratic":
        accumulate(cot, "y", -atom.weight * gq)
        accumulate(cot, "weight", float(np.sum(gq * (x - atom.y))))
    elif k == "l1":
        s = np.sign(_apply(atom.op, x))
        r = _apply(atom.op, gq)
        accumulate(cot, "weight", _reduce_weight(atom, s * r))
        if atom.op is not None:
            accumulate(cot, "op", (atom.weight * s, gq))
    elif k == "linear":
        accumulate(cot, "c", gq)
    elif k == "entropy":
        accumulate(cot, "c", -gq)


def _dual_terms(E, g, u, cot=None):
    """``Phi(u) = S*(g - z(u)) + G*(z(u))`` with its gradient in u.

    When ``cot`` is given, atom-data cotangents are accumulated into it.
    """
    S, G, iS, iG = _roles(E)
    z = _z_of(G, u, g)
    v = g - z
    val = convex.conjugate_eval(S, v)
    dS = convex.conjugate_grad(S, v)
    gz = -dS
    if cot is not None:
        _conj_cot(S, v, cot[iS])
    if G.smooth_conjugate:
        val += convex.conjugate_eval(G, z)
        gz = gz + convex.conjugate_grad(G, z)
        if cot is not None:
            _conj_cot(G, z, cot[iG])
    du = None
    if G.kind == "l1":
        r = _apply(G.op, gz)
        du = G.weight * r
        if cot is not None:
            accumulate(cot[iG], "weight", _reduce_weight(G, u * r))
            if G.op is not None:
                accumulate(cot[iG], "op", (G.weight * u, gz))
    elif G.smooth_conjugate:
        du = gz
    elif G.kind == "linear" and cot is not None:
        accumulate(cot[iG], "c", gz)
    return val, du


def _inner_lipschitz(E):
    S, G, _, _ = _roles(E)
    L = 1.0 / S.modulus
    if G.kind == "l1":
        nb = 1.0 if G.op is None else float(G.op.norm_bound)
        L *= (nb * float(np.max(np.abs(G.weight)))) ** 2
    elif G.smooth_conjugate:
        L += 1.0 / G.modulus
    return max(L, 1e-12)


def _box(v, step=None):
    return np.clip(v, -1.0, 1.0)


def conjugate_at(E, g, u0=None, config=None):
    """``E*(g) = min_z E1*(g - z) + E2*(z)``; returns ``(value, z, u)``."""
    g = np.asarray(g, dtype=float)
    S, G, _, _ = _roles(E)
    u = inner_template(E, g) if u0 is None else np.array(u0, dtype=float, copy=True)
    if u is None:
        val, _ = _dual_terms(E, g, None)
        return val, _z_of(G, None, g), None
    problem = ProxGradProblem(
        smooth=lambda w: _dual_terms(E, g, w),
        x0=u,
        prox_map=_box if G.kind == "l1" else None,
        lipschitz=_inner_lipschitz(E),
    )
    cfg = config or INNER_CONFIG
    u, res = prox_gradient(problem, cfg)
    if not np.isfinite(res):
        raise SolverError("inner conjugate minimization diverged", res)
    val, _ = _dual_terms(E, g, u)
    return val, _z_of(G, u, g), u


# -- lower level ---------------------------------------------------------------

def _closed_form_prox(atom):
    return atom.kind in ("zero", "linear", "quadratic", "entropy") or (atom.kind == "l1" and atom.op is None)


def minimize_energy(E, config=None, x0=None):
    """Lower-level solve ``argmin_x E(x)``; returns ``(x, residual)``.

    The residual is relative: prox residual for closed forms, primal-dual
    gap over ``max(1, |E(x)|)`` otherwise.

    Closed forms are used where one part is quadratic and the other has an
    explicit prox, or for an entropy part plus a linear term.  Energies with
    an l1 term over a linear map go through the primal-dual solver.
    """
    a, b = E.e1, E.e2
    for Q, O in ((a, b), (b, a)):
        if Q.kind == "quadratic" and _closed_form_prox(O):
            x = convex.prox(O, Q.y, 1.0 / Q.weight)
            return x, convex.prox_residual(O, x, Q.y, 1.0 / Q.weight)
        if Q.kind == "entropy" and O.kind in ("linear", "zero"):
            c = Q.c if Q.c is not None else 0.0
            shift = O.c if O.kind == "linear" else 0.0
            return convex.softmax(np.zeros_like(np.asarray(shift, dtype=float)) + c - shift), 0.0
    for L1, G in ((a, b), (b, a)):
        if L1.kind == "l1" and G.smooth_conjugate:
            from .linops import MatrixMap
            op = L1.op
            if op is None:
                shape = np.shape(G.y if G.kind == "quadratic" else G.c)
                op = MatrixMap(np.eye(int(np.prod(shape)))) if len(shape) <= 1 else None
                if op is None:
                    raise ContractError("identity l1 over fields needs an explicit map")
            if G.kind == "quadratic":
                start = G.y if x0 is None else x0
                problem = SaddleProblem(op, convex.l1(L1.weight), G, x0=start, strong_convexity=G.weight)
            else:
                shape = np.shape(G.c) if x0 is None else np.shape(x0)
                start = np.full(shape, 1.0 / shape[-1]) if x0 is None else x0
                problem = SaddleProblem(op, convex.l1(L1.weight), G, x0=start, geometry="entropy",
                                        strong_convexity=1.0)
            x, _, gap = primal_dual(problem, config or LOWER_CONFIG)
            return x, gap / max(1.0, abs(convex.eval_energy(E, x)))
    raise ContractError(f"no lower-level solver for a {a.kind} + {b.kind} energy")


# -- single-sample surrogates --------------------------------------------------

def check_condition(E, generator):
    """Structural test that the loss generator is an additive part of E."""
    ok = False
    for atom in E.atoms:
        if generator.kind == "quadratic" and atom.kind == "quadratic" and atom.weight >= 1.0:
            ok = True
        if generator.kind == "entropy" and atom.kind == "entropy":
            ok = True
    if not ok:
        log.warning("loss generator %s is not an additive part of the energy; "
                    "majorization is assumed, not verified", generator.kind)
    return ok


def bregman_surrogate_dual(E, x_star, config=None, u0=None):
    """Returns ``(value, z)`` with ``value = E(x*) + E*(0)``."""
    x_star = np.asarray(x_star, dtype=float)
    conj, z, _ = conjugate_at(E, np.zeros_like(x_star), u0, config)
    return convex.eval_energy(E, x_star) + conj, z


def bregman_surrogate_primal(E, x_star, config=None):
    x_min, _ = minimize_energy(E, config)
    return convex.eval_energy(E, x_star) - convex.eval_energy(E, x_min)


def partial_surrogate(E, x_star, side="E2"):
    """Freeze z at the canonical subgradient of ``side`` and keep the W-gap of the other part."""
    if side not in ("E1", "E2"):
        raise ContractError(f"side must be 'E1' or 'E2', got {side!r}")
    frozen, other = (E.e2, E.e1) if side == "E2" else (E.e1, E.e2)
    z = convex.subgradient(frozen, x_star)
    value = convex.w_gap(other, -z, x_star)
    if not np.isfinite(value):
        log.info("partial surrogate (%s frozen) infeasible at theta=%s", side, E.theta)
    return value


def gradient_penalty(E, x_star):
    """``|q|^2 / (2m)`` for the canonical subgradient q of E at x*."""
    m = E.modulus
    if m <= 0:
        raise ContractError(f"gradient penalty needs strong convexity; {E.e1.kind} + {E.e2.kind} has modulus 0")
    q = convex.subgradient(E, x_star)
    return float(np.sum(q * q)) / (2.0 * m)


def iterative_surrogate(E, x_star, x_bar, generator=None, config=None, u0=None):
    """``E(xbar) + E*(grad l(x*, xbar)) + l(x*, xbar) - <grad l, xbar>``."""
    gen = generator or BregmanGenerator("quadratic")
    x_star = np.asarray(x_star, dtype=float)
    x_bar = np.asarray(x_bar, dtype=float)
    g = gen.loss_grad(x_star, x_bar)
    conj, _, _ = conjugate_at(E, g, u0, config)
    C = gen.loss(x_star, x_bar) - float(np.sum(g * x_bar))
    return convex.eval_energy(E, x_bar) + conj + C


# -- batch objective -------------------------------------------------------------

@dataclass
class SurrogateProblem:
    """Training pairs, an energy family, the loss generator and the surrogate kind."""

    samples: list
    energy: object
    generator: BregmanGenerator = field(default_factory=BregmanGenerator)
    kind: str = "bregman-dual"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown surrogate kind {self.kind!r}")
        if not self.samples:
            raise ContractError("a surrogate problem needs at least one sample")

    def split(self, theta, i):
        return self.energy.split(theta, self.samples[i][1])

    def inner_init(self, theta):
        if self.kind not in ("bregman-dual", "iterative"):
            return [None] * len(self.samples)
        return [inner_template(self.split(theta, i), x) for i, (x, _) in enumerate(self.samples)]

    def loss(self, xs):
        return sum(self.generator.loss(x_star, x) for (x_star, _), x in zip(self.samples, xs))


def _sample_terms(problem, theta, i, u, anchor):
    x_star, y = problem.samples[i]
    x_star = np.asarray(x_star, dtype=float)
    E = problem.energy.split(theta, y)
    cot = new_cotangent()
    kind = problem.kind
    du = None
    if kind in ("bregman-dual", "iterative"):
        gen = problem.generator
        x_bar = x_star if anchor is None else np.asarray(anchor, dtype=float)
        g = gen.loss_grad(x_star, x_bar)
        C = gen.loss(x_star, x_bar) - float(np.sum(g * x_bar))
        conj, du = _dual_terms(E, g, u, cot)
        value = convex.eval_energy(E, x_bar) + conj + C
        for atom, c in zip(E.atoms, cot):
            _eval_cot(atom, x_bar, c)
    elif kind in ("partial-E1", "partial-E2"):
        idx_f = 1 if kind == "partial-E2" else 0
        frozen, other = E.atoms[idx_f], E.atoms[1 - idx_f]
        z = convex.subgradient(frozen, x_star)
        value = convex.w_gap(other, -z, x_star)
        v = -z
        _eval_cot(other, x_star, cot[1 - idx_f])
        gz = x_star
        if other.smooth_conjugate:
            _conj_cot(other, v, cot[1 - idx_f])
            gz = gz - convex.conjugate_grad(other, v)
        # an indicator conjugate is constant where finite; outside it the value is inf
        _subgrad_cot(frozen, x_star, gz, cot[idx_f])
    elif kind == "gradient-penalty":
        m = E.modulus
        if m <= 0:
            raise ContractError("gradient penalty needs a strongly convex energy")
        q = convex.subgradient(E, x_star)
        qq = float(np.sum(q * q))
        value = qq / (2.0 * m)
        for atom, c in zip(E.atoms, cot):
            _subgrad_cot(atom, x_star, q / m, c)
            if atom.kind == "quadratic":
                accumulate(c, "weight", -qq / (2.0 * m * m))
    else:
        raise ContractError("the primal Bregman surrogate is a saddle problem with no joint-minimization form")
    g_theta = problem.energy.pullback(theta, y, cot)
    return value, g_theta, du


def surrogate_batch_objective(problem, theta, inner_vars=None, anchors=None):
    """Sum of per-sample surrogates with gradients in theta and the inner variables.

    Returns ``(value, grad_theta, grad_inner)``; ``grad_inner`` is a list with
    one entry per sample (None where the kind has no inner variable).
    """
    theta = np.asarray(theta, dtype=float)
    n = len(problem.samples)
    if inner_vars is None or len(inner_vars) == 0:
        inner_vars = problem.inner_init(theta)
    if len(inner_vars) != n:
        raise ContractError(f"{len(inner_vars)} inner variables for {n} samples")
    if anchors is not None and len(anchors) != n:
        raise ContractError(f"{len(anchors)} anchors for {n} samples")
    total, grad = 0.0, np.zeros_like(theta)
    grad_inner = []
    for i in range(n):
        v, g, du = _sample_terms(problem, theta, i, inner_vars[i], None if anchors is None else anchors[i])
        total += v
        grad = grad + g
        grad_inner.append(du)
    return total, grad, grad_inner


# -- joint minimization over (theta, inner) --------------------------------------

class _Packer:
    def __init__(self, theta, inner):
        self.shapes = [np.shape(theta)] + [None if u is None else np.shape(u) for u in inner]
        self.sizes = [0 if s is None else int(np.prod(s)) for s in self.shapes]

    def pack(self, theta, inner):
        parts = [np.ravel(theta)] + [np.ravel(u) for u in inner if u is not None]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, vec):
        out, k = [], 0
        for s, n in zip(self.shapes, self.sizes):
            if s is None:
                out.append(None)
            else:
                out.append(vec[k:k + n].reshape(s))
                k += n
        return out[0], out[1:]


def _projection(problem, theta, packer, theta_box=None):
    boxed = [inner_is_boxed(problem.split(theta, i)) for i in range(len(problem.samples))]
    mask = np.zeros(sum(packer.sizes), dtype=bool)
    k = packer.sizes[0]
    for b, n in zip(boxed, packer.sizes[1:]):
        if b:
            mask[k:k + n] = True
        k += n

    def project(v, step=None):
        v = v.copy()
        v[mask] = np.clip(v[mask], -1.0, 1.0)
        if theta_box is not None:
            v[:packer.sizes[0]] = np.clip(v[:packer.sizes[0]], *theta_box)
        return v

    return project


@dataclass
class SurrogateRun:
    theta: np.ndarray
    inner: list
    value: float
    trace: List[float]


def minimize_surrogate(problem, theta0, inner0=None, anchors=None, method="fista", step=1.0,
                       iterations=500, steps_per_epoch=50, theta_box=None, callback=None):
    """Jointly minimize the batch surrogate over theta and the inner variables.

    ``fista``: projected accelerated gradient with backtracking, initial
    step ``step``; ``trace`` holds the objective per iteration.
    ``adam``: projected Adam with step ``step`` run in epochs of
    ``steps_per_epoch``; an epoch that raises the objective is undone and
    the step halved, so the per-epoch ``trace`` never increases.
    ``callback(k, theta)`` runs after every fista iterate or accepted epoch.
    """
    theta0 = np.asarray(theta0, dtype=float)
    inner0 = problem.inner_init(theta0) if inner0 is None else inner0
    packer = _Packer(theta0, inner0)
    project = _projection(problem, theta0, packer, theta_box)

    def fun_grad(vec):
        th, inn = packer.unpack(vec)
        val, gt, gi = surrogate_batch_objective(problem, th, inn, anchors)
        return val, packer.pack(gt, gi)

    x0 = project(packer.pack(theta0, inner0))
    if method == "fista":
        trace = []
        pg = ProxGradProblem(smooth=fun_grad, x0=x0, prox_map=project, lipschitz=1.0 / step,
                             domain=None if theta_box is None else project)
        cb = None if callback is None else (lambda k, v: callback(k, packer.unpack(v)[0]))
        x, _ = prox_gradient(pg, SolverConfig(max_iter=iterations, tol=1e-12), history=trace, callback=cb)
        value = fun_grad(x)[0]
        if not trace or value < trace[-1]:
            trace.append(value)
    elif method == "adam":
        opt = Adam(x0, step, project, AdamConfig())
        value = fun_grad(x0)[0]
        trace = [value]
        epochs = max(1, iterations // steps_per_epoch)
        for k in range(epochs):
            saved = opt.state()
            for _ in range(steps_per_epoch):
                _, g = fun_grad(opt.theta)
                opt.step(g)
            new = fun_grad(opt.theta)[0]
            if not np.isfinite(new):
                raise SolverError("non-finite surrogate objective")
            if new > value:
                opt.restore(saved)
                opt.tau *= 0.5
                continue
            value = new
            trace.append(value)
            if callback is not None:
                callback(k, packer.unpack(opt.theta)[0])
        x = opt.theta
    else:
        raise ContractError(f"unknown method {method!r}")
    theta, inner = packer.unpack(x)
    return SurrogateRun(theta=theta.copy(), inner=[None if u is None else u.copy() for u in inner],
                        value=float(value), trace=[float(t) for t in trace])


# -- guarded iterative scheme -----------------------------------------------------

@dataclass
class IterationConfig:
    outer_iterations: int = 10
    method: str = "fista"
    step: float = 1.0
    inner_iterations: int = 500
    steps_per_epoch: int = 50
    max_rejections: int = 3
    trust_residual: float = 1e-6
    loss_floor: float = 1e-24
    anchor_start: str = "truth"
    theta_box: Optional[tuple] = None
    lower: Optional[SolverConfig] = None


@dataclass
class IterationState:
    theta: np.ndarray
    anchors: list
    loss_trace: List[float]
    tau: float
    reductions: int = 0
    inner: Optional[list] = None
    records: List[dict] = field(default_factory=list)
    surrogate_traces: List[List[float]] = field(default_factory=list)


def true_loss(problem, theta, config=None, trust=1e-6, warm=None):
    """``sum_i l(x*_i, x_i(theta))`` with lower-level solutions; returns ``(loss, xs)``."""
    ys = [y for _, y in problem.samples]
    xs, res = problem.energy.solve_batch(theta, ys, config, warm)
    worst = max(res) if res else 0.0
    if worst > trust:
        cfg = config or LOWER_CONFIG
        longer = SolverConfig(max_iter=4 * cfg.max_iter, tol=cfg.tol, check_every=cfg.check_every)
        xs, res = problem.energy.solve_batch(theta, ys, longer, xs)
        worst = max(res)
        if worst > trust:
            raise SolverError("lower-level solve did not reach the trusted residual", worst)
    return problem.loss(xs), xs


def iterative_train(problem, theta0, config=None, on_record=None, inner0=None):
    """Guarded majorization-minimization over theta.

    Anchors start at the ground truth, so the first round minimizes the
    Bregman surrogate; ``anchor_start="solution"`` starts them at the
    lower-level solutions for theta0 instead (useful after a separate
    Bregman training).  After every round the true loss is evaluated; a
    round that raises it is discarded and the surrogate step halved.  After
    ``max_rejections`` consecutive rejections the scheme stops.
    """
    cfg = config or IterationConfig()
    iterative = SurrogateProblem(problem.samples, problem.energy, problem.generator, "iterative")
    check_condition(iterative.split(np.asarray(theta0, dtype=float), 0), problem.generator)
    theta = np.asarray(theta0, dtype=float).copy()
    loss, xs = true_loss(iterative, theta, cfg.lower, cfg.trust_residual)
    if cfg.anchor_start == "solution":
        anchors = [np.asarray(x, dtype=float) for x in xs]
    elif cfg.anchor_start == "truth":
        anchors = [np.asarray(x, dtype=float) for x, _ in problem.samples]
    else:
        raise ContractError(f"unknown anchor start {cfg.anchor_start!r}")
    state = IterationState(theta=theta, anchors=anchors, loss_trace=[loss], tau=cfg.step,
                           inner=iterative.inner_init(theta) if inner0 is None else inner0)
    rejections = 0
    for it in range(1, cfg.outer_iterations + 1):
        if loss <= cfg.loss_floor:
            break
        run = minimize_surrogate(iterative, state.theta, state.inner, state.anchors, cfg.method, state.tau,
                                 cfg.inner_iterations, cfg.steps_per_epoch, cfg.theta_box)
        state.surrogate_traces.append(run.trace)
        new_loss, new_xs = true_loss(iterative, run.theta, cfg.lower, cfg.trust_residual, xs)
        accepted = new_loss <= loss
        record = {"iteration": it, "tau": state.tau, "surrogate": run.value, "loss": new_loss,
                  "accepted": int(accepted)}
        state.records.append(record)
        if on_record is not None:
            on_record(record)
        if accepted:
            rejections = 0
            state.theta, state.inner = run.theta, run.inner
            state.anchors = [np.asarray(x, dtype=float) for x in new_xs]
            loss, xs = new_loss, new_xs
            state.loss_trace.append(loss)
        else:
            rejections += 1
            state.tau *= 0.5
            state.reductions += 1
            if rejections >= cfg.max_rejections:
                break
    return state
