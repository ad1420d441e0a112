"""Quick invariant suite behind ``parmaj check``.

Each check returns ``(ok, detail)``; ``run_checks`` prints one PASS/FAIL line
per check.  The full property-based versions live in the test suite.
"""

import numpy as np

from . import convex, surrogates, toy
from .linops import Correlation2D, FiniteDifference, MatrixMap
from .parametric import WeightedSparsity
from .solvers import SaddleProblem, primal_dual, prox_gradient, ProxGradProblem


def check_toy_ordering():
    inst = toy.ToyInstance()
    worst = 0.0
    for row in toy.sweep(inst, np.linspace(0.0, 3.0, 301)):
        _, loss, breg, part, gp = row
        worst = max(worst, loss - breg, breg - part, part - gp)
    return worst <= 1e-9, f"max ordering violation {worst:.2e}"


def check_toy_generic():
    inst = toy.ToyInstance()
    worst = 0.0
    xs = np.array([inst.x_star])
    for t in np.linspace(0.0, 3.0, 31):
        ref = toy.toy_surrogates_closed_form(inst, t)
        E = toy.toy_energy(inst, t)
        worst = max(worst,
                    abs(surrogates.bregman_surrogate_dual(E, xs)[0] - ref["bregman"]),
                    abs(surrogates.partial_surrogate(E, xs, "E2") - ref["partial"]),
                    abs(surrogates.gradient_penalty(E, xs) - ref["gradient_penalty"]))
    return worst <= 1e-9, f"max deviation {worst:.2e}"


def _random_lasso(rng, n=4, m=3):
    A = rng.standard_normal((m, n))
    y = rng.standard_normal(n)
    w = rng.uniform(0.1, 1.0)
    E = convex.SplitEnergy(convex.quadratic(y), convex.l1(w, MatrixMap(A)), y=y)
    return E, rng.standard_normal(n)


def check_primal_dual_agreement(count=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        E, xs = _random_lasso(rng)
        worst = max(worst, abs(surrogates.bregman_surrogate_primal(E, xs) - surrogates.bregman_surrogate_dual(E, xs)[0]))
    return worst <= 1e-6, f"max |primal - dual| {worst:.2e}"


def check_iterative_reduction(count=20, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        E, xs = _random_lasso(rng)
        worst = max(worst, abs(surrogates.iterative_surrogate(E, xs, xs) - surrogates.bregman_surrogate_dual(E, xs)[0]))
    return worst <= 1e-9, f"max deviation {worst:.2e}"


def check_fenchel_young(count=200, seed=2):
    rng = np.random.default_rng(seed)
    atoms = [convex.quadratic(rng.standard_normal(3), 1.5), convex.l1(0.7), convex.entropy(rng.standard_normal(3))]
    worst = 0.0
    for _ in range(count):
        for a in atoms:
            if a.kind == "entropy":
                x = convex.softmax(rng.standard_normal(3))
                p = rng.standard_normal(3)
            else:
                x = rng.standard_normal(3)
                p = rng.uniform(-0.7, 0.7, 3)
            worst = min(worst, convex.atom_eval(a, x) + convex.conjugate_eval(a, p) - float(np.dot(p, x)))
    return worst >= -1e-9, f"min Fenchel-Young gap {worst:.2e}"


def check_adjoints(seed=3):
    rng = np.random.default_rng(seed)
    ops = [FiniteDifference("neumann"), FiniteDifference("zero"), Correlation2D(rng.standard_normal((3, 3, 3)))]
    worst = 0.0
    for op in ops:
        x = rng.standard_normal((9, 11))
        Kx = op.forward(x)
        p = rng.standard_normal(Kx.shape)
        worst = max(worst, abs(float(np.sum(Kx * p)) - float(np.sum(x * op.adjoint(p)))))
    return worst <= 1e-8, f"max adjoint mismatch {worst:.2e}"


def check_solvers():
    x, _ = prox_gradient(ProxGradProblem(smooth=lambda v: (0.5 * float(np.sum((v - 1.5) ** 2)), v - 1.5),
                                         x0=np.zeros(1), g=convex.l1(1.2)))
    img = np.full((8, 8), 7.0)
    problem = SaddleProblem(FiniteDifference(), convex.l1(5.0), convex.quadratic(img), x0=img, strong_convexity=1.0)
    tv, _, _ = primal_dual(problem)
    err = max(abs(float(x[0]) - 0.3), float(np.max(np.abs(tv - img))))
    return err <= 1e-8, f"max error {err:.2e}"


def check_toy_training():
    from .surrogates import IterationConfig, SurrogateProblem, iterative_train
    problem = SurrogateProblem([(np.array([0.3]), np.array([1.5]))], WeightedSparsity())
    state = iterative_train(problem, np.array([2.5]), IterationConfig(outer_iterations=10))
    ok = abs(float(state.theta[0]) - 1.2) <= 1e-3 and state.loss_trace[-1] <= 1e-6
    mono = all(b <= a for a, b in zip(state.loss_trace, state.loss_trace[1:]))
    return ok and mono, f"theta {float(state.theta[0]):.6f}, loss {state.loss_trace[-1]:.2e}"


CHECKS = [
    ("toy surrogate ordering", check_toy_ordering),
    ("toy closed forms vs generic surrogates", check_toy_generic),
    ("primal vs dual Bregman surrogate", check_primal_dual_agreement),
    ("iterative surrogate at the ground truth", check_iterative_reduction),
    ("Fenchel-Young inequality", check_fenchel_young),
    ("adjoint consistency", check_adjoints),
    ("solver reference solutions", check_solvers),
    ("toy bi-level recovery", check_toy_training),
]


def run_checks(out=print):
    failures = 0
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failures += not ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return failures
