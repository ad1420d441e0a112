"""Parametric majorization: surrogate training of convex energy-minimization models."""

from .convex import BregmanGenerator, EnergyAtom, SplitEnergy
from .errors import ContractError, DomainError, FormatError, SolverError
from .surrogates import (IterationConfig, IterationState, SurrogateProblem, bregman_surrogate_dual,
                         bregman_surrogate_primal, gradient_penalty, iterative_surrogate, iterative_train,
                         partial_surrogate, surrogate_batch_objective)

__version__ = "0.1.0"
