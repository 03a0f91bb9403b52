"""Forget/retain losses, gradient cosine similarity, the inner objective and
its stationarity-penalised outer objective.

The inner objective is ``phi = L_f - beta * cos(grad L_f, grad L_r)``. Its
gradient depends on the loss Hessians through the cosine term, so two
strategies are offered:

``fd-exact``
    central differences of the full scalar ``phi`` (``2 d`` evaluations).
``first-order-surrogate``
    analytic ``grad L_f`` minus ``beta`` times the cosine gradient, the
    latter assembled by the chain rule from two directional differences of
    the analytic loss gradients (O(1) gradient evaluations).

The penalty objective is ``F = L_r + rho * ||grad phi||^2`` and its gradient
``grad L_r + 2 rho H_phi grad phi`` uses a finite-difference Hessian-vector
product over whichever ``grad phi`` strategy is active.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore
from .errors import ContractViolation, InvalidArgument, NumericalFailure

FD_EXACT = "fd-exact"
SURROGATE = "first-order-surrogate"
GRAD_METHODS = (FD_EXACT, SURROGATE)

DEFAULT_SIM_FLOOR = 1e-10


def cosine_sim(g1, g2, floor=DEFAULT_SIM_FLOOR):
    """Cosine of the angle between two gradients, 0 when either is below ``floor``."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ContractViolation(f"gradient shapes differ: {g1.shape} vs {g2.shape}")
    n1 = np.linalg.norm(g1)
    n2 = np.linalg.norm(g2)
    if n1 < floor or n2 < floor:
        return 0.0
    return float(np.clip(np.dot(g1, g2) / (n1 * n2), -1.0, 1.0))


def _cosine_partials(g1, g2, floor):
    """Partial derivatives of ``cosine_sim`` with respect to each argument."""
    n1 = np.linalg.norm(g1)
    n2 = np.linalg.norm(g2)
    if n1 < floor or n2 < floor:
        return None, None, 0.0
    s = float(np.dot(g1, g2) / (n1 * n2))
    d1 = g2 / (n1 * n2) - s * g1 / (n1 * n1)
    d2 = g1 / (n1 * n2) - s * g2 / (n2 * n2)
    return d1, d2, s


def _check_method(method):
    if method not in GRAD_METHODS:
        raise InvalidArgument(f"unknown gradient method {method!r}; expected one of {GRAD_METHODS}")


class _ContextMethods:
    """Method-style access to the module functions for any context."""

    def forget_loss_and_grad(self, theta):
        return self.forget_loss(theta), self.forget_grad(theta)

    def similarity(self, theta):
        return cosine_sim(self.forget_grad(theta), self.retain_grad(theta), self.sim_floor)

    def phi(self, theta):
        return phi(self, theta)

    def grad_phi(self, theta, method=FD_EXACT):
        return grad_phi(self, theta, method)

    def penalty_objective(self, theta, rho, method=FD_EXACT):
        return penalty_objective(self, theta, rho, method)

    def grad_penalty_objective(self, theta, rho, method=FD_EXACT):
        return grad_penalty_objective(self, theta, rho, method)


def _check_context_scalars(beta, sim_floor):
    if beta < 0:
        raise InvalidArgument("beta must be non-negative")
    if sim_floor <= 0:
        raise InvalidArgument("sim_floor must be positive")


@dataclass(frozen=True)
class ObjectiveContext(_ContextMethods):
    """Frozen forget/retain batches of a model problem plus ``beta``."""

    problem: diffcore.Problem
    batch_f: diffcore.LabeledBatch
    batch_r: diffcore.LabeledBatch
    beta: float = 1.0
    sim_floor: float = DEFAULT_SIM_FLOOR
    fd_step: float = diffcore.FD_STEP

    def __post_init__(self):
        _check_context_scalars(self.beta, self.sim_floor)
        self.problem.check_batch(self.batch_f)
        self.problem.check_batch(self.batch_r)

    @property
    def dim(self):
        return self.problem.dim

    def forget_loss(self, theta):
        return self.problem.loss(theta, self.batch_f)

    def retain_loss(self, theta):
        return self.problem.loss(theta, self.batch_r)

    def forget_grad(self, theta):
        return self.problem.grad(theta, self.batch_f)

    def retain_grad(self, theta):
        return self.problem.grad(theta, self.batch_r)

    def forget_loss_and_grad(self, theta):
        return self.problem.loss_and_grad(theta, self.batch_f)


@dataclass(frozen=True)
class FunctionContext(_ContextMethods):
    """Context over explicit loss/gradient callables (closed-form instances)."""

    forget_loss: Callable
    forget_grad: Callable
    retain_loss: Callable
    retain_grad: Callable
    dim: int
    beta: float = 0.0
    sim_floor: float = DEFAULT_SIM_FLOOR
    fd_step: float = diffcore.FD_STEP

    def __post_init__(self):
        _check_context_scalars(self.beta, self.sim_floor)


def phi(ctx, theta):
    """Inner objective: forget loss minus ``beta`` times gradient similarity."""
    if ctx.beta == 0.0:
        return ctx.forget_loss(theta)
    lf, gf = ctx.forget_loss_and_grad(theta)
    gr = ctx.retain_grad(theta)
    return lf - ctx.beta * cosine_sim(gf, gr, ctx.sim_floor)


def _sim_grad(ctx, theta):
    gf = ctx.forget_grad(theta)
    gr = ctx.retain_grad(theta)
    d_f, d_r, _ = _cosine_partials(gf, gr, ctx.sim_floor)
    out = np.zeros_like(gf)
    if d_f is None:
        return out
    # H_f d_f + H_r d_r, each a directional difference of an analytic gradient
    if np.any(d_f):
        out += diffcore.hvp(ctx.forget_grad, theta, d_f, ctx.fd_step)
    if np.any(d_r):
        out += diffcore.hvp(ctx.retain_grad, theta, d_r, ctx.fd_step)
    return out


def grad_phi(ctx, theta, method=FD_EXACT):
    """Gradient of :func:`phi` by the selected strategy."""
    _check_method(method)
    theta = diffcore.as_params(theta, ctx.dim)
    try:
        if ctx.beta == 0.0:
            if method == FD_EXACT:
                return diffcore.fd_grad(ctx.forget_loss, theta, ctx.fd_step)
            return ctx.forget_grad(theta)
        if method == FD_EXACT:
            return diffcore.fd_grad(lambda t: phi(ctx, t), theta, ctx.fd_step)
        return ctx.forget_grad(theta) - ctx.beta * _sim_grad(ctx, theta)
    except NumericalFailure as exc:
        raise NumericalFailure(f"[{method}] {exc}", coordinate=exc.coordinate, method=method) from exc


def penalty_objective(ctx, theta, rho, method=FD_EXACT):
    """Retain loss plus ``rho`` times the squared norm of ``grad phi``."""
    if rho < 0:
        raise InvalidArgument("rho must be non-negative")
    lr = ctx.retain_loss(theta)
    if rho == 0:
        return lr
    g = grad_phi(ctx, theta, method)
    return lr + rho * float(np.dot(g, g))


def grad_penalty_objective(ctx, theta, rho, method=FD_EXACT):
    """Gradient of :func:`penalty_objective`.

    The stationarity term ``2 rho H_phi grad phi`` is dropped (zero) when
    ``||grad phi||`` falls below the context's ``sim_floor``.
    """
    if rho < 0:
        raise InvalidArgument("rho must be non-negative")
    gr = ctx.retain_grad(theta)
    if rho == 0:
        return gr
    gp = grad_phi(ctx, theta, method)
    if np.linalg.norm(gp) < ctx.sim_floor:
        return gr
    hv = diffcore.hvp(lambda t: grad_phi(ctx, t, method), theta, gp, ctx.fd_step)
    return gr + 2.0 * rho * hv
