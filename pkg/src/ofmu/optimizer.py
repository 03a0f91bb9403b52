"""Two-loop penalty-based unlearning: inner ascent on ``phi``, outer
penalised descent on ``F``, an increasing penalty schedule and
stationarity-based early stopping.

The loops are written against *context builders*: callables mapping a
``(forget_batch, retain_batch)`` pair to an object exposing the
:mod:`ofmu.objectives` context methods. :func:`run_ofmu` wires a model
problem into that; closed-form instances plug in directly.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore
from .errors import DivergenceError, InvalidArgument, OfmuError
from .objectives import DEFAULT_SIM_FLOOR, FD_EXACT, GRAD_METHODS, ObjectiveContext

MAX_PARAM_MAGNITUDE = 1e8

MAX_ITERATIONS = "max-iterations"
STATIONARITY = "stationarity"


@dataclass(frozen=True)
class OfmuConfig:
    beta: float = 1.0
    eta_in: float = 0.05
    eta_out: float = 0.1
    T: int = 5
    K: int = 30
    # large enough to be full-batch on small datasets; mini-batch noise in
    # the penalty direction grows with rho
    B: int = 2048
    rho0: float = 0.1
    rho_growth: float = 1.5
    rho_max: float = 10.0
    stationarity_tol: float = 1e-6
    grad_method: str = FD_EXACT
    sim_floor: float = DEFAULT_SIM_FLOOR
    seed: int = 0

    def __post_init__(self):
        # zero step sizes are allowed: they are the identity/negative-control runs
        if self.eta_in < 0 or self.eta_out < 0:
            raise InvalidArgument("step sizes must be non-negative")
        if self.beta < 0:
            raise InvalidArgument("beta must be non-negative")
        if self.rho0 <= 0 or self.stationarity_tol <= 0:
            raise InvalidArgument("rho0 and stationarity_tol must be positive")
        if self.rho_growth < 1:
            raise InvalidArgument("rho_growth must be >= 1")
        if self.rho_max < self.rho0:
            raise InvalidArgument("rho_max must be >= rho0")
        if min(self.T, self.K, self.B) < 1:
            raise InvalidArgument("T, K and B must be >= 1")
        if self.grad_method not in GRAD_METHODS:
            raise InvalidArgument(f"unknown grad_method {self.grad_method!r}")

    def to_dict(self):
        return asdict(self)


class _Stream:
    """Without-replacement batches from one dataset, reshuffled per pass."""

    def __init__(self, dataset, batch_size, rng):
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = rng
        self.n = len(dataset)
        self.order = None
        self.pos = 0

    def next(self):
        if self.n <= self.batch_size:
            return self.dataset.take(np.arange(self.n))
        if self.order is None or self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return self.dataset.take(idx)


class MinibatchSampler:
    """Independent mini-batch streams over the retain and forget sets.

    Either dataset may be ``None`` (closed-form problems, or methods that
    must never touch the forget set); the matching draw then returns
    ``None``. Datasets are read only through their ``take`` method.
    """

    def __init__(self, retain, forget, batch_size, seed):
        if batch_size < 1:
            raise InvalidArgument("batch size must be >= 1")
        r_seq, f_seq = np.random.SeedSequence(seed).spawn(2)
        self._retain = _Stream(retain, batch_size, np.random.default_rng(r_seq)) if retain is not None else None
        self._forget = _Stream(forget, batch_size, np.random.default_rng(f_seq)) if forget is not None else None
        self.last_forget = None
        self.last_retain = None

    def forget_batch(self):
        self.last_forget = self._forget.next() if self._forget is not None else None
        return self.last_forget

    def retain_batch(self):
        self.last_retain = self._retain.next() if self._retain is not None else None
        return self.last_retain


@dataclass
class Record:
    k: int
    rho: float
    grad_phi_norm: float
    retain_loss: float
    forget_loss: float
    sim: float
    wall_time: float


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    final_theta: np.ndarray = None
    termination: str = MAX_ITERATIONS
    thetas: list = field(default_factory=list)
    method: str = "ofmu"

    def to_jsonl(self, path, theta_ref=None):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(_nan_to_none(asdict(rec))) + "\n")
            fh.write(json.dumps({
                "final": True,
                "method": self.method,
                "termination": self.termination,
                "records": len(self.records),
                "dim": None if self.final_theta is None else int(self.final_theta.shape[0]),
                "theta_ref": theta_ref,
            }) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        traj = cls()
        with open(path) as fh:
            for line in fh:
                row = json.loads(line)
                if row.get("final"):
                    traj.termination = row["termination"]
                    traj.method = row.get("method", traj.method)
                else:
                    traj.records.append(Record(**{k: float("nan") if v is None else v for k, v in row.items()}))
        return traj

    def summary(self):
        """Deterministic digest (no wall times) for run reports."""
        last = self.records[-1] if self.records else None
        return _nan_to_none({
            "method": self.method,
            "termination": self.termination,
            "records": len(self.records),
            "final_retain_loss": None if last is None else last.retain_loss,
            "final_forget_loss": None if last is None else last.forget_loss,
            "final_grad_phi_norm": None if last is None else last.grad_phi_norm,
        })


def _nan_to_none(row):
    return {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in row.items()}


def penalty_schedule(cfg, k):
    """``min(rho0 * rho_growth**k, rho_max)``."""
    if k < 0:
        raise InvalidArgument("iteration index must be non-negative")
    return min(cfg.rho0 * cfg.rho_growth ** k, cfg.rho_max)


def check_finite(theta, step, values=(), trajectory=None):
    """Divergence guard: non-finite or oversized parameters/objectives abort."""
    if not np.all(np.isfinite(theta)) or np.max(np.abs(theta), initial=0.0) > MAX_PARAM_MAGNITUDE:
        raise DivergenceError(f"parameters diverged at step {step}", step=step, trajectory=trajectory)
    for v in values:
        if not math.isfinite(v):
            raise DivergenceError(f"objective became non-finite at step {step}", step=step, trajectory=trajectory)


def inner_loop(builder, theta, cfg, sampler, step_offset=0):
    """``T`` ascent steps on ``phi``, each on a freshly drawn batch pair."""
    theta = diffcore.as_params(theta)
    for t in range(cfg.T):
        ctx = builder(sampler.forget_batch(), sampler.retain_batch())
        if cfg.eta_in == 0:
            continue
        theta = theta + cfg.eta_in * ctx.grad_phi(theta, cfg.grad_method)
        check_finite(theta, step_offset + t)
    return theta


def outer_step(builder, theta_in, rho_k, cfg, sampler, step_index=0):
    """One penalised descent step from the inner iterate.

    A fresh retain batch is drawn; the forget side reuses the last inner
    forget batch (only the retain batch is resampled for this step).
    """
    if rho_k < 0:
        raise InvalidArgument("rho_k must be non-negative")
    forget = sampler.last_forget if sampler.last_forget is not None else sampler.forget_batch()
    ctx = builder(forget, sampler.retain_batch())
    if cfg.eta_out == 0:
        return diffcore.as_params(theta_in)
    theta = theta_in - cfg.eta_out * ctx.grad_penalty_objective(theta_in, rho_k, cfg.grad_method)
    check_finite(theta, step_index)
    return theta


def run_two_loop(builder, sampler, theta0, cfg, method="ofmu"):
    """Drive the full two-loop procedure over ``cfg.K`` outer iterations."""
    theta = diffcore.as_params(theta0).copy()
    traj = Trajectory(method=method)
    step = 0
    for k in range(cfg.K):
        t0 = time.perf_counter()
        rho_k = penalty_schedule(cfg, k)
        try:
            theta_in = inner_loop(builder, theta, cfg, sampler, step_offset=step)
            step += cfg.T
            last_ctx = builder(sampler.last_forget, sampler.last_retain)
            gnorm = float(np.linalg.norm(last_ctx.grad_phi(theta_in, cfg.grad_method)))
            lr = last_ctx.retain_loss(theta_in)
            lf = last_ctx.forget_loss(theta_in)
            sim = last_ctx.similarity(theta_in)
            check_finite(theta_in, step, (gnorm, lr, lf, sim))
            theta = outer_step(builder, theta_in, rho_k, cfg, sampler, step_index=step)
            step += 1
        except DivergenceError as exc:
            traj.final_theta = theta
            exc.trajectory = traj
            raise
        except (OfmuError, FloatingPointError) as exc:
            traj.final_theta = theta
            raise DivergenceError(f"outer iteration {k} failed: {exc}", step=step, trajectory=traj) from exc
        traj.records.append(Record(k, rho_k, gnorm, lr, lf, sim, time.perf_counter() - t0))
        traj.thetas.append(theta)
        if gnorm <= cfg.stationarity_tol:
            traj.termination = STATIONARITY
            break
    traj.final_theta = theta
    return traj


def problem_builder(problem, beta, sim_floor=DEFAULT_SIM_FLOOR):
    def build(batch_f, batch_r):
        return ObjectiveContext(problem, batch_f, batch_r, beta=beta, sim_floor=sim_floor)
    return build


def run_ofmu(problem, split, theta0, cfg):
    """Unlearn ``split.forget`` from ``theta0`` while preserving ``split.retain``."""
    retain, forget = split.retain, split.forget
    if len(retain) == 0 or len(forget) == 0:
        raise InvalidArgument("both retain and forget sets must be non-empty")
    theta0 = diffcore.as_params(theta0, problem.dim)
    sampler = MinibatchSampler(retain, forget, cfg.B, cfg.seed)
    return run_two_loop(problem_builder(problem, cfg.beta, cfg.sim_floor), sampler, theta0, cfg)


def with_overrides(cfg, **kw):
    return replace(cfg, **kw)
