"""Reference unlearners: retrain, finetune, gradient ascent, gradient difference."""

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore
from .errors import DivergenceError, InvalidArgument
from .objectives import cosine_sim
from .optimizer import MinibatchSampler, Record, Trajectory, check_finite

RETRAIN = "retrain"
FINETUNE = "finetune"
GRAD_ASCENT = "grad-ascent"
GRAD_DIFF = "grad-diff"
METHODS = (RETRAIN, FINETUNE, GRAD_ASCENT, GRAD_DIFF)


@dataclass(frozen=True)
class BaselineConfig:
    method: str = FINETUNE
    eta: float = 0.05
    steps: int = 300
    B: int = 64
    gd_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown baseline {self.method!r}; expected one of {METHODS}")
        if self.eta < 0:
            raise InvalidArgument("eta must be non-negative")
        if self.steps < 1 or self.B < 1:
            raise InvalidArgument("steps and B must be >= 1")
        if self.gd_lambda < 0:
            raise InvalidArgument("gd_lambda must be non-negative")

    def to_dict(self):
        return asdict(self)


def _retrain_init(problem, seed):
    # fixed spawn key keeps the initializer stream apart from the sampler's
    seq = np.random.SeedSequence(seed, spawn_key=(7,))
    return problem.init_params(np.random.default_rng(seq))


def run_baseline(problem, split, theta0, cfg):
    """Run one baseline and return its per-step :class:`Trajectory`.

    ``retrain`` ignores ``theta0`` (beyond its dimension) and never reads
    the forget set. ``finetune`` updates on the retain set alone but draws
    forget batches to log forget loss and similarity.
    """
    retain, forget = split.retain, split.forget
    if len(retain) == 0 or len(forget) == 0:
        raise InvalidArgument("both retain and forget sets must be non-empty")
    theta = diffcore.as_params(theta0, problem.dim).copy()
    # finetune reads forget batches for diagnostics only; retrain never does
    uses_forget = cfg.method != RETRAIN
    uses_retain = cfg.method != GRAD_ASCENT
    sampler = MinibatchSampler(
        retain if uses_retain else None,
        forget if uses_forget else None,
        cfg.B,
        cfg.seed,
    )
    if cfg.method == RETRAIN:
        theta = _retrain_init(problem, cfg.seed)

    traj = Trajectory(method=cfg.method)
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        bf = sampler.forget_batch()
        br = sampler.retain_batch()
        lf = lr = float("nan")
        gf = gr = None
        if bf is not None:
            lf, gf = problem.loss_and_grad(theta, bf)
        if br is not None:
            lr, gr = problem.loss_and_grad(theta, br)

        if cfg.method in (RETRAIN, FINETUNE):
            direction = -gr
        elif cfg.method == GRAD_ASCENT:
            direction = gf
        else:
            # descend L_r - lambda * L_f
            direction = -(gr - cfg.gd_lambda * gf)

        sim = cosine_sim(gf, gr) if gf is not None and gr is not None else float("nan")
        theta = theta + cfg.eta * direction
        try:
            check_finite(theta, step, [v for v in (lf, lr) if not np.isnan(v)])
        except DivergenceError as exc:
            traj.final_theta = theta
            exc.trajectory = traj
            raise
        traj.records.append(Record(step, 0.0, float("nan"), lr, lf, sim, time.perf_counter() - t0))
        traj.thetas.append(theta)
    traj.final_theta = theta
    return traj
