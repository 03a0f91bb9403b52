"""Numerical checks of the penalty/ascent convergence lemmas on closed-form
quadratic instances.

A :class:`QuadraticInstance` pairs a convex retain loss
``L_r = 0.5 (t - b_r)^T A_r (t - b_r)`` with a concave inner objective
``phi = -0.5 (t - b_phi)^T A_phi (t - b_phi)``. Everything the checks need
(``argmax phi``, the penalty minimiser, ``F*``) is available in closed form,
while the iterative parts run through :mod:`ofmu.optimizer` unchanged.
"""

import json
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import InvalidArgument, NumericalFailure, PreconditionError
from .objectives import SURROGATE, FunctionContext
from .optimizer import MinibatchSampler, OfmuConfig, inner_loop, run_two_loop

SYM_TOL = 1e-12
LEMMA2_SLACK = 1e-10
LEMMA1_FINAL_TOL = 1e-4
LEMMA1_LARGE_RHO = 1e4
# relative slack when comparing consecutive gaps; below this they are ties
GAP_TIE_RTOL = 1e-12


def _spd(matrix, name):
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgument(f"{name} must be square, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL:
        raise InvalidArgument(f"{name} is not symmetric within {SYM_TOL}")
    if np.linalg.eigvalsh(a).min() <= 0:
        raise InvalidArgument(f"{name} is not positive-definite")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class QuadraticInstance:
    A_r: np.ndarray
    A_phi: np.ndarray
    b_r: np.ndarray
    b_phi: np.ndarray
    name: str = "quadratic"

    def __post_init__(self):
        A_r = _spd(self.A_r, "A_r")
        A_phi = _spd(self.A_phi, "A_phi")
        d = A_r.shape[0]
        if A_phi.shape[0] != d:
            raise InvalidArgument("A_r and A_phi differ in dimension")
        for field_name in ("b_r", "b_phi"):
            b = np.array(getattr(self, field_name), dtype=np.float64).reshape(-1)
            if b.shape != (d,):
                raise InvalidArgument(f"{field_name} must have length {d}")
            b.setflags(write=False)
            object.__setattr__(self, field_name, b)
        object.__setattr__(self, "A_r", A_r)
        object.__setattr__(self, "A_phi", A_phi)

    @property
    def dim(self):
        return self.A_r.shape[0]

    @property
    def L(self):
        return float(np.linalg.eigvalsh(self.A_phi).max())

    @property
    def theta_star_in(self):
        return self.b_phi.copy()

    def L_F(self, rho):
        return float(np.linalg.eigvalsh(self.hessian_F(rho)).max())

    def retain_loss(self, theta):
        r = theta - self.b_r
        return 0.5 * float(r @ self.A_r @ r)

    def retain_grad(self, theta):
        return self.A_r @ (theta - self.b_r)

    def phi(self, theta):
        r = theta - self.b_phi
        return -0.5 * float(r @ self.A_phi @ r)

    def grad_phi(self, theta):
        return -self.A_phi @ (theta - self.b_phi)

    def F(self, theta, rho):
        g = self.grad_phi(theta)
        return self.retain_loss(theta) + rho * float(g @ g)

    def hessian_F(self, rho):
        return self.A_r + 2.0 * rho * self.A_phi @ self.A_phi

    def minimize_F(self, rho):
        """Exact minimiser of ``F`` at penalty ``rho`` (a linear solve)."""
        a2 = self.A_phi @ self.A_phi
        rhs = self.A_r @ self.b_r + 2.0 * rho * a2 @ self.b_phi
        return _solve(self.hessian_F(rho), rhs)

    def context(self):
        """Objective context with ``beta = 0``, so the inner objective is ``phi`` itself."""
        return FunctionContext(
            forget_loss=self.phi,
            forget_grad=self.grad_phi,
            retain_loss=self.retain_loss,
            retain_grad=self.retain_grad,
            dim=self.dim,
            beta=0.0,
        )

    def builder(self):
        ctx = self.context()
        return lambda batch_f, batch_r: ctx

    def to_dict(self):
        return {
            "name": self.name,
            "A_r": self.A_r.tolist(),
            "A_phi": self.A_phi.tolist(),
            "b_r": self.b_r.tolist(),
            "b_phi": self.b_phi.tolist(),
        }


def _solve(a, rhs):
    try:
        x = scipy.linalg.solve(a, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        try:
            x = scipy.linalg.solve(a, rhs, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise NumericalFailure(f"singular penalty system: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("penalty system produced a non-finite solution")
    return x


def random_spd(rng, dim, low=0.1, high=1.0):
    """Random SPD matrix with eigenvalues drawn uniformly from ``[low, high]``."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    a = q @ np.diag(rng.uniform(low, high, dim)) @ q.T
    return 0.5 * (a + a.T)


def random_instance(rng, dim, name="random"):
    return QuadraticInstance(
        random_spd(rng, dim), random_spd(rng, dim),
        rng.standard_normal(dim), rng.standard_normal(dim), name,
    )


def _full_batch_sampler():
    return MinibatchSampler(None, None, 1, 0)


# -- checks ----------------------------------------------------------------

def check_lemma2(instance, theta0, T, eta_in):
    """Inner ascent rate: ``phi* - phi(theta_T) <= ||theta* - theta0||^2 / (2 T eta)``."""
    L = instance.L
    if not 0 < eta_in <= 1.0 / L:
        raise PreconditionError(f"eta_in={eta_in} outside (0, 1/L={1.0 / L}]")
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    theta0 = np.asarray(theta0, dtype=np.float64)
    cfg = OfmuConfig(beta=0.0, eta_in=eta_in, T=T, K=1, grad_method=SURROGATE)
    theta_T = inner_loop(instance.builder(), theta0, cfg, _full_batch_sampler())
    star = instance.theta_star_in
    lhs = instance.phi(star) - instance.phi(theta_T)
    bound = float(np.sum((star - theta0) ** 2)) / (2.0 * T * eta_in)
    return {
        "check": "lemma2",
        "instance": instance.name,
        "T": int(T),
        "eta_in": float(eta_in),
        "lhs": float(lhs),
        "bound": float(bound),
        "pass": bool(lhs <= bound + LEMMA2_SLACK),
    }


def check_lemma1(instance, rho_sequence):
    """Stationarity residual ``||grad phi(theta*_rho)||`` along an increasing penalty."""
    rhos = [float(r) for r in rho_sequence]
    if not rhos or rhos[0] <= 0 or any(b <= a for a, b in zip(rhos, rhos[1:])):
        raise PreconditionError("rho_sequence must be positive and strictly increasing")
    residuals = [float(np.linalg.norm(instance.grad_phi(instance.minimize_F(r)))) for r in rhos]
    if all(r <= 1e-12 for r in residuals):
        # shared stationary point: nothing left to decrease
        ok = True
    else:
        ok = all(b < a for a, b in zip(residuals, residuals[1:]))
    if rhos[-1] >= LEMMA1_LARGE_RHO:
        ok = ok and residuals[-1] <= LEMMA1_FINAL_TOL
    return {
        "check": "lemma1",
        "instance": instance.name,
        "rho_sequence": rhos,
        "residuals": residuals,
        "pass": bool(ok),
    }


def composite_fixed_point(instance, cfg):
    """Limit of the full-batch two-loop map at fixed ``rho``.

    One outer iteration is the affine map ``e -> G P e + G (I - P) (b_phi - t*)``
    in the error ``e = theta - t*``, with ``P = (I - eta_in A_phi)^T`` and
    ``G = I - eta_out H_F``. Returns ``(theta_fp, gap_fp)``.
    """
    rho = cfg.rho0
    d = instance.dim
    eye = np.eye(d)
    P = np.linalg.matrix_power(eye - cfg.eta_in * instance.A_phi, cfg.T)
    G = eye - cfg.eta_out * instance.hessian_F(rho)
    t_star = instance.minimize_F(rho)
    e = np.linalg.solve(eye - G @ P, G @ (eye - P) @ (instance.b_phi - t_star))
    theta_fp = t_star + e
    return theta_fp, instance.F(theta_fp, rho) - instance.F(t_star, rho)


def _eventually_non_increasing(gaps, tol):
    """Index from which the sequence never rises by more than ``tol``, or None."""
    start = len(gaps) - 1
    while start > 0 and gaps[start] <= gaps[start - 1] + tol:
        start -= 1
    return start


def check_lemma3_convex(instance, cfg, theta0=None):
    """Decay shape of the penalised-objective gap at a fixed penalty.

    ``cfg`` must have ``rho_growth == 1`` (so ``rho = rho0`` throughout) and
    step sizes within ``1/L`` and ``1/L_F``. Pass means the gap sequence is
    non-increasing from some index ``<= K/2`` on, and the final gap is at
    most 0.9 times the gap at ``K/2``.
    """
    if cfg.rho_growth != 1.0:
        raise PreconditionError("the gap is defined at a fixed rho; set rho_growth = 1")
    rho = cfg.rho0
    if cfg.eta_in > 1.0 / instance.L or cfg.eta_out > 1.0 / instance.L_F(rho):
        raise PreconditionError("step sizes exceed 1/L or 1/L_F")
    if cfg.beta != 0.0:
        raise PreconditionError("quadratic instances define phi directly; use beta = 0")
    theta0 = np.full(instance.dim, 5.0) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    # stationarity early stop would truncate the sequence; checks run all K
    cfg = replace(cfg, stationarity_tol=np.finfo(np.float64).tiny)
    traj = run_two_loop(instance.builder(), _full_batch_sampler(), theta0, cfg, method="lemma3")
    t_star = instance.minimize_F(rho)
    f_star = instance.F(t_star, rho)
    gaps = [instance.F(th, rho) - f_star for th in traj.thetas]
    K = len(gaps)
    half = gaps[K // 2 - 1] if K >= 2 else gaps[0]
    tol = GAP_TIE_RTOL * max(1.0, abs(gaps[0]))
    start = _eventually_non_increasing(gaps, tol)
    ok = start <= K // 2 and gaps[-1] <= 0.9 * half
    _, fp_gap = composite_fixed_point(instance, cfg)
    return {
        "check": "lemma3",
        "instance": instance.name,
        "rho": rho,
        "K": int(cfg.K),
        "T": int(cfg.T),
        "eta_in": cfg.eta_in,
        "eta_out": cfg.eta_out,
        "F_star": f_star,
        "F_gap_per_k": gaps,
        "gap_half": half,
        "gap_final": gaps[-1],
        "non_increasing_from": int(start),
        "fixed_point_gap": float(fp_gap),
        "pass": bool(ok),
    }


# -- canonical instances ---------------------------------------------------

def identity_instance():
    """``A_r = A_phi = I``, ``b_r = (1, 0)``, ``b_phi = 0``: residual ``1 / (1 + 2 rho)``."""
    return QuadraticInstance(np.eye(2), np.eye(2), [1.0, 0.0], [0.0, 0.0], "identity-2d")


def general_instance():
    """Generic conflicting pair; ``A_phi`` eigenvalues in [1, 2] keep the
    large-penalty residual well under ``LEMMA1_FINAL_TOL`` at ``rho = 1e4``."""
    rng = np.random.default_rng(20240611)
    return QuadraticInstance(
        random_spd(rng, 6, 0.5, 1.5), random_spd(rng, 6, 1.0, 2.0),
        rng.standard_normal(6), rng.standard_normal(6), "general-6d",
    )


def _rotated(eigs, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((len(eigs), len(eigs))))
    a = q @ np.diag(eigs) @ q.T
    return 0.5 * (a + a.T)


def shared_optimum_instance():
    """Ill-conditioned pair whose retain optimum is also the inner stationary point.

    This is the setting in which the two-loop fixed point coincides with
    ``argmin F``; the weak ``A_phi`` direction keeps the transient alive
    well past ``K = 200``.
    """
    b = np.array([1.0, -1.0, 0.5, 0.0])
    return QuadraticInstance(
        _rotated([0.01, 0.2, 0.6, 1.0], 2),
        _rotated([0.002, 0.05, 0.3, 1.0], 1),
        b, b, "shared-optimum-4d",
    )


def conflicting_instance():
    """Same matrices as :func:`shared_optimum_instance` with ``b_r != b_phi``."""
    base = shared_optimum_instance()
    return replace(base, b_r=np.array([0.0, 0.5, 1.0, -0.5]), name="conflicting-4d")


def lemma3_config(instance, rho=1.0, K=200, T=10, eta_out=None):
    """Full-batch config at fixed ``rho`` with the largest admissible steps."""
    return OfmuConfig(
        beta=0.0,
        eta_in=1.0 / instance.L,
        eta_out=1.0 / instance.L_F(rho) if eta_out is None else eta_out,
        T=T,
        K=K,
        rho0=rho,
        rho_growth=1.0,
        rho_max=rho,
        grad_method=SURROGATE,
    )


def canonical_bank():
    """Check name -> list of zero-argument callables producing one report each."""
    ident = identity_instance()
    gen = general_instance()
    shared = shared_optimum_instance()
    lemma2 = []
    for inst in (ident, gen, shared):
        theta0 = np.full(inst.dim, 3.0)
        for T in (1, 5, 25):
            lemma2.append(lambda inst=inst, theta0=theta0, T=T: check_lemma2(inst, theta0, T, 1.0 / inst.L))
    rhos = (1.0, 10.0, 100.0, 1e4)
    lemma1 = [lambda inst=inst: check_lemma1(inst, rhos) for inst in (ident, gen, shared)]
    lemma3 = [lambda: check_lemma3_convex(shared, lemma3_config(shared))]
    return {"lemma1": lemma1, "lemma2": lemma2, "lemma3": lemma3}


def report_to_json(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
