"""Residual gradient descent (Res-GD) on F_eta = f + r_eta.

Each iteration forms ``b = x - alpha grad f(x)`` and two candidates,
``u = b - gamma grad r_eta(b)`` and ``v = b - alpha grad r_eta(x)``, then keeps
whichever has the smaller smoothed objective (ties go to ``u``).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .linops import FidelityProblem, estimate_spectral_norm, fidelity_gradient, fidelity_value
from .regularizer import (
    FilterBank,
    RegularizerBounds,
    check_eta,
    estimate_bounds,
    g_apply,
    r_eta_gradient,
    r_eta_value,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "SolverConfig",
    "IterateRecord",
    "RunResult",
    "objective_F_eta",
    "objective_parts",
    "b_step",
    "u_step",
    "v_step",
    "select_step",
    "compute_L_eta",
    "iteration_bound",
    "step_interval",
    "step_sizes",
    "combined_step",
    "resolve_constants",
    "run",
    "write_trace_csv",
    "TRACE_HEADER",
]

TRACE_HEADER = ["k", "F_eta", "f_val", "r_eta_val", "chose_u", "grad_norm_proxy",
                "step_alpha", "step_gamma"]

# F_eta may rise by at most this much before the run is declared divergent
DIVERGENCE_SLACK = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``alphas``/``betas`` give explicit per-iteration step sizes (cycled by
    iteration index, last value repeated); ``None`` selects the defaults
    ``alpha_k = 1/(beta_bar L_eta)`` and ``beta_k = alpha_k``.
    """

    eta: float = 0.01
    eps: float = 1e-4
    alpha_bar: float = 2.0
    beta_bar: float = 1.5
    max_iters: int = 1000
    alphas: Optional[Sequence[float]] = None
    betas: Optional[Sequence[float]] = None
    eta_equals_eps: bool = False
    use_u_step: bool = True
    L_eta: Optional[float] = None

    def __post_init__(self):
        if not self.alpha_bar > self.beta_bar > 1:
            raise ConfigError("need alpha_bar > beta_bar > 1")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        check_eta(self.eta)
        if self.L_eta is not None and not self.L_eta > 0:
            raise ConfigError("L_eta must be positive")

    @property
    def effective_eta(self) -> float:
        return self.eps if self.eta_equals_eps else self.eta


@dataclass
class IterateRecord:
    k: int
    F_eta: float
    f_val: float
    r_eta_val: float
    chose_u: bool
    grad_norm_proxy: float
    step_alpha: float
    step_gamma: float
    # not exported to CSV; kept for the descent checks
    F_prev: float = math.nan
    F_u: float = math.nan
    F_v: float = math.nan
    step_norm_v: float = math.nan


@dataclass
class RunResult:
    x: np.ndarray
    trace: list = field(default_factory=list)
    status: str = "max_iters"
    L_eta: float = math.nan
    bounds: Optional[RegularizerBounds] = None
    L_f: float = math.nan
    eta: float = math.nan
    objective_evals: int = 0

    @property
    def n_updates(self) -> int:
        """Index of the returned iterate, i.e. number of accepted updates."""
        if self.status == "converged":
            return len(self.trace) - 1
        return len(self.trace)

    @property
    def F_values(self) -> np.ndarray:
        return np.array([r.F_eta for r in self.trace])


def objective_parts(problem: FidelityProblem, fb: FilterBank, x, eta) -> tuple[float, float]:
    return fidelity_value(problem, x), r_eta_value(g_apply(fb, x), eta)


def objective_F_eta(problem: FidelityProblem, fb: FilterBank, x, eta) -> float:
    f, r = objective_parts(problem, fb, x, eta)
    val = f + r
    if not math.isfinite(val):
        raise FloatingPointError("objective is not finite")
    return val


def b_step(x, alpha_k: float, problem: FidelityProblem) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) - alpha_k * fidelity_gradient(problem, x)


def u_step(b, gamma_k: float, fb: FilterBank, eta, learned: bool = False) -> np.ndarray:
    return np.asarray(b, dtype=np.float64) - gamma_k * r_eta_gradient(fb, b, eta, learned)


def v_step(b, alpha_k: float, x_k, fb: FilterBank, eta, learned: bool = False) -> np.ndarray:
    return np.asarray(b, dtype=np.float64) - alpha_k * r_eta_gradient(fb, x_k, eta, learned)


def select_step(u, v, problem: FidelityProblem, fb: FilterBank, eta):
    """Return ``(x_next, chose_u)``: the candidate with smaller F_eta, ties to ``u``."""
    x_next, chose_u, _, _ = _select(u, v, problem, fb, eta)
    return x_next, chose_u


def _evaluate(problem, fb, x, eta) -> tuple[float, float, float]:
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            f, r = objective_parts(problem, fb, x, eta)
        except FloatingPointError:
            return math.inf, math.inf, math.inf
    F = f + r
    return (F, f, r) if math.isfinite(F) else (math.inf, math.inf, math.inf)


def _select(u, v, problem, fb, eta):
    ev_u = _evaluate(problem, fb, u, eta)
    ev_v = _evaluate(problem, fb, v, eta)
    if not (math.isfinite(ev_u[0]) or math.isfinite(ev_v[0])):
        raise FloatingPointError("both candidates have non-finite objective")
    if ev_u[0] <= ev_v[0]:
        return u, True, ev_u, ev_v
    return v, False, ev_u, ev_v


def compute_L_eta(L_f: float, bounds: RegularizerBounds) -> float:
    """``L_f + m L_g + M^2 / eta``."""
    if L_f < 0 or bounds.M < 0 or bounds.L_g < 0:
        raise ValueError("Lipschitz inputs must be nonnegative")
    check_eta(bounds.eta)
    return L_f + bounds.L_reta


def _exact(v) -> Fraction:
    # decimal reading of the float so that e.g. 0.1 ** 2 does not flip the floor
    return Fraction(repr(float(v)))


def iteration_bound(F0: float, F_star: float, cfg: SolverConfig, L_eta: float) -> int:
    """``floor(2 alpha_bar^2 L_eta (F0 - F*) / ((beta_bar - 1) eps^2)) + 1``."""
    if not cfg.eps > 0:
        raise ValueError("eps must be positive")
    if F0 < F_star:
        raise ValueError("F0 must not be below F_star")
    num = 2 * _exact(cfg.alpha_bar) ** 2 * _exact(L_eta) * (_exact(F0) - _exact(F_star))
    den = (_exact(cfg.beta_bar) - 1) * _exact(cfg.eps) ** 2
    return math.floor(num / den) + 1


def step_interval(cfg: SolverConfig, L_eta: float) -> tuple[float, float]:
    return 1.0 / (cfg.alpha_bar * L_eta), 1.0 / (cfg.beta_bar * L_eta)


def _pick(seq, k: int, default: float) -> float:
    if seq is None or len(seq) == 0:
        return default
    return float(seq[min(k - 1, len(seq) - 1)])


def combined_step(alpha: float, beta: float) -> float:
    """``gamma = alpha beta / (alpha + beta)``, written so that ``beta == alpha`` gives ``alpha / 2`` exactly."""
    return alpha / (1.0 + alpha / beta)


def step_sizes(cfg: SolverConfig, L_eta: float, k: int) -> tuple[float, float]:
    """``(alpha_k, gamma_k)`` for iteration ``k``; ``beta_k`` defaults to ``alpha_k``."""
    lo, hi = step_interval(cfg, L_eta)
    alpha = _pick(cfg.alphas, k, hi)
    # tiny relative slack so that a user typing the endpoint in decimal passes
    if not (lo * (1 - 1e-12) <= alpha <= hi * (1 + 1e-12)):
        raise ConfigError(f"alpha_{k} = {alpha:.6g} outside [{lo:.6g}, {hi:.6g}]")
    beta = _pick(cfg.betas, k, alpha)
    if not beta > 0:
        raise ConfigError(f"beta_{k} must be positive")
    return alpha, combined_step(alpha, beta)


def resolve_constants(problem: FidelityProblem, fb: FilterBank, cfg: SolverConfig):
    """``(L_eta, bounds, L_f)`` as used by :func:`run`; ``cfg.L_eta`` overrides the estimate."""
    bounds = estimate_bounds(fb, cfg.effective_eta)
    L_f = estimate_spectral_norm(problem.op, iters=200) ** 2
    L_eta = cfg.L_eta if cfg.L_eta is not None else compute_L_eta(L_f, bounds)
    return L_eta, bounds, L_f


def run(problem: FidelityProblem, fb: FilterBank, x0, cfg: SolverConfig) -> RunResult:
    """Run Res-GD from ``x0`` until the gradient proxy drops to ``eps`` or ``max_iters``.

    The proxy ``||x^k - v^{k+1}|| / alpha_k`` equals ``||grad F_eta(x^k)||``. On
    the iteration where it first falls below ``eps`` no update is made and the
    current iterate is returned.
    """
    eta = cfg.effective_eta
    x = np.array(x0, dtype=np.float64)
    if x.shape != (problem.op.n_in,) or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite vector matching the operator input")

    L_eta, bounds, L_f = resolve_constants(problem, fb, cfg)
    result = RunResult(x=x, L_eta=L_eta, bounds=bounds, L_f=L_f, eta=eta)

    f_val, r_val = objective_parts(problem, fb, x, eta)
    F = f_val + r_val
    result.objective_evals = 1
    if not math.isfinite(F):
        result.status = "diverged"
        return result

    for k in range(1, cfg.max_iters + 1):
        alpha, gamma = step_sizes(cfg, L_eta, k)
        b = b_step(x, alpha, problem)
        v = v_step(b, alpha, x, fb, eta)
        step_v = float(np.linalg.norm(x - v))
        proxy = step_v / alpha
        if proxy <= cfg.eps:
            result.trace.append(IterateRecord(k, F, f_val, r_val, False, proxy, alpha, gamma,
                                              F_prev=F, step_norm_v=step_v))
            result.status = "converged"
            break
        if cfg.use_u_step:
            u = u_step(b, gamma, fb, eta)
            try:
                x_new, chose_u, ev_u, ev_v = _select(u, v, problem, fb, eta)
            except FloatingPointError:
                result.status = "diverged"
                break
            result.objective_evals += 2
        else:
            x_new, chose_u, ev_u = v, False, (math.nan,) * 3
            ev_v = _evaluate(problem, fb, v, eta)
            result.objective_evals += 1
        F_u, F_v = ev_u[0], ev_v[0]
        F_new, f_new, r_new = ev_u if chose_u else ev_v
        if not math.isfinite(F_new) or F_new > F + DIVERGENCE_SLACK:
            logger.warning("F_eta rose from %.17g to %.17g at k=%d; aborting", F, F_new, k)
            result.status = "diverged"
            break
        result.trace.append(IterateRecord(k, F_new, f_new, r_new, chose_u, proxy, alpha, gamma,
                                          F_prev=F, F_u=F_u, F_v=F_v, step_norm_v=step_v))
        x, F, f_val, r_val = x_new, F_new, f_new, r_new
    else:
        result.status = "max_iters"

    result.x = x
    return result


def write_trace_csv(path, trace: Sequence[IterateRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TRACE_HEADER)
        for r in trace:
            wr.writerow([r.k, f"{r.F_eta:.17g}", f"{r.f_val:.17g}", f"{r.r_eta_val:.17g}",
                         int(r.chose_u), f"{r.grad_norm_proxy:.17g}",
                         f"{r.step_alpha:.17g}", f"{r.step_gamma:.17g}"])
