"""epsilon-KKT certificates for min f(x) + sum_i ||g_i(x)||.

The nonsmooth problem is rewritten with epigraph variables ``y_i`` and
constraints ``y_i^2 >= ||g_i(x)||^2``, ``y_i >= 0`` carrying multipliers
``mu_i`` and ``lambda_i``. A smoothed stationary point with ``eta = eps`` is
turned into a certificate by ``y_i = max(eta, ||g_i||)``,
``mu_i = 1 / (2 y_i)``, ``lambda_i = 0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .linops import FidelityProblem, fidelity_gradient
from .regularizer import FilterBank, block_norms, check_eta, g_apply, g_jacobian_transpose_apply

__all__ = ["KKTCertificate", "KKTReport", "construct_certificate", "verify_certificate",
           "stationarity_vector"]

# Con_1.5 is an equality; allow only rounding
EQUALITY_TOL = 1e-12


@dataclass(frozen=True)
class KKTCertificate:
    eps: float
    y: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    con1_norm: float = float("nan")
    con2_max: float = float("nan")


@dataclass(frozen=True)
class KKTReport:
    eps: float
    con1_norm: float
    con15_max: float
    con2_max: float
    con3_max: float
    con5_min_slack: float
    con1_ok: bool
    con15_ok: bool
    con2_ok: bool
    con3_ok: bool
    con4_ok: bool
    con5_ok: bool

    @property
    def passed(self) -> bool:
        return all((self.con1_ok, self.con15_ok, self.con2_ok, self.con3_ok,
                    self.con4_ok, self.con5_ok))

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "eps": self.eps,
            "con1_norm": self.con1_norm,
            "con2_max": self.con2_max,
            "con15_max": self.con15_max,
            "con3_ok": self.con3_ok,
            "con4_ok": self.con4_ok,
            "con5_ok": self.con5_ok,
            "pass": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def stationarity_vector(problem: FidelityProblem, fb: FilterBank, x, mu) -> np.ndarray:
    """``grad f(x) + 2 sum_i mu_i grad g_i(x)^T g_i(x)`` using the true transposes."""
    gx = g_apply(fb, x)
    w = 2.0 * np.asarray(mu)[:, None] * gx
    return fidelity_gradient(problem, x) + g_jacobian_transpose_apply(fb, x, w, learned=False)


def construct_certificate(problem: FidelityProblem, fb: FilterBank, x, eta,
                          eps: float | None = None) -> KKTCertificate:
    eta = check_eta(eta)
    eps = eta if eps is None else float(eps)
    nrm = block_norms(g_apply(fb, x))
    outer = nrm > eta
    y = np.where(outer, nrm, eta)
    mu = np.where(outer, 1.0 / (2.0 * np.where(outer, nrm, 1.0)), 1.0 / (2.0 * eta))
    lam = np.zeros_like(y)
    con1 = float(np.linalg.norm(stationarity_vector(problem, fb, x, mu)))
    con2 = float(np.max(np.abs(mu * (nrm ** 2 - y ** 2)), initial=0.0))
    return KKTCertificate(eps, y, mu, lam, con1, con2)


def verify_certificate(problem: FidelityProblem, fb: FilterBank, x,
                       cert: KKTCertificate) -> KKTReport:
    y, mu, lam = (np.asarray(a, dtype=np.float64) for a in (cert.y, cert.mu, cert.lam))
    if not (y.shape == mu.shape == lam.shape == (fb.m,)):
        raise ValueError(f"certificate arrays must have length m = {fb.m}")
    eps = cert.eps
    nrm = block_norms(g_apply(fb, x))

    con1 = float(np.linalg.norm(stationarity_vector(problem, fb, x, mu)))
    con15 = float(np.max(np.abs(1.0 - 2.0 * mu * y - lam), initial=0.0))
    con2 = float(np.max(np.abs(mu * (nrm ** 2 - y ** 2)), initial=0.0))
    con3 = float(np.max(np.abs(lam * y), initial=0.0))
    slack5 = float(np.min(y - nrm, initial=np.inf))
    return KKTReport(
        eps=eps,
        con1_norm=con1,
        con15_max=con15,
        con2_max=con2,
        con3_max=con3,
        con5_min_slack=slack5,
        con1_ok=con1 <= eps,
        con15_ok=con15 <= EQUALITY_TOL,
        con2_ok=con2 <= eps,
        con3_ok=con3 == 0.0,
        con4_ok=bool(np.all(lam >= 0) and np.all(mu >= 0)),
        con5_ok=slack5 >= 0,
    )
