"""Inference-only ResGD-Net: K phases of Res-GD with learned inverse operators.

Filter-bank weights are shared by all phases; each phase owns its step sizes
``alpha_k`` and ``gamma_k``. Parameters are stored as a JSON manifest next to
``RGDM`` weight blobs (one per convolution, reshaped to ``c_out x (c_in k k)``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .linops import FidelityProblem, load_matrix, save_matrix
from .regularizer import FilterBank, SmoothActivation, check_eta
from .solver import b_step, select_step, u_step, v_step

__all__ = ["PhaseParams", "NetworkParams", "phase_forward", "network_forward",
           "loss_constraint", "loss_discrepancy", "loss_total", "save_network", "load_network"]

_WEIGHT_FILES = {"A1": "a1", "A2": "a2", "B": "b", "A1_tilde": "a1_t", "A2_tilde": "a2_t",
                 "B_tilde": "b_t"}


@dataclass(frozen=True)
class PhaseParams:
    alpha: float
    gamma: float

    def __post_init__(self):
        for name in ("alpha", "gamma"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite")


@dataclass(frozen=True)
class NetworkParams:
    fb: FilterBank
    eta: float = 0.01
    phases: Sequence[PhaseParams] = field(default_factory=tuple)
    vartheta: float = 1e-3

    def __post_init__(self):
        check_eta(self.eta)
        object.__setattr__(self, "phases", tuple(self.phases))
        if len(self.phases) < 1:
            raise ValueError("a network needs at least one phase")
        if not np.isfinite(self.vartheta):
            raise ValueError("vartheta must be finite")

    @property
    def K(self) -> int:
        return len(self.phases)


def phase_forward(params: NetworkParams, k: int, x_k, problem: FidelityProblem) -> np.ndarray:
    """Phase ``k`` (1-based): Res-GD update with ``A~``, ``B~`` in the gradients."""
    if not 1 <= k <= params.K:
        raise IndexError(f"phase index {k} outside 1..{params.K}")
    ph = params.phases[k - 1]
    fb, eta = params.fb, params.eta
    b = b_step(x_k, ph.alpha, problem)
    u = u_step(b, ph.gamma, fb, eta, learned=True)
    v = v_step(b, ph.alpha, x_k, fb, eta, learned=True)
    return select_step(u, v, problem, fb, eta)[0]


def network_forward(params: NetworkParams, z, problem_template: FidelityProblem) -> np.ndarray:
    problem = problem_template.with_measurement(z)
    x = problem.op.adjoint_apply(problem.z)
    for k in range(1, params.K + 1):
        x = phase_forward(params, k, x, problem)
    return x


def loss_constraint(params: NetworkParams) -> float:
    return params.fb.constraint_penalty()


def loss_discrepancy(params: NetworkParams, batch: Iterable, problem_template: FidelityProblem) -> float:
    errs = [float(np.sum((network_forward(params, z, problem_template) - np.asarray(x_true)) ** 2))
            for z, x_true in batch]
    if not errs:
        raise ValueError("batch must be nonempty")
    return sum(errs) / len(errs)


def loss_total(params: NetworkParams, batch: Iterable, problem_template: FidelityProblem) -> float:
    return loss_discrepancy(params, batch, problem_template) + params.vartheta * loss_constraint(params)


def save_network(directory, params: NetworkParams) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    fb = params.fb
    weights = {}
    for key, attr in _WEIGHT_FILES.items():
        w = getattr(fb, attr)
        fname = f"{key}.rgdm"
        save_matrix(out / fname, w.reshape(w.shape[0], -1))
        weights[key] = fname
    manifest = {
        "schema": 1,
        "K": params.K,
        "eta": params.eta,
        "vartheta": params.vartheta,
        "d": fb.d,
        "kernel_size": fb.kernel_size,
        "delta": fb.act.delta,
        "h": fb.shape[0],
        "w": fb.shape[1],
        "phases": [{"alpha": p.alpha, "gamma": p.gamma} for p in params.phases],
        "weights": weights,
    }
    path = out / "network.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_network(path, shape: tuple[int, int] | None = None) -> NetworkParams:
    path = Path(path)
    man = json.loads(path.read_text())
    d, k = int(man["d"]), int(man["kernel_size"])
    if shape is None:
        shape = (int(man["h"]), int(man["w"]))
    arrays = {}
    for key, attr in _WEIGHT_FILES.items():
        c_in = 1 if attr.startswith("a1") else d
        mat = load_matrix(path.parent / man["weights"][key])
        if mat.shape != (d, c_in * k * k):
            raise ValueError(f"{key}: weight blob has shape {mat.shape}, expected {(d, c_in * k * k)}")
        arrays[attr] = mat.reshape(d, c_in, k, k)
    fb = FilterBank(shape, act=SmoothActivation(float(man.get("delta", 0.1))), **arrays)
    phases = [PhaseParams(float(p["alpha"]), float(p["gamma"])) for p in man["phases"]]
    if len(phases) != int(man["K"]):
        raise ValueError("manifest K does not match the number of phases")
    return NetworkParams(fb, float(man["eta"]), phases, float(man.get("vartheta", 1e-3)))
