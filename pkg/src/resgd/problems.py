"""Synthetic compressive-sensing instances, phantoms and reconstruction metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .linops import (
    DenseSensingMatrix,
    FidelityProblem,
    MaskedFourierOperator,
    load_mask,
    load_matrix,
    save_mask,
    save_matrix,
)

__all__ = [
    "ReconstructionInstance",
    "measurement_count",
    "make_phantom",
    "make_gaussian_cs",
    "make_fourier_cs",
    "radial_mask_indices",
    "random_mask_indices",
    "mse",
    "psnr",
    "gradient_support_fraction",
    "save_instance",
    "load_instance",
]

PHANTOM_KINDS = ("shepp-like", "blocks", "smooth-bumps")
MASK_KINDS = ("radial", "uniform-random")


@dataclass
class ReconstructionInstance:
    problem: FidelityProblem
    x_true: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x_true is not None:
            self.x_true = np.asarray(self.x_true, dtype=np.float64)
            if self.x_true.shape != (self.problem.op.n_in,):
                raise ValueError("x_true does not match the operator input size")
        ratio = self.meta.get("ratio")
        if ratio is not None and not 0 < ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.meta["h"]), int(self.meta["w"])


def _check_ratio(ratio: float, n: int) -> None:
    if not 0 < ratio <= 1:
        raise ValueError(f"sampling ratio must lie in (0, 1], got {ratio}")
    if ratio * n < 1 - 1e-12:
        raise ValueError("ratio * n must be at least one measurement")


def measurement_count(ratio: float, n: int) -> int:
    """``ceil(ratio * n)``, ignoring binary round-off just above an integer."""
    return max(1, math.ceil(ratio * n - 1e-9))


# -- phantoms -------------------------------------------------------------------

def gradient_support_fraction(img: np.ndarray) -> float:
    """Fraction of pixels where the forward difference in either axis is nonzero."""
    img = np.asarray(img)
    dy = np.zeros(img.shape, bool)
    dx = np.zeros(img.shape, bool)
    dy[:-1] = img[1:] != img[:-1]
    dx[:, :-1] = img[:, 1:] != img[:, :-1]
    return float(np.mean(dy | dx))


def _blocks(h, w, rng):
    img = np.zeros((h, w))
    target = max(2, (h * w) // 150)
    for _ in range(4 * target):
        if target == 0:
            break
        rh = rng.integers(max(2, h // 6), max(3, h // 2) + 1)
        rw = rng.integers(max(2, w // 6), max(3, w // 2) + 1)
        r0 = rng.integers(0, h - rh + 1)
        c0 = rng.integers(0, w - rw + 1)
        trial = img.copy()
        trial[r0:r0 + rh, c0:c0 + rw] = np.round(rng.uniform(0.2, 1.0), 2)
        if gradient_support_fraction(trial) <= 0.2:
            img = trial
            target -= 1
    return img


def _shepp_like(h, w, rng):
    yy, xx = np.mgrid[-1:1:h * 1j, -1:1:w * 1j]
    img = np.zeros((h, w))
    img[(xx / 0.72) ** 2 + (yy / 0.92) ** 2 <= 1] = 0.8
    img[(xx / 0.66) ** 2 + (yy / 0.86) ** 2 <= 1] = 0.2
    for _ in range(4):
        cx, cy = rng.uniform(-0.4, 0.4, 2)
        ax, ay = rng.uniform(0.08, 0.3, 2)
        th = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
        v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
        img[(u / ax) ** 2 + (v / ay) ** 2 <= 1] = np.round(rng.uniform(0.3, 1.0), 2)
    return img


def _smooth_bumps(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = np.zeros((h, w))
    for _ in range(5):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(0.1, 0.25) * min(h, w)
        img += rng.uniform(0.3, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return img / img.max()


def make_phantom(h: int, w: int, kind: str = "blocks", seed: int = 0) -> np.ndarray:
    """Flat ``h * w`` test image with values in ``[0, 1]``."""
    if h < 8 or w < 8:
        raise ValueError("phantoms need h, w >= 8")
    rng = np.random.default_rng(seed)
    builders = {"blocks": _blocks, "shepp-like": _shepp_like, "smooth-bumps": _smooth_bumps}
    if kind not in builders:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    return np.clip(builders[kind](h, w, rng), 0.0, 1.0).ravel()


# -- sensing operators -----------------------------------------------------------

def make_gaussian_cs(h: int, w: int, ratio: float, seed: int = 0,
                     phantom: str = "blocks", x_true=None) -> ReconstructionInstance:
    """Gaussian rows orthonormalised by QR; ``z = Phi x_true``."""
    n = h * w
    _check_ratio(ratio, n)
    rows = measurement_count(ratio, n)
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((rows, n))
    q, r = np.linalg.qr(gauss.T)
    # fix the QR sign ambiguity so rows keep the orientation of the draw
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    op = DenseSensingMatrix(q.T)
    if x_true is None:
        x_true = make_phantom(h, w, phantom, seed)
    x_true = np.asarray(x_true, dtype=np.float64)
    meta = {"kind": "gaussian", "h": h, "w": w, "ratio": ratio, "seed": seed,
            "phantom": phantom, "peak": 1.0}
    return ReconstructionInstance(FidelityProblem(op, op.apply(x_true)), x_true, meta)


def _centered(idx: np.ndarray, h: int, w: int):
    r, c = np.divmod(idx, w)
    return np.where(r > h // 2, r - h, r), np.where(c > w // 2, c - w, c)


def _conj(idx, h, w):
    r, c = np.divmod(idx, w)
    return ((-r) % h) * w + ((-c) % w)


def _fill(order: np.ndarray, target: int, h: int, w: int) -> np.ndarray:
    """Take frequencies from ``order`` (with their conjugates) until ``target`` are sampled."""
    chosen = {0}
    for i in order:
        if len(chosen) >= target:
            break
        chosen.add(int(i))
        chosen.add(int(_conj(np.int64(i), h, w)))
    return np.array(sorted(chosen), dtype=np.int64)


def radial_mask_indices(h: int, w: int, ratio: float) -> np.ndarray:
    """Equally spaced spokes through the zero frequency.

    The spoke count is the smallest one whose union reaches the target; within
    that union frequencies are taken from the centre outwards.
    """
    n = h * w
    _check_ratio(ratio, n)
    target = measurement_count(ratio, n)
    if target >= n:
        return np.arange(n)
    radius = math.hypot(h, w) / 2
    t = np.arange(-radius, radius + 0.5, 0.5)
    n_spokes = 1
    while True:
        pts = []
        for s in range(n_spokes):
            th = np.pi * s / n_spokes
            rr = np.rint(t * np.sin(th)).astype(np.int64)
            cc = np.rint(t * np.cos(th)).astype(np.int64)
            ok = (rr >= -(h // 2)) & (rr <= (h - 1) // 2) & (cc >= -(w // 2)) & (cc <= (w - 1) // 2)
            pts.append((rr[ok] % h) * w + (cc[ok] % w))
        union = np.unique(np.concatenate(pts))
        closed = np.unique(np.concatenate([union, _conj(union, h, w)]))
        if closed.size >= target or n_spokes >= 4 * max(h, w):
            break
        n_spokes += 1
    cr, cc = _centered(union, h, w)
    order = union[np.lexsort((union, np.hypot(cr, cc)))]
    return _fill(order, target, h, w)


def random_mask_indices(h: int, w: int, ratio: float, seed: int = 0) -> np.ndarray:
    n = h * w
    _check_ratio(ratio, n)
    target = measurement_count(ratio, n)
    rng = np.random.default_rng(seed)
    return _fill(rng.permutation(np.arange(1, n)), target, h, w)


def make_fourier_cs(h: int, w: int, ratio: float, mask_kind: str = "radial", seed: int = 0,
                    phantom: str = "blocks", x_true=None) -> ReconstructionInstance:
    if mask_kind == "radial":
        idx = radial_mask_indices(h, w, ratio)
    elif mask_kind == "uniform-random":
        idx = random_mask_indices(h, w, ratio, seed)
    else:
        raise ValueError(f"unknown mask kind {mask_kind!r}; choose from {MASK_KINDS}")
    op = MaskedFourierOperator((h, w), idx)
    if x_true is None:
        x_true = make_phantom(h, w, phantom, seed)
    x_true = np.asarray(x_true, dtype=np.float64)
    meta = {"kind": "fourier", "mask": mask_kind, "h": h, "w": w, "ratio": ratio,
            "seed": seed, "phantom": phantom, "peak": 1.0}
    return ReconstructionInstance(FidelityProblem(op, op.apply(x_true)), x_true, meta)


# -- metrics ---------------------------------------------------------------------

def mse(x_hat, x_true) -> float:
    x_hat, x_true = np.asarray(x_hat, float), np.asarray(x_true, float)
    if x_hat.shape != x_true.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((x_hat - x_true) ** 2))


def psnr(x_hat, x_true, peak: float = 1.0) -> float:
    """PSNR in dB; an exact reconstruction returns ``math.inf``."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = mse(x_hat, x_true)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


# -- persistence -------------------------------------------------------------------

def save_instance(directory, inst: ReconstructionInstance) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    op = inst.problem.op
    manifest = {"schema": 1, **inst.meta}
    manifest.setdefault("peak", 1.0)
    if isinstance(op, DenseSensingMatrix):
        save_matrix(out / "phi.rgdm", op.matrix)
        manifest["operator"] = "phi.rgdm"
    elif isinstance(op, MaskedFourierOperator):
        save_mask(out / "mask.rgdk", op)
        manifest["operator"] = "mask.rgdk"
    else:
        raise TypeError(f"cannot serialise operator of type {type(op).__name__}")
    save_matrix(out / "z.rgdm", inst.problem.z)
    manifest["z"] = "z.rgdm"
    if inst.x_true is not None:
        save_matrix(out / "x_true.rgdm", inst.x_true)
        manifest["x_true"] = "x_true.rgdm"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_instance(directory) -> ReconstructionInstance:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    op_file = manifest["operator"]
    if op_file.endswith(".rgdk"):
        op = load_mask(d / op_file)
    else:
        op = DenseSensingMatrix(load_matrix(d / op_file))
    z = load_matrix(d / manifest["z"]).ravel()
    x_true = None
    if manifest.get("x_true"):
        x_true = load_matrix(d / manifest["x_true"]).ravel()
    meta = {k: v for k, v in manifest.items() if k not in ("schema", "operator", "z", "x_true")}
    return ReconstructionInstance(FidelityProblem(op, z), x_true, meta)
