"""Linear sensing operators, the least-squares fidelity term and spectral norms.

All operators act on flat real vectors. The masked Fourier operator uses a real
orthonormal parametrisation of the 2-D DFT of a real image, so every solver
quantity stays real-valued.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "LinearMap",
    "DenseSensingMatrix",
    "MaskedFourierOperator",
    "CallableMap",
    "FidelityProblem",
    "apply",
    "adjoint_apply",
    "fidelity_value",
    "fidelity_gradient",
    "estimate_spectral_norm",
    "save_matrix",
    "load_matrix",
    "save_mask",
    "load_mask",
]

_MATRIX_MAGIC = b"RGDM"
_MASK_MAGIC = b"RGDK"


def _as_vector(v, size: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != size:
        raise ValueError(f"{what}: expected a vector of length {size}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what}: non-finite entries")
    return v


class LinearMap:
    """A real linear map R^n_in -> R^n_out with an explicit adjoint."""

    n_in: int
    n_out: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = _as_vector(x, self.n_in, "apply")
        return self._forward(x)

    def adjoint_apply(self, w: np.ndarray) -> np.ndarray:
        w = _as_vector(w, self.n_out, "adjoint_apply")
        return self._adjoint(w)

    def _forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _adjoint(self, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dense(self) -> np.ndarray:
        """Materialise the operator column by column (small operators only)."""
        cols = [self._forward(e) for e in np.eye(self.n_in)]
        return np.stack(cols, axis=1) if cols else np.zeros((self.n_out, 0))


class DenseSensingMatrix(LinearMap):
    def __init__(self, matrix):
        m = np.ascontiguousarray(matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("sensing matrix must be two-dimensional")
        if not np.all(np.isfinite(m)):
            raise ValueError("sensing matrix has non-finite entries")
        m.setflags(write=False)
        self.matrix = m
        self.n_out, self.n_in = m.shape

    @classmethod
    def identity(cls, n: int) -> "DenseSensingMatrix":
        return cls(np.eye(n))

    def _forward(self, x):
        return self.matrix @ x

    def _adjoint(self, w):
        return self.matrix.T @ w

    def to_dense(self):
        return self.matrix.copy()


class MaskedFourierOperator(LinearMap):
    """Sampled orthonormal 2-D DFT of a real ``h x w`` image.

    A sampled frequency ``k`` always brings its conjugate partner ``-k`` along,
    since for real images both carry the same information. The measurement
    vector stacks, for every sampled frequency,

    * ``Re X_k`` when ``k`` is self-conjugate (DC and Nyquist bins),
    * ``sqrt(2) Re X_k`` and ``sqrt(2) Im X_k`` for one representative of each
      conjugate pair,

    where ``X = fft2(x, norm="ortho")``. The measurement length equals the
    number of sampled flat indices, the rows are orthonormal (``Phi Phi^T = I``)
    and the full mask gives an orthogonal matrix.
    """

    def __init__(self, shape: tuple[int, int], indices):
        h, w = (int(s) for s in shape)
        if h < 1 or w < 1:
            raise ValueError("image shape must be positive")
        idx = np.unique(np.asarray(indices, dtype=np.int64).ravel())
        if idx.size and (idx[0] < 0 or idx[-1] >= h * w):
            raise ValueError("mask index out of range")
        partner = _conjugate_index(idx, h, w)
        if not np.all(np.isin(partner, idx)):
            # close the set under conjugation
            idx = np.unique(np.concatenate([idx, partner]))
            partner = _conjugate_index(idx, h, w)
        self.shape = (h, w)
        self.indices = idx
        self._self_conj = idx[partner == idx]
        self._pairs = idx[idx < partner]
        self._pairs_conj = _conjugate_index(self._pairs, h, w)
        self.n_in = h * w
        self.n_out = int(idx.size)

    @classmethod
    def full(cls, shape: tuple[int, int]) -> "MaskedFourierOperator":
        return cls(shape, np.arange(shape[0] * shape[1]))

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_in, dtype=bool)
        m[self.indices] = True
        return m.reshape(self.shape)

    def _forward(self, x):
        freq = np.fft.fft2(x.reshape(self.shape), norm="ortho").ravel()
        p = freq[self._pairs] * np.sqrt(2.0)
        return np.concatenate([freq[self._self_conj].real, p.real, p.imag])

    def _adjoint(self, w):
        ns, npair = self._self_conj.size, self._pairs.size
        freq = np.zeros(self.n_in, dtype=np.complex128)
        freq[self._self_conj] = w[:ns]
        c = (w[ns:ns + npair] + 1j * w[ns + npair:]) / np.sqrt(2.0)
        freq[self._pairs] = c
        freq[self._pairs_conj] = np.conj(c)
        return np.fft.ifft2(freq.reshape(self.shape), norm="ortho").real.ravel()


def _conjugate_index(idx: np.ndarray, h: int, w: int) -> np.ndarray:
    r, c = np.divmod(idx, w)
    return ((-r) % h) * w + ((-c) % w)


class CallableMap(LinearMap):
    """Wrap a pair of forward/adjoint callables as a :class:`LinearMap`."""

    def __init__(self, n_in: int, n_out: int, forward: Callable, adjoint: Callable):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self._fwd, self._adj = forward, adjoint

    def _forward(self, x):
        return np.asarray(self._fwd(x), dtype=np.float64).ravel()

    def _adjoint(self, w):
        return np.asarray(self._adj(w), dtype=np.float64).ravel()


@dataclass(frozen=True)
class FidelityProblem:
    """Least-squares data term ``f(x) = 0.5 * ||op(x) - z||^2``."""

    op: LinearMap
    z: np.ndarray

    def __post_init__(self):
        z = _as_vector(self.z, self.op.n_out, "measurement z")
        z = z.copy()
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    def with_measurement(self, z) -> "FidelityProblem":
        return FidelityProblem(self.op, z)


def apply(op: LinearMap, x) -> np.ndarray:
    return op.apply(x)


def adjoint_apply(op: LinearMap, w) -> np.ndarray:
    return op.adjoint_apply(w)


def fidelity_value(p: FidelityProblem, x) -> float:
    res = p.op.apply(x) - p.z
    val = 0.5 * float(res @ res)
    if not np.isfinite(val):
        raise FloatingPointError("fidelity value overflowed")
    return val


def fidelity_gradient(p: FidelityProblem, x) -> np.ndarray:
    return p.op.adjoint_apply(p.op.apply(x) - p.z)


def estimate_spectral_norm(op: LinearMap, iters: int = 100, seed: int = 0) -> float:
    """Power iteration on ``op^T op`` from a seeded Gaussian start.

    The returned value ``||op v||`` with ``v`` the normalised iterate is a
    lower bound on the spectral norm and is nondecreasing in ``iters``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.n_in)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        u = op._forward(v)
        est = float(np.linalg.norm(u))
        if est == 0.0:
            return 0.0
        v = op._adjoint(u)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
    return max(est, float(np.linalg.norm(op._forward(v))))


# -- binary layouts -----------------------------------------------------------

def save_matrix(path, matrix) -> None:
    """Write a matrix as ``RGDM | u32 rows | u32 cols | f64 row-major`` (little-endian)."""
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError("only vectors and matrices can be stored")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(_MATRIX_MAGIC + struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(m).tobytes())


def load_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _MATRIX_MAGIC:
        raise ValueError(f"{path}: not an RGDM matrix file")
    rows, cols = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 8 * rows * cols:
        raise ValueError(f"{path}: payload size does not match header {rows}x{cols}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_mask(path, op: MaskedFourierOperator) -> None:
    """Write ``RGDK | u32 h | u32 w | u32 count | u32 indices...`` (little-endian)."""
    h, w = op.shape
    idx = op.indices.astype("<u4")
    with open(path, "wb") as fh:
        fh.write(_MASK_MAGIC + struct.pack("<III", h, w, idx.size))
        fh.write(idx.tobytes())


def load_mask(path) -> MaskedFourierOperator:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _MASK_MAGIC:
        raise ValueError(f"{path}: not an RGDK mask file")
    h, w, count = struct.unpack("<III", data[4:16])
    body = data[16:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: payload size does not match header count {count}")
    return MaskedFourierOperator((h, w), np.frombuffer(body, dtype="<u4").astype(np.int64))
