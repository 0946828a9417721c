"""Filter-bank transform g(x) = B sigma(A x), the (2,1)-norm regularizer and its
Nesterov-smoothed surrogate.

Feature fields are arrays of shape ``(m, d)``: one ``d``-channel block per
pixel. Signals are flat vectors of length ``n = h * w``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .conv import conv2d, conv2d_transpose, conv_frobenius_sq
from .linops import CallableMap, estimate_spectral_norm

__all__ = [
    "SmoothActivation",
    "FilterBank",
    "RegularizerBounds",
    "activation_eval",
    "activation_deriv",
    "block_norms",
    "g_apply",
    "g_jacobian_transpose_apply",
    "r_value",
    "dual_maximizer",
    "r_eta_value",
    "r_eta_gradient",
    "huber",
    "estimate_bounds",
    "check_eta",
]


def check_eta(eta) -> float:
    eta = float(eta)
    if not (np.isfinite(eta) and eta > 0):
        raise ValueError(f"smoothing level must be positive and finite, got {eta}")
    return eta


@dataclass(frozen=True)
class SmoothActivation:
    """C^1 ramp: 0 below -delta, identity above delta, quadratic blend between."""

    delta: float = 0.1

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = self.delta
        quad = x * x / (4 * d) + 0.5 * x + d / 4
        return np.where(x <= -d, 0.0, np.where(x >= d, x, quad))

    def deriv(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = self.delta
        return np.where(x <= -d, 0.0, np.where(x >= d, 1.0, x / (2 * d) + 0.5))


def activation_eval(act: SmoothActivation, x):
    return act(x)


def activation_deriv(act: SmoothActivation, x):
    return act.deriv(x)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("filter weights must be finite")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Weights of ``g(x) = B sigma(A x)`` on an ``h x w`` grid.

    ``A`` is the cascade ``conv(a2) o conv(a1)`` (1 -> d -> d channels) and ``B``
    is ``conv(b)`` (d -> d). The learned inverse operators are transposed
    convolutions ``A~ = convT(a1_t) o convT(a2_t)`` and ``B~ = convT(b_t)``;
    with ``a1_t is a1`` etc. they coincide with the true adjoints.
    """

    shape: tuple[int, int]
    a1: np.ndarray
    a2: np.ndarray
    b: np.ndarray
    a1_t: np.ndarray = None
    a2_t: np.ndarray = None
    b_t: np.ndarray = None
    act: SmoothActivation = field(default_factory=SmoothActivation)

    def __post_init__(self):
        h, w = (int(s) for s in self.shape)
        object.__setattr__(self, "shape", (h, w))
        for name in ("a1", "a2", "b"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        for name in ("a1_t", "a2_t", "b_t"):
            val = getattr(self, name)
            base = getattr(self, name[:-2])
            object.__setattr__(self, name, base if val is None else _frozen(val))
        d = self.a1.shape[0]
        k = self.a1.shape[2]
        expect = {"a1": (d, 1, k, k), "a2": (d, d, k, k), "b": (d, d, k, k)}
        for name, shp in expect.items():
            for suffix in ("", "_t"):
                got = getattr(self, name + suffix).shape
                if got != shp:
                    raise ValueError(f"{name + suffix}: expected shape {shp}, got {got}")

    # -- constructors ---------------------------------------------------------

    @classmethod
    def identity(cls, shape, delta: float = 0.1, kernel_size: int = 3, sign: float = 1.0):
        """d = 1 bank whose convolutions are ``sign * I`` (so ``A = B = sign * I``)."""
        k = kernel_size
        ker = np.zeros((1, 1, k, k))
        ker[0, 0, k // 2, k // 2] = 1.0
        return cls(shape, sign * ker, ker, sign * ker, act=SmoothActivation(delta))

    @classmethod
    def random(cls, shape, d: int = 32, kernel_size: int = 3, delta: float = 0.1,
               seed: int = 0, gain: float = 1.0, zero_mean: bool = True):
        """Seeded Xavier-normal kernels; optionally zero-mean per kernel slice.

        Zero-mean slices make ``A`` (and ``B``) annihilate constant images away
        from the border, so flat regions carry no regularization cost.
        """
        rng = np.random.default_rng(seed)
        k = kernel_size

        def draw(c_out, c_in):
            std = gain * np.sqrt(2.0 / ((c_in + c_out) * k * k))
            wts = rng.standard_normal((c_out, c_in, k, k)) * std
            if zero_mean:
                wts -= wts.mean(axis=(2, 3), keepdims=True)
            return wts

        a1, a2, b = draw(d, 1), draw(d, d), draw(d, d)
        return cls(shape, a1, a2, b, act=SmoothActivation(delta))

    def with_learned(self, a1_t, a2_t, b_t) -> "FilterBank":
        return replace(self, a1_t=a1_t, a2_t=a2_t, b_t=b_t)

    def exact_adjoint(self) -> "FilterBank":
        return replace(self, a1_t=self.a1, a2_t=self.a2, b_t=self.b)

    def perturb_learned(self, scale: float, seed: int = 0) -> "FilterBank":
        rng = np.random.default_rng(seed)
        return self.with_learned(*(w + scale * rng.standard_normal(w.shape)
                                   for w in (self.a1_t, self.a2_t, self.b_t)))

    # -- shape helpers --------------------------------------------------------

    @property
    def d(self) -> int:
        return self.a1.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.a1.shape[2]

    @property
    def n(self) -> int:
        return self.shape[0] * self.shape[1]

    m = n

    @property
    def is_exact_adjoint(self) -> bool:
        return all(np.array_equal(getattr(self, s), getattr(self, s + "_t"))
                   for s in ("a1", "a2", "b"))

    def _image(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n:
            raise ValueError(f"signal length {x.shape[-1]} does not match grid {self.shape}")
        return x.reshape(x.shape[:-1] + (1,) + self.shape)

    def to_field(self, maps: np.ndarray) -> np.ndarray:
        """``(..., d, h, w)`` feature maps -> ``(..., m, d)`` block field."""
        lead = maps.shape[:-3]
        return np.moveaxis(maps.reshape(lead + (self.d, self.m)), -2, -1)

    def to_maps(self, fld: np.ndarray) -> np.ndarray:
        fld = np.asarray(fld, dtype=np.float64)
        if fld.shape[-2:] != (self.m, self.d):
            raise ValueError(f"feature field must have shape (m, d) = {(self.m, self.d)}, got {fld.shape}")
        lead = fld.shape[:-2]
        return np.moveaxis(fld, -1, -2).reshape(lead + (self.d,) + self.shape)

    # -- linear pieces --------------------------------------------------------

    def apply_A(self, x) -> np.ndarray:
        return conv2d(conv2d(self._image(x), self.a1), self.a2)

    def apply_At(self, maps, learned: bool = False) -> np.ndarray:
        a1, a2 = (self.a1_t, self.a2_t) if learned else (self.a1, self.a2)
        img = conv2d_transpose(conv2d_transpose(maps, a2), a1)
        return img.reshape(img.shape[:-3] + (self.n,))

    def apply_B(self, maps) -> np.ndarray:
        return conv2d(maps, self.b)

    def apply_Bt(self, maps, learned: bool = False) -> np.ndarray:
        return conv2d_transpose(maps, self.b_t if learned else self.b)

    def A_map(self) -> CallableMap:
        nf = self.m * self.d
        return CallableMap(self.n, nf, lambda x: self.apply_A(x),
                           lambda w: self.apply_At(w.reshape((self.d,) + self.shape)))

    def B_map(self) -> CallableMap:
        nf = self.m * self.d
        fshape = (self.d,) + self.shape
        return CallableMap(nf, nf, lambda x: self.apply_B(x.reshape(fshape)),
                           lambda w: self.apply_Bt(w.reshape(fshape)))

    def constraint_penalty(self) -> float:
        """``||A~ - A^T||_F^2 + ||B~ - B^T||_F^2``.

        The ``B`` term is linear in the weights and has a closed form; the
        ``A`` cascade is probed with unit images, using
        ``||A~ - A^T||_F = ||A~^T - A||_F``.
        """
        pen_b = conv_frobenius_sq(self.b_t - self.b, self.shape)
        if self.a1_t is self.a1 and self.a2_t is self.a2:
            return pen_b
        pen_a = 0.0
        for start in range(0, self.n, 256):
            stop = min(start + 256, self.n)
            basis = np.zeros((stop - start, self.n))
            basis[np.arange(stop - start), np.arange(start, stop)] = 1.0
            img = basis.reshape((stop - start, 1) + self.shape)
            diff = conv2d(conv2d(img, self.a1_t), self.a2_t) - conv2d(conv2d(img, self.a1), self.a2)
            pen_a += float(np.sum(diff ** 2))
        return pen_a + pen_b


def block_norms(fld: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(fld, dtype=np.float64), axis=-1)


def _forward(fb: FilterBank, x):
    pre = fb.apply_A(x)
    return pre, fb.apply_B(fb.act(pre))


def g_apply(fb: FilterBank, x) -> np.ndarray:
    """Feature field ``B sigma(A x)`` of shape ``(m, d)``."""
    return fb.to_field(_forward(fb, x)[1])


def g_jacobian_transpose_apply(fb: FilterBank, x, w, learned: bool = False) -> np.ndarray:
    """``A^T diag(sigma'(Ax)) B^T w`` (or with ``A~``, ``B~`` when ``learned``)."""
    pre = fb.apply_A(x)
    back = fb.apply_Bt(fb.to_maps(w), learned) * fb.act.deriv(pre)
    return fb.apply_At(back, learned)


def r_value(fld) -> float:
    return float(np.sum(block_norms(fld)))


def dual_maximizer(fld, eta) -> np.ndarray:
    """Blockwise maximiser of ``<g, y> - eta/2 ||y||^2`` over ``||y_i|| <= 1``."""
    eta = check_eta(eta)
    fld = np.asarray(fld, dtype=np.float64)
    nrm = block_norms(fld)[..., None]
    scale = np.where(nrm <= eta, 1.0 / eta, 1.0 / np.where(nrm <= eta, 1.0, nrm))
    return fld * scale


def r_eta_value(fld, eta) -> float:
    eta = check_eta(eta)
    nrm = block_norms(fld)
    inner = nrm <= eta
    return float(np.sum(np.where(inner, nrm * nrm / (2 * eta), nrm - eta / 2)))


def huber(t, eta):
    """Scalar Huber function with threshold ``eta`` (the d = 1 case of ``r_eta``)."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    return np.where(t <= eta, t * t / (2 * eta), t - eta / 2)


def r_eta_gradient(fb: FilterBank, x, eta, learned: bool = False) -> np.ndarray:
    pre, feat = _forward(fb, x)
    y = dual_maximizer(fb.to_field(feat), eta)
    back = fb.apply_Bt(fb.to_maps(y), learned) * fb.act.deriv(pre)
    return fb.apply_At(back, learned)


def r_eta_value_and_gradient(fb: FilterBank, x, eta, learned: bool = False):
    pre, feat = _forward(fb, x)
    fld = fb.to_field(feat)
    y = dual_maximizer(fld, eta)
    back = fb.apply_Bt(fb.to_maps(y), learned) * fb.act.deriv(pre)
    return r_eta_value(fld, eta), fb.apply_At(back, learned)


@dataclass(frozen=True)
class RegularizerBounds:
    M: float
    L_g: float
    m: int
    eta: float

    @property
    def L_reta(self) -> float:
        return self.m * self.L_g + self.M ** 2 / self.eta


def estimate_bounds(fb: FilterBank, eta, iters: int = 200, seed: int = 0) -> RegularizerBounds:
    """Conservative constants: ``M = |A||B|``, ``L_g = |A|^2 |B| / (2 delta)``.

    ``sigma'`` is ``1/(2 delta)``-Lipschitz and bounded by one, which gives both
    products. The gradient of ``r_eta`` is then ``(m L_g + M^2/eta)``-Lipschitz.
    """
    eta = check_eta(eta)
    na = estimate_spectral_norm(fb.A_map(), iters=iters, seed=seed)
    nb = estimate_spectral_norm(fb.B_map(), iters=iters, seed=seed)
    return RegularizerBounds(M=na * nb, L_g=na * na * nb / (2 * fb.act.delta), m=fb.m, eta=eta)
