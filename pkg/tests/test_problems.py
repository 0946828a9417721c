import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resgd.conv import conv2d
from resgd.problems import (
    gradient_support_fraction,
    load_instance,
    make_fourier_cs,
    make_gaussian_cs,
    make_phantom,
    measurement_count,
    mse,
    psnr,
    radial_mask_indices,
    random_mask_indices,
    save_instance,
)


def test_full_ratio_gaussian_rows_orthonormal():
    inst = make_gaussian_cs(4, 4, 1.0, seed=0, x_true=np.zeros(16))
    M = inst.problem.op.matrix
    assert M.shape == (16, 16)
    np.testing.assert_allclose(M @ M.T, np.eye(16), atol=1e-10)


def test_gaussian_is_deterministic():
    a = make_gaussian_cs(8, 8, 0.4, seed=5)
    b = make_gaussian_cs(8, 8, 0.4, seed=5)
    np.testing.assert_array_equal(a.problem.op.matrix, b.problem.op.matrix)
    np.testing.assert_array_equal(a.problem.z, b.problem.z)
    c = make_gaussian_cs(8, 8, 0.4, seed=6)
    assert not np.array_equal(a.problem.op.matrix, c.problem.op.matrix)


def test_half_ratio_33x33_row_count():
    # ceil(0.5 * 1089) = ceil(544.5)
    assert measurement_count(0.5, 1089) == 545
    assert make_gaussian_cs(33, 33, 0.5, seed=0).problem.op.n_out == 545


def test_measurement_count_ignores_roundoff():
    assert measurement_count(0.1, 100) == 10
    assert measurement_count(0.3, 10) == 3
    assert measurement_count(0.7, 10) == 7
    assert measurement_count(1e-9, 10) == 1


def test_bad_ratio_rejected():
    for r in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            make_gaussian_cs(8, 8, r)
        with pytest.raises(ValueError):
            make_fourier_cs(8, 8, r)
    with pytest.raises(ValueError):
        make_gaussian_cs(2, 2, 0.1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gaussian_is_nonexpansive(seed):
    inst = make_gaussian_cs(8, 8, 0.5, seed=3)
    x = np.random.default_rng(seed).standard_normal(64)
    assert np.linalg.norm(inst.problem.op.apply(x)) <= np.linalg.norm(x) * (1 + 1e-12)


@pytest.mark.parametrize("kind", ["radial", "uniform-random"])
def test_full_fourier_recovers_by_adjoint(kind):
    inst = make_fourier_cs(8, 8, 1.0, mask_kind=kind, seed=1)
    M = inst.problem.op.to_dense()
    np.testing.assert_allclose(M.T @ M, np.eye(64), atol=1e-10)
    np.testing.assert_allclose(inst.problem.op.adjoint_apply(inst.problem.z), inst.x_true, atol=1e-10)


@pytest.mark.parametrize("ratio", [0.1, 0.2, 0.3])
@pytest.mark.parametrize("kind", ["radial", "uniform-random"])
def test_fourier_ratios(ratio, kind):
    h, w = 16, 16
    inst = make_fourier_cs(h, w, ratio, mask_kind=kind, seed=2)
    op = inst.problem.op
    target = measurement_count(ratio, h * w)
    # conjugate closure can add a single partner beyond the target
    assert target <= op.n_out <= target + 1
    assert 0 in op.indices
    M = op.to_dense()
    np.testing.assert_allclose(M @ M.T, np.eye(op.n_out), atol=1e-10)


@pytest.mark.parametrize("shape", [(8, 8), (9, 7), (33, 33)])
def test_masks_contain_dc_and_are_conjugate_closed(shape):
    h, w = shape
    for idx in (radial_mask_indices(h, w, 0.2), random_mask_indices(h, w, 0.2, seed=4)):
        assert 0 in idx
        r, c = np.divmod(idx, w)
        conj = ((-r) % h) * w + ((-c) % w)
        assert set(conj.tolist()) == set(idx.tolist())


def test_radial_mask_lies_on_spokes_through_centre():
    idx = radial_mask_indices(16, 16, 0.1)
    r, c = np.divmod(idx, 16)
    r = np.where(r > 8, r - 16, r)
    c = np.where(c > 8, c - 16, c)
    # low frequencies dominate: the mean radius is well below a uniform draw's
    assert np.mean(np.hypot(r, c)) < 0.6 * np.mean(np.hypot(*np.mgrid[-8:8, -8:8]))


@pytest.mark.parametrize("kind", ["blocks", "shepp-like", "smooth-bumps"])
def test_phantom_range_and_determinism(kind):
    a = make_phantom(16, 20, kind, seed=3)
    assert a.shape == (320,)
    assert a.min() >= 0.0 and a.max() <= 1.0 and a.max() > 0.0
    np.testing.assert_array_equal(a, make_phantom(16, 20, kind, seed=3))


@pytest.mark.parametrize("seed", range(10))
def test_blocks_gradient_support_fraction(seed):
    for shape in [(8, 8), (16, 16), (33, 33)]:
        assert gradient_support_fraction(make_phantom(*shape, "blocks", seed).reshape(shape)) <= 0.2


def test_gradient_support_fraction_counts():
    img = np.zeros((4, 4))
    img[1, 1] = 1.0  # nonzero forward differences at (0, 1), (1, 0) and (1, 1)
    assert gradient_support_fraction(img) == 3 / 16


def test_phantom_rejects_small_or_unknown():
    with pytest.raises(ValueError):
        make_phantom(7, 8)
    with pytest.raises(ValueError):
        make_phantom(8, 8, "circles")


def test_constant_image_annihilated_by_zero_mean_kernel():
    k = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
    k -= k.mean()
    out = conv2d(np.full((1, 10, 10), 0.7), k)
    np.testing.assert_allclose(out[:, 1:-1, 1:-1], 0.0, atol=1e-14)


def test_metric_examples():
    x = np.linspace(0, 1, 10)
    assert mse(x, x) == 0.0
    assert psnr(x, x) == math.inf
    assert psnr(x + 1.0, x, peak=1.0) == pytest.approx(0.0, abs=1e-12)
    y = x + 1e-2  # mse 1e-4
    assert psnr(y, x) == pytest.approx(40.0, abs=1e-9)
    assert psnr(2 * y, 2 * x, peak=2.0) == pytest.approx(40.0, abs=1e-9)


def test_metric_errors():
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(3), peak=0.0)


@pytest.mark.parametrize("builder", [
    lambda: make_gaussian_cs(8, 8, 0.3, seed=1),
    lambda: make_fourier_cs(8, 10, 0.25, mask_kind="radial"),
    lambda: make_fourier_cs(8, 8, 0.25, mask_kind="uniform-random", seed=9),
])
def test_instance_roundtrip(tmp_path, builder):
    inst = builder()
    save_instance(tmp_path, inst)
    back = load_instance(tmp_path)
    np.testing.assert_array_equal(back.problem.z, inst.problem.z)
    np.testing.assert_array_equal(back.x_true, inst.x_true)
    np.testing.assert_array_equal(back.problem.op.to_dense(), inst.problem.op.to_dense())
    assert back.meta["h"] == inst.meta["h"] and back.meta["ratio"] == inst.meta["ratio"]
    assert back.shape == inst.shape
