import numpy as np
import pytest

from conftest import gradcheck
from voxelrec.stn import IDENTITY_THETA, Localisation, SpatialTransformer, affine_grid, bilinear_sample
from voxelrec.tensor import Tensor, backward, reduce_sum, square


def theta(*rows):
    return Tensor(np.array([sum(rows, [])], dtype=np.float64))


def test_identity_grid_3x3():
    g = affine_grid(theta([1, 0, 0], [0, 1, 0]), 3, 3).data[0]
    assert g[0, :, 0].tolist() == [-1.0, 0.0, 1.0]
    assert g[:, 0, 1].tolist() == [-1.0, 0.0, 1.0]


def test_translation_and_scale_examples():
    base = affine_grid(theta([1, 0, 0], [0, 1, 0]), 4, 5).data
    shifted = affine_grid(theta([1, 0, 0.5], [0, 1, 0]), 4, 5).data
    assert np.array_equal(shifted[..., 0], base[..., 0] + 0.5)
    assert np.array_equal(shifted[..., 1], base[..., 1])
    zoom = affine_grid(theta([0.5, 0, 0], [0, 0.5, 0]), 5, 5).data
    assert zoom[..., 0].min() == -0.5 and zoom[..., 0].max() == 0.5
    assert np.array_equal(zoom, 0.5 * affine_grid(theta([1, 0, 0], [0, 1, 0]), 5, 5).data)


def test_grid_is_linear_in_theta(rng):
    t1, t2 = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    g = lambda t: affine_grid(Tensor(t), 3, 4).data
    assert np.allclose(g(2.0 * t1 - 3.0 * t2), 2.0 * g(t1) - 3.0 * g(t2), atol=1e-12)


def test_identity_sampling_reproduces_input(rng):
    x = rng.normal(size=(2, 3, 7, 5)).astype(np.float32)
    grid = affine_grid(Tensor(np.tile(IDENTITY_THETA, (2, 1)).astype(np.float32)), 7, 5)
    assert np.abs(bilinear_sample(Tensor(x), grid).data - x).max() <= 1e-6


def test_midpoint_and_zero_padding():
    x = Tensor(np.array([[[[0.0, 2.0]]]]))
    mid = Tensor(np.array([[[[0.0, 0.0]]]]))
    assert bilinear_sample(x, mid).data.item() == pytest.approx(1.0)
    outside = Tensor(np.array([[[[5.0, 0.0]]]]))
    assert bilinear_sample(x, outside).data.item() == 0.0


def test_translation_composes(rng):
    # a two-pixel step keeps samples on the lattice, so interpolation is exact
    w = 9
    t = 2 * 2.0 / (w - 1)
    x = Tensor(rng.normal(size=(1, 1, 5, w)))
    step = lambda v, s: bilinear_sample(v, affine_grid(theta([1, 0, s], [0, 1, 0]), 5, w))
    twice = step(step(x, t), t).data
    once = step(x, 2 * t).data
    assert np.allclose(twice[..., : w - 4], once[..., : w - 4], atol=1e-5)


def test_sampler_gradcheck_through_theta(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    th = np.tile(IDENTITY_THETA, (2, 1)) + 0.1 * rng.normal(size=(2, 6))
    op = lambda a, t: bilinear_sample(a, affine_grid(t, 4, 4))
    assert gradcheck(op, [x, th], rng) < 1e-5


def test_localisation_initial_theta_is_identity(rng):
    for plan, size in ((Localisation.STN1, 32), (Localisation.STN2, 16)):
        net = Localisation(4, plan, rng)
        out = net(Tensor(rng.normal(size=(3, 4, size, size)).astype(np.float32))).data
        assert out.shape == (3, 6)
        assert np.allclose(out, IDENTITY_THETA)


def test_stn_halves_size_and_passes_gradient_to_localisation(rng):
    stn = SpatialTransformer(2, 16, Localisation.STN2, rng)
    # make the head depend on the input so the conv weights see gradient
    stn.loc.head_weight.data[:] = 0.01 * rng.normal(size=stn.loc.head_weight.shape)
    out = stn(Tensor(rng.normal(size=(2, 2, 16, 16)).astype(np.float32)))
    assert out.shape == (2, 2, 8, 8)
    backward(reduce_sum(square(out)))
    assert np.abs(stn.loc.convs[0].weight.grad).sum() > 0


def test_stn_rejects_wrong_size(rng):
    stn = SpatialTransformer(2, 16, Localisation.STN2, rng)
    with pytest.raises(ValueError):
        stn(Tensor(np.zeros((2, 2, 32, 32), np.float32)))
