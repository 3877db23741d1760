import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from causalpose import numerics as nm
from causalpose.model import CoordDistributions, InterventionMask, Strategy
from causalpose.objective import (
    DEFAULT_LAMBDA, LAMBDA_GRID, consistency_loss, encode_targets, keypoint_loss, total_loss,
)

seeds = st.integers(0, 2**32 - 1)


def random_dists(rng, B=2, K=4, bins=8, requires_grad=False):
    def one():
        z = rng.normal(size=(B, K, bins))
        p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        return nm.Tensor(p, requires_grad=requires_grad)
    return CoordDistributions(one(), one())


def mask(selected):
    return InterventionMask(np.asarray(selected, dtype=bool), Strategy("threshold"))


# ---------------------------------------------------------------- targets


def test_small_sigma_is_one_hot():
    gt = encode_targets([[[0.40, 0.90]]], [[1]], sigma_bins=1e-3, bins_x=32)
    assert np.array_equal(gt.qx[0, 0], np.eye(32)[12])
    assert np.array_equal(gt.qy[0, 0], np.eye(32)[28])


def test_centre_target_symmetric():
    # bin 15 of 31 is the middle bin
    gt = encode_targets([[[0.5, 0.5]]], [[1]], sigma_bins=2.0, bins_x=31)
    assert np.allclose(gt.qx[0, 0], gt.qx[0, 0][::-1], atol=1e-15)


@given(hnp.arrays(np.float64, (3, 4, 2), elements=st.floats(0, 1)), st.floats(0.05, 10))
def test_target_rows_sum_to_one(coords, sigma):
    gt = encode_targets(coords, np.ones((3, 4)), sigma, 32)
    assert np.allclose(gt.qx.sum(axis=-1), 1, atol=1e-9) and np.allclose(gt.qy.sum(axis=-1), 1, atol=1e-9)
    assert gt.n_clamped == 0


def test_out_of_range_coords_counted():
    gt = encode_targets([[[-0.2, 1.3], [0.5, 0.5]]], [[1, 1]], 1.0, 16)
    assert gt.n_clamped == 2
    assert gt.qx[0, 0].argmax() == 0 and gt.qy[0, 0].argmax() == 15


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        encode_targets([[[0.5, 0.5]]], [[1]], 0.0, 8)


# ---------------------------------------------------------------- keypoint loss


def test_keypoint_loss_zero_when_pred_equals_target():
    gt = encode_targets(np.random.default_rng(0).random((2, 3, 2)), np.ones((2, 3)), 1.0, 16)
    pred = CoordDistributions(nm.Tensor(gt.qx), nm.Tensor(gt.qy))
    assert keypoint_loss(gt, pred).item() == 0.0


def test_keypoint_loss_zero_weights():
    rng = np.random.default_rng(1)
    gt = encode_targets(rng.random((2, 4, 2)), np.zeros((2, 4)), 1.0, 8)
    assert keypoint_loss(gt, random_dists(rng)).item() == 0.0


def test_keypoint_loss_one_hot_vs_uniform():
    gt = encode_targets([[[0.3, 0.6]]], [[1]], 1e-3, 32)
    u = nm.Tensor(np.full((1, 1, 32), 1 / 32))
    assert keypoint_loss(gt, CoordDistributions(u, u)).item() == pytest.approx(2 * math.log(32), abs=1e-12)


@given(seeds)
def test_keypoint_loss_matches_loop(seed):
    rng = np.random.default_rng(seed)
    gt = encode_targets(rng.random((3, 4, 2)), rng.random((3, 4)) < 0.6, 1.0, 8)
    pred = random_dists(rng, B=3)
    total = 0.0
    for b in range(3):
        for k in range(4):
            for q, p in ((gt.qx[b, k], pred.px.data[b, k]), (gt.qy[b, k], pred.py.data[b, k])):
                total += gt.weights[b, k] * sum(qi * math.log(qi / pi) for qi, pi in zip(q, p) if qi > 0)
    assert keypoint_loss(gt, pred).item() == pytest.approx(total / 3, rel=1e-10, abs=1e-12)
    assert keypoint_loss(gt, pred).item() >= 0


# ---------------------------------------------------------------- consistency loss


def test_consistency_zero_when_equal():
    d = random_dists(np.random.default_rng(2))
    assert consistency_loss(d, d, mask(np.zeros((2, 4)))).item() == 0.0


def test_consistency_empty_stable_set():
    rng = np.random.default_rng(3)
    out = consistency_loss(random_dists(rng), random_dists(rng), mask(np.ones((2, 4))))
    assert out.item() == 0.0


def test_consistency_averages_over_stable_set():
    rng = np.random.default_rng(4)
    obs, cf = random_dists(rng), random_dists(rng)
    sel = np.array([[1, 0, 0, 1], [0, 0, 0, 1]], dtype=bool)
    per = (nm.kl_div(obs.px.data, cf.px) + nm.kl_div(obs.py.data, cf.py)).data
    assert consistency_loss(obs, cf, mask(sel)).item() == pytest.approx(per[~sel].sum() / 5, rel=1e-13)


@given(seeds)
def test_consistency_ignores_intervened_keypoints(seed):
    rng = np.random.default_rng(seed)
    obs, cf = random_dists(rng), random_dists(rng)
    sel = rng.random((2, 4)) < 0.5
    base = consistency_loss(obs, cf, mask(sel)).item()
    px = cf.px.data.copy()
    px[sel] = rng.dirichlet(np.ones(8), size=int(sel.sum()))
    moved = consistency_loss(obs, CoordDistributions(nm.Tensor(px), cf.py), mask(sel)).item()
    assert moved == base
    assert base >= 0


def test_consistency_no_gradient_to_observational_side():
    rng = np.random.default_rng(5)
    obs, cf = random_dists(rng, requires_grad=True), random_dists(rng, requires_grad=True)
    nm.backward(consistency_loss(obs, cf, mask([[0, 1, 0, 0], [0, 0, 0, 0]])))
    assert obs.px.grad is None and obs.py.grad is None
    assert cf.px.grad is not None and np.any(cf.px.grad != 0)


# ---------------------------------------------------------------- total


def test_total_loss_lambda_zero():
    assert total_loss(nm.Tensor(1.5), nm.Tensor(9.0), 0.0).item() == 1.5


def test_total_loss_weighting():
    assert total_loss(nm.Tensor(1.0), nm.Tensor(2.0), DEFAULT_LAMBDA).item() == pytest.approx(1.2)
    with pytest.raises(ValueError):
        total_loss(nm.Tensor(1.0), nm.Tensor(2.0), -0.1)


def test_published_lambda_values():
    assert DEFAULT_LAMBDA == 0.1
    assert LAMBDA_GRID == (0.0, 0.01, 0.1, 0.5)
