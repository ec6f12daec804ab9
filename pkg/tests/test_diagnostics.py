import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from webface import nn_core
from webface.diagnostics import (
    correlation,
    entropy,
    l6_activation_map,
    norm_entropy_study,
    scaling_curve,
    taylor_entropy,
    write_activation_pgm,
)
from webface.data import read_pgm
from webface.hinge import fit_hinge, hinge_objective


def test_entropy_examples():
    assert entropy([0, 1, 0, 0]) == 0.0
    assert entropy(np.full(7, 1 / 7)) == pytest.approx(math.log(7), abs=1e-12)
    assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-12)
    assert round(entropy([0.5, 0.25, 0.25]), 4) == 1.0397


def test_entropy_rowwise():
    h = entropy(np.array([[1.0, 0.0], [0.5, 0.5]]))
    np.testing.assert_allclose(h, [0.0, math.log(2)])


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-30, 30)))
def test_entropy_bounds(z):
    h = entropy(nn_core.softmax(z))
    assert -1e-9 <= h <= math.log(len(z)) + 1e-9


def test_taylor_at_zero_is_log_n():
    for n in (2, 10, 100):
        assert taylor_entropy(np.zeros(n)) == pytest.approx(math.log(n), rel=1e-15)


def test_taylor_requires_centered():
    with pytest.raises(ValueError, match="centered"):
        taylor_entropy(np.array([0.1, 0.2, 0.3]))


def centered(rng, n, scale):
    z = rng.uniform(-1, 1, n)
    z -= z.mean()
    return z * scale / np.abs(z).max()


def test_taylor_small_logits_accurate(rng):
    for _ in range(200):
        z = centered(rng, 10, 0.01)
        assert abs(taylor_entropy(z) - entropy(nn_core.softmax(z))) <= 1e-3


def test_taylor_large_logits_fail(rng):
    z = centered(rng, 10, 5.0)
    assert abs(taylor_entropy(z) - entropy(nn_core.softmax(z))) > 0.1


def test_scaling_curve_properties(rng):
    r = np.abs(rng.standard_normal(8))
    W = rng.standard_normal((8, 6))
    curve = scaling_curve(r / np.linalg.norm(r), W, [1e-4, 0.01, 0.05, 0.1, 1.0])
    assert curve.exact_entropy[0] == pytest.approx(math.log(6), abs=1e-6)
    assert np.all(np.diff(curve.exact_entropy[:4]) <= 1e-12)
    err = np.abs(curve.exact_entropy - curve.approx_entropy)
    assert err[1] < err[-1]
    assert len(curve.scales) == len(curve.exact_entropy) == len(curve.approx_entropy)


@pytest.mark.parametrize("bad", [[0.1, 0.1], [0.2, 0.1], [0.0, 1.0]])
def test_scaling_curve_rejects_scales(bad):
    with pytest.raises(ValueError):
        scaling_curve(np.ones(2), np.ones((2, 2)), bad)


def test_correlation_examples():
    xs = np.array([0.3, 1.0, 2.5, 4.0])
    assert correlation(xs, 2 * xs + 1) == pytest.approx(1.0)
    assert correlation(xs, -xs) == pytest.approx(-1.0)
    assert correlation([1, 2, 3], [1, 3, 2], "spearman") == pytest.approx(0.5)


def test_correlation_errors():
    with pytest.raises(ValueError):
        correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        correlation([1, 2], [1, 2])
    with pytest.raises(ValueError):
        correlation([1, 2, 3], [1, 2, 3], "kendall")


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 8, elements=st.floats(-100, 100)),
    arrays(np.float64, 8, elements=st.floats(-100, 100)),
    st.floats(0.1, 10),
    st.floats(-5, 5),
)
def test_pearson_symmetric_and_affine_invariant(xs, ys, a, c):
    if np.ptp(xs) < 1e-3 or np.ptp(ys) < 1e-3:
        return
    r = correlation(xs, ys)
    assert r == pytest.approx(correlation(ys, xs), abs=1e-12)
    assert r == pytest.approx(correlation(a * xs + c, ys), abs=1e-9)


def test_spearman_ties_use_average_ranks():
    assert correlation([1, 2, 2, 3], [1, 2, 3, 4], "spearman") == pytest.approx(0.9486832980505138)


def test_norm_entropy_study_records(trained_small, tmp_path):
    ds, net, _, _ = trained_small
    x = np.concatenate([ds.images[:4], ds.images[:4]])
    study = norm_entropy_study(net, x, [f"i{k}" for k in range(8)], retrieval_ranks=[1, 2, 1, 3] * 2)
    for a, b in zip(study.records[:4], study.records[4:]):
        assert (a.raw_norm, a.entropy, a.mean_intensity) == (b.raw_norm, b.entropy, b.mean_intensity)
    n = net.config.num_classes
    assert all(0 <= r.entropy <= math.log(n) + 1e-9 and r.raw_norm >= 0 for r in study.records)
    assert {"pearson_norm_entropy", "mean_norm_rank1", "mean_norm_rank_gt1"} <= set(study.summary)
    study.write(tmp_path)
    lines = (tmp_path / "norm_entropy.csv").read_text().splitlines()
    assert lines[0] == "image_id,raw_norm,entropy,mean_intensity,rank" and len(lines) == 9


def test_activation_map_dump(trained_small, tmp_path):
    ds, net, _, _ = trained_small
    amap = l6_activation_map(net, ds.images[0])
    assert amap.shape == (6, 6) and amap.min() >= 0
    write_activation_pgm(tmp_path / "l6.pgm", amap)
    assert read_pgm(tmp_path / "l6.pgm").shape == (6, 6)


# ---------------------------------------------------------------- hinge solver


def test_hinge_never_worse_than_start(rng):
    X = rng.standard_normal((40, 5))
    y = np.where(rng.random(40) > 0.5, 1.0, -1.0)
    w, b, start, final = fit_hinge(X, y, lam=0.05)
    assert final <= start == pytest.approx(1.0)
    assert final == pytest.approx(hinge_objective(X, y, w, b, 0.05))


def test_hinge_separable():
    X = np.array([[2.0, 0.0], [1.5, 0.3], [-2.0, 0.1], [-1.0, -0.4]])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    w, b, _, _ = fit_hinge(X, y, lam=0.01, epochs=500)
    assert np.all(y * (X @ w + b) > 0)


def test_hinge_labels_checked():
    with pytest.raises(ValueError):
        fit_hinge(np.ones((2, 2)), np.array([0.0, 1.0]), lam=0.1)
