import itertools

import numpy as np
import pytest

from arcsim import blue as B
from arcsim import datasets as DS
from arcsim import nn
from arcsim.iforest import IsolationForest, average_path_length


@pytest.fixture(scope="module")
def small():
    cfg = B.BlueConfig(train_epochs=4, n_trees=30)
    Zn = DS.normal_windows(8, 0, length=160)
    return B.fit_baseline(Zn, cfg=cfg), Zn


# -- isolation forest -------------------------------------------------------


def _brute_path(forest, t, x):
    """Recursive walk of one tree, independent of the vectorised traversal."""

    def walk(node, depth):
        q = forest.feature[t, node]
        if q < 0:
            n = forest.size[t, node]
            c = 0.0 if n <= 1 else (1.0 if n == 2 else 2 * (np.log(n - 1) + 0.5772156649015329) - 2 * (n - 1) / n)
            return depth + c
        child = forest.left[t, node] if x[q] < forest.threshold[t, node] else forest.right[t, node]
        return walk(child, depth + 1)

    return walk(0, 0)


def test_iforest_single_tree_brute_force_and_outlier_order():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 0.1, size=(15, 2)), [[0.05, 0.0]]])
    forest = IsolationForest(n_trees=1, subsample=16, seed=3).fit(X)
    inlier = X.mean(axis=0)
    outlier = inlier + 10 * (X.max(axis=0) - X.min(axis=0))
    for x in (inlier, outlier, X[0]):
        assert forest.path_lengths(x[None])[0, 0] == pytest.approx(_brute_path(forest, 0, x), abs=1e-12)
    many = IsolationForest(n_trees=100, subsample=16, seed=3).fit(X)
    s_in, s_out = many.score(np.vstack([inlier, outlier]))
    assert s_out > s_in


def test_average_path_length_values():
    np.testing.assert_allclose(average_path_length([0, 1, 2]), [0, 0, 1])
    n = 256.0
    assert average_path_length(n) == pytest.approx(2 * (np.log(n - 1) + 0.5772156649015329) - 2 * (n - 1) / n)


def test_iforest_roundtrip_and_determinism():
    X = np.random.default_rng(1).normal(size=(300, 4))
    a = IsolationForest(20, 64, seed=5).fit(X)
    b = IsolationForest.from_arrays(a.to_arrays())
    c = IsolationForest(20, 64, seed=5).fit(X)
    probe = np.random.default_rng(2).normal(size=(50, 4))
    assert a.score(probe).tobytes() == b.score(probe).tobytes() == c.score(probe).tobytes()


# -- scoring -----------------------------------------------------------------


def test_single_member_mask(small):
    ens, Zn = small
    X = Zn.X[:50]
    _, cal, _ = B.score_batch(ens, X)
    for m in range(3):
        mask = [False] * 3
        mask[m] = True
        fused = B.score_batch(ens.with_mask(mask), X)[2]
        np.testing.assert_array_equal(fused, cal[:, m])
    with pytest.raises(B.EnsembleError):
        B.score_batch(ens.with_mask([False] * 3), X)


def test_ablation_never_raises_fused(small):
    ens, Zn = small
    X = Zn.X[::7]
    full = B.score_batch(ens, X)[2]
    for mask in itertools.product([True, False], repeat=3):
        if any(mask):
            assert np.all(B.score_batch(ens.with_mask(mask), X)[2] <= full)


def test_calibration_pit_mean(small):
    ens, Zn = small
    _, cal = B.split_normal(Zn, ens.cfg.cal_fraction)
    idx = np.random.default_rng(0).choice(len(cal), size=1000, replace=len(cal) < 1000)
    c = B.score_batch(ens, cal.X[idx])[1]
    for m in range(3):
        assert 0.4 <= c[:, m].mean() <= 0.6


def test_dimension_mismatch(small):
    ens, Zn = small
    with pytest.raises(B.EnsembleError):
        B.score(ens, Zn.X[0][:, :4])


def test_recalibrate_idempotent_and_monotone(small):
    ens, Zn = small
    _, cal = B.split_normal(Zn, ens.cfg.cal_fraction)
    again = B.recalibrate(ens, cal)
    for a, b in zip(ens.calibrators, again.calibrators):
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
    assert again.threshold == ens.threshold
    grid = np.linspace(ens.calibrators[0][0] - 1, ens.calibrators[0][-1] + 1, 500)
    c = B.calibrate(ens.calibrators[0], grid)
    assert np.all(np.diff(c) >= 0) and c.min() >= 0 and c.max() < 1
    hi = B.calibrate(ens.calibrators[0], ens.calibrators[0][-1] * np.array([1.0, 1.0 + 1e-9, 2.0, 1e6]))
    assert np.all(np.diff(hi) > 0)


def test_fit_baseline_without_faults_and_empty(small):
    ens, _ = small
    assert 0 < ens.threshold < 1
    assert "fault_recall" not in ens.info
    with pytest.raises(B.EnsembleError):
        B.fit_baseline(B.WindowSet.empty(12))


# -- iforest refit -------------------------------------------------------------


def test_refit_iforest(small):
    ens, Zn = small
    probe = Zn.X[::11]
    a = B.refit_iforest(ens, Zn)
    b = B.refit_iforest(ens, Zn)
    assert B.raw_scores(a, probe)[:, 2].tobytes() == B.raw_scores(b, probe)[:, 2].tobytes()
    shifted = B.WindowSet(Zn.X + 3 * ens.norm_std, Zn.labels, Zn.origins)
    c = B.refit_iforest(ens, shifted)
    assert not np.allclose(B.raw_scores(a, probe)[:, 2], B.raw_scores(c, probe)[:, 2])
    with pytest.raises(B.EnsembleError):
        B.refit_iforest(ens, B.WindowSet.empty(12))
    attacks = Zn.take(np.arange(5)).with_origin("Z_new", B.ATTACK)
    with pytest.raises(B.EnsembleError):
        B.refit_iforest(ens, attacks)


# -- hardening loss ------------------------------------------------------------


def _batch(Zn, labels):
    return B.WindowSet(Zn.X[: len(labels)] + 0.0, labels, ["Z_normal"] * len(labels))


def test_hardening_loss_gradient_matches_finite_differences(small):
    ens, Zn = small
    ens = ens.copy()
    ens.raw_median = ens.raw_median * np.array([4.0, 4.0, 1.0])  # keep hinges active
    batch = _batch(Zn, [0, 1, 2, 0])
    batch.X[1] += 2 * ens.norm_std
    loss, grads = B.hardening_loss(ens, batch)
    rng = np.random.default_rng(0)
    for name in ("lstm", "ae"):
        pv = ens.lstm_params if name == "lstm" else ens.ae_params

        def f(flat, pv=pv):
            old = pv.data.copy()
            pv.data[:] = flat
            try:
                return B.hardening_loss(ens, batch)[0]
            finally:
                pv.data[:] = old

        assert nn.directional_check(f, pv.data.copy(), grads[name].data, rng, n_dirs=20) <= 1e-4


def test_hinge_satisfied_gives_zero(small):
    ens, Zn = small
    batch = _batch(Zn, [1, 1])
    batch.X[:] += 50 * ens.norm_std
    loss, grads = B.hardening_loss(ens, batch)
    assert loss == 0.0
    assert not grads["lstm"].data.any() and not grads["ae"].data.any()


def test_normal_only_batch_is_self_supervised(small):
    ens, Zn = small
    batch = _batch(Zn, [0, 0, 0])
    loss, _ = B.hardening_loss(ens, batch)
    raw = B.raw_scores(ens, batch.X)
    assert loss == pytest.approx(np.mean(raw[:, 0] / ens.raw_median[0]) + np.mean(raw[:, 1] / ens.raw_median[1]))


def test_combined_raw_input_gradient(small):
    ens, Zn = small
    X = Zn.X[3:4].copy()
    _, g = B.combined_raw(ens, X)
    rng = np.random.default_rng(1)
    err = nn.directional_check(lambda v: B.combined_raw(ens, v.reshape(X.shape))[0][0], X.ravel(), g.ravel(), rng)
    assert err <= 1e-4


# -- streams and persistence -----------------------------------------------------


def test_alarms_need_consecutive():
    s = np.array([np.nan, 0.9, 0.9, 0.1, 0.9, 0.9, 0.9, 0.9])
    np.testing.assert_array_equal(B.alarms(s, 0.5, 3), [0, 0, 0, 0, 0, 0, 1, 1])


def test_ensemble_roundtrip(small, tmp_path):
    ens, Zn = small
    B.save_ensemble(tmp_path / "e.npz", ens)
    back = B.load_ensemble(tmp_path / "e.npz")
    X = Zn.X[:40]
    assert B.score_batch(ens, X)[2].tobytes() == B.score_batch(back, X)[2].tobytes()
    assert back.threshold == ens.threshold
