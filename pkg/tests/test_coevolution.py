import numpy as np
import pytest

from arcsim import blue as B
from arcsim import coevolution as C
from arcsim import datasets as DS
from arcsim import metrics as M
from arcsim import red as R


@pytest.fixture(scope="module")
def setup():
    Zn = DS.normal_windows(6, 0, length=160)
    train, cal = B.split_normal(Zn, 0.3)
    D0 = B.fit_baseline(train, cfg=B.BlueConfig(train_epochs=3, n_trees=20), Z_cal=cal)
    return D0, train, cal


def _buffer(L=12, n=40, epochs=(1, 2)):
    rng = np.random.default_rng(0)
    buf = C.AttackBuffer(L)
    for e in epochs:
        W = B.WindowSet(rng.normal(size=(n, L, 5)), np.full(n, B.ATTACK), np.full(n, "Z_new"), np.zeros(n, int))
        buf.add(W, [], e)
    return buf


def test_batch_counts_fallbacks():
    r = (0.5, 0.2, 0.1, 0.2)
    assert C.batch_counts(r, 10, True) == (5, 2, 1, 2)
    assert C.batch_counts(r, 10, False) == (7, 2, 1, 0)
    assert C.batch_counts(r, 10, False, have_jsma=False) == (8, 2, 0, 0)
    assert sum(C.batch_counts(r, 64, True)) == 64


def test_replay_mix_matches_ratios():
    buf = _buffer()
    rng = np.random.default_rng(1)
    Zn = DS.normal_windows(2, 1, length=60)
    Zj = B.WindowSet(np.zeros((5, 12, 5)), np.full(5, B.ATTACK), np.full(5, "Z_JSMA"), np.zeros(5, int))
    counts = {}
    for _ in range(1000):
        b = C.sample_batch(buf, Zn, Zj, (0.5, 0.2, 0.1, 0.2), 64, rng)
        for o in b.origins:
            counts[o] = counts.get(o, 0) + 1
        assert np.all(b.labels[b.origins == "Z_normal"] == B.NORMAL)
        assert np.all(b.labels[b.origins != "Z_normal"] == B.ATTACK)
    tot = sum(counts.values())
    for o, want in (("Z_normal", 0.5), ("Z_new", 0.2), ("Z_JSMA", 0.1), ("Z_replay", 0.2)):
        assert abs(counts[o] / tot - want) <= 0.02


def test_buffer_new_and_history():
    buf = _buffer(epochs=(1, 2, 3))
    assert set(buf.new().epochs) == {3}
    assert set(buf.history().epochs) == {1, 2}
    with pytest.raises(ValueError):
        buf.add(buf.new(), [], 2)


def test_first_epoch_has_no_replay():
    buf = _buffer(epochs=(1,))
    Zn = DS.normal_windows(2, 1, length=60)
    b = C.sample_batch(buf, Zn, B.WindowSet.empty(12), (0.5, 0.2, 0.1, 0.2), 64, np.random.default_rng(0))
    assert "Z_replay" not in set(b.origins) and len(b) == 64


def test_episode_labels():
    z = np.zeros(4)
    offsets = np.array([[0, 0, 0], [0.1, 0, 0], [0, 0, 0], [0, 0, 0]], float)
    ep = R.Episode(np.zeros((4, 2)), np.zeros((4, 3)), np.zeros((7, 5)), 3, z, z, z, offsets)
    # once the attacker has moved a setpoint the rest of the episode counts as attack
    np.testing.assert_array_equal(C.episode_labels(ep), [0, 0, 0, 0, 1, 1, 1])


def test_config_validation():
    with pytest.raises(ValueError):
        C.CoevolutionConfig(ratios=(0.5, 0.5, 0.5, 0.0))
    with pytest.raises(ValueError):
        C.CoevolutionConfig(n_epochs=-1)


def _tiny_cfg(**kw):
    return C.CoevolutionConfig(
        n_epochs=1, attacker_cycles=2, defender_steps=3, num_samples=20, jsma_windows=4, disruption_floor=0.0,
        env=R.EnvConfig(n_envs=2, horizon=40), ppo=R.PPOConfig(rollout_steps=16, minibatch=16, epochs=1), **kw
    )


def test_tiny_run_is_deterministic_and_archived(setup, tmp_path):
    D0, train, cal = setup
    normal = [M.LabeledRun(np.tile(D0.norm_mean, (40, 1)), np.zeros(40, bool), "n")]
    a = C.run_arc(_tiny_cfg(), D0, train, cal, normal, out_dir=tmp_path)
    b = C.run_arc(_tiny_cfg(), D0, train, cal, normal)
    assert a.report_csv() == b.report_csv()
    assert a.report_csv().splitlines()[0] == ",".join(C.REPORT_HEADER)
    for f in ("defender.npz", "attacker.npz", "z_new.npz", "attack_runs.npz"):
        assert (tmp_path / "epoch1" / f).exists()
    assert len(a.defenders) == 2 and a.defenders[0] is D0
    assert len(M.load_runs(tmp_path / "epoch1" / "attack_runs.npz")) == len(a.buffer.runs(1))


def test_generation_failure_is_reported_with_epoch(setup):
    D0, train, cal = setup
    cfg = _tiny_cfg()
    cfg.disruption_floor = 1e9
    cfg.max_retries = 1
    with pytest.raises(C.PhaseError) as ei:
        C.run_arc(cfg, D0, train, cal, [])
    assert ei.value.epoch == 1
