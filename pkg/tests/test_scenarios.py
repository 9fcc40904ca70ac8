import numpy as np
import pytest

from arcsim import scenarios as S


def test_priming_arithmetic_and_labels():
    sc = S.coolant_priming_valve_trip(1.8, trip_steps=60)
    assert S.priming_steps() == 1080
    u = sc.actuator_sequence()
    plain = S.Scenario("x", sc.horizon, (), (), seed=sc.seed).actuator_sequence()
    ramp = (u - plain)[:, 0]
    np.testing.assert_allclose(np.diff(ramp[S.LEAD_IN - 1 : S.LEAD_IN + 1080]), 1.8 / 1080, atol=1e-12)
    assert ramp[: S.LEAD_IN].max() == 0.0
    t2 = S.LEAD_IN + 1080
    np.testing.assert_allclose((u - plain)[t2:, 1:], np.tile([10.0, 0.1], (60, 1)), atol=1e-12)
    lab = sc.labels()
    assert not lab[: S.LEAD_IN].any() and lab[S.LEAD_IN :].all()


def test_expansion_is_deterministic_and_trips_on_breach():
    sc = S.coolant_priming_valve_trip(2.0, trip_steps=240)
    a, b = S.expand(sc), S.expand(sc)
    np.testing.assert_array_equal(a.sensors, b.sensors)
    assert a.breach_step is not None and a.breach_step > S.LEAD_IN + 1080
    assert len(a.sensors) == a.breach_step + 1


def test_replay_identity_and_errors():
    rec = S.record_normal_segment(60, seed=5)
    live = S.Scenario("recording", 60 + S.LEAD_IN, (), (), seed=5)
    # splicing the live run's own readings changes nothing
    own = S.expand(live).sensors
    sc = S.replay_attack(own[S.LEAD_IN :], 60, seed=5)
    np.testing.assert_array_equal(S.expand(sc).sensors, own)
    with pytest.raises(S.ScenarioError):
        S.replay_attack(rec, 0)
    with pytest.raises(S.ScenarioError):
        S.replay_attack(rec[:10], 20)


def test_replay_overwrites_process_channels_only():
    sc = S.default_replay(seed=1, splice_len=48)
    run = S.expand(sc)
    seg = slice(S.LEAD_IN, S.LEAD_IN + 48)
    np.testing.assert_array_equal(run.sensors[seg, :2], sc.recorded[:, :2])
    assert not np.allclose(run.sensors[seg, 2:], sc.recorded[:, 2:])


def test_bounds_and_file_roundtrip(tmp_path):
    with pytest.raises(S.ScenarioError):
        S.coolant_priming_valve_trip(40.0).actuator_sequence()
    with pytest.raises(S.ScenarioError):
        S.Segment("wiggle", "Tc_cmd", 0, 1)
    for sc in (S.coolant_priming_valve_trip(1.2, trip_steps=30), S.default_replay(splice_len=20)):
        S.save(tmp_path / "s.yaml", sc)
        back = S.load(tmp_path / "s.yaml")
        np.testing.assert_array_equal(S.expand(back).sensors, S.expand(sc).sensors)
    text = (tmp_path / "s.yaml").read_text()
    assert text.startswith("version: 1")
