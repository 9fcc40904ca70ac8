"""Scripted attack scenarios: coolant priming with a feed-side trip, and sensor replay."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from arcsim import blue, metrics
from arcsim import plant as P

logger = logging.getLogger(__name__)

SCENARIO_VERSION = 1
ACTUATOR_INDEX = {"Tc_cmd": 0, "F_cmd": 1, "CAf_cmd": 2}
PROCESS_CHANNELS = (0, 1)  # C_A, T readings; replay overwrites these
PRIMING_MINUTES = 90.0
LEAD_IN = 24
SAFETY_LOW = (0.3, 290.0)
SAFETY_HIGH = (1.2, 350.0)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    """One override. ``ramp`` rises linearly to ``magnitude`` over ``length`` then holds;
    ``step`` jumps by ``magnitude`` at ``start`` and holds; ``replay`` overwrites the
    process readings with the scenario's recorded segment for ``length`` steps."""

    kind: str
    channel: str
    start: int
    length: int
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ramp", "step", "replay"):
            raise ScenarioError(f"unknown segment kind {self.kind!r}")
        if self.kind != "replay" and self.channel not in ACTUATOR_INDEX:
            raise ScenarioError(f"unknown actuator {self.channel!r}")
        if self.start < 0 or self.length < 0:
            raise ScenarioError("segment start and length must be non-negative")


@dataclass
class Scenario:
    name: str
    horizon: int
    segments: tuple[Segment, ...]
    label_spans: tuple[tuple[int, int], ...]
    base_actuators: tuple[float, float, float] = (300.0, 100.0, 1.0)
    recorded: np.ndarray | None = None
    seed: int = 0
    setpoint_sigma: tuple[float, float, float] = (0.5, 2.0, 0.02)
    version: int = SCENARIO_VERSION

    def __post_init__(self):
        self.segments = tuple(self.segments)
        self.label_spans = tuple((int(a), int(b)) for a, b in self.label_spans)
        for a, b in self.label_spans:
            if not 0 <= a <= b <= self.horizon:
                raise ScenarioError(f"label span ({a}, {b}) outside horizon {self.horizon}")
        for s in self.segments:
            if s.start + s.length > self.horizon:
                raise ScenarioError(f"segment {s} runs past the horizon")
            if s.kind == "replay" and (self.recorded is None or len(self.recorded) < s.length):
                raise ScenarioError("recorded segment shorter than the splice window")

    def actuator_sequence(self, limits: P.ActuatorLimits | None = None) -> np.ndarray:
        limits = limits or P.ActuatorLimits()
        # operator wander underneath the overrides, as in normal operation
        p = P.PlantParams()
        wander = P.ou_setpoints(p, self.horizon, np.random.default_rng([self.seed, 1]), sigma=self.setpoint_sigma)
        u = np.asarray(self.base_actuators, dtype=float) + wander - p.nominal_actuators().as_array()
        t = np.arange(self.horizon)
        for s in self.segments:
            if s.kind == "replay":
                continue
            j = ACTUATOR_INDEX[s.channel]
            if s.kind == "ramp":
                frac = np.clip((t - s.start + 1) / max(s.length, 1), 0.0, 1.0)
                u[:, j] += s.magnitude * frac
            else:
                u[t >= s.start, j] += s.magnitude
        if np.any(u < limits.low - 1e-12) or np.any(u > limits.high + 1e-12):
            raise ScenarioError("scenario drives an actuator outside its physical bounds")
        return u

    def labels(self) -> np.ndarray:
        out = np.zeros(self.horizon, dtype=bool)
        for a, b in self.label_spans:
            out[a:b] = True
        return out


@dataclass
class ScenarioRun:
    scenario: Scenario
    states: np.ndarray
    actuators: np.ndarray
    sensors: np.ndarray
    attack: np.ndarray
    breach_step: int | None

    def labeled(self) -> metrics.LabeledRun:
        return metrics.LabeledRun(self.sensors, self.attack, self.scenario.name)


def _breached(x: np.ndarray) -> bool:
    return bool(np.any(x < SAFETY_LOW) or np.any(x > SAFETY_HIGH))


def expand(sc: Scenario, params: P.PlantParams | None = None, noise=P.DEFAULT_NOISE) -> ScenarioRun:
    """Simulate the scenario; the run trips (ends) at the first safety-limit breach."""
    params = params or P.PlantParams()
    rng = np.random.default_rng([sc.seed, 0])
    u = sc.actuator_sequence()
    x = P.find_equilibrium(params, u[0])
    states, sensors = [], []
    breach = None
    for k in range(sc.horizon):
        states.append(x)
        sensors.append(P.observe_array(x, u[k], noise, rng))
        if _breached(x):
            breach = k
            break
        x = P.advance(x, u[k], params)
    n = len(states)
    sensors = np.array(sensors)
    for s in sc.segments:
        if s.kind == "replay":
            a, b = s.start, min(s.start + s.length, n)
            if b > a:
                sensors[a:b, list(PROCESS_CHANNELS)] = sc.recorded[: b - a, list(PROCESS_CHANNELS)]
    return ScenarioRun(sc, np.array(states), u[:n].copy(), sensors, sc.labels()[:n], breach)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def priming_steps(period_s: float = P.SAMPLE_PERIOD_S) -> int:
    return int(round(PRIMING_MINUTES * 60.0 / period_s))


def coolant_priming_valve_trip(
    ramp_total: float,
    feed_step: float = 10.0,
    conc_step: float = 0.1,
    trip_steps: int = 240,
    seed: int = 0,
    include_trip: bool = True,
) -> Scenario:
    """Slow coolant-temperature ramp over 90 minutes, then simultaneous feed-side steps.

    The per-step ramp increment is ``ramp_total / priming_steps()``. With
    ``include_trip=False`` only the priming phase is generated.
    """
    n1 = priming_steps()
    segs = [Segment("ramp", "Tc_cmd", LEAD_IN, n1, ramp_total)]
    horizon = LEAD_IN + n1
    if include_trip:
        t2 = LEAD_IN + n1
        segs += [Segment("step", "F_cmd", t2, trip_steps, feed_step), Segment("step", "CAf_cmd", t2, trip_steps, conc_step)]
        horizon += trip_steps
    name = "coolant_priming_valve_trip" if include_trip else "coolant_priming"
    return Scenario(name, horizon, tuple(segs), ((LEAD_IN, horizon),), seed=seed)


def record_normal_segment(length: int, seed: int, params: P.PlantParams | None = None, base=(300.0, 100.0, 1.0)) -> np.ndarray:
    """Sensor readings of normal operation around ``base``, to be replayed later."""
    params = params or P.PlantParams()
    sc = Scenario("recording", length, (), (), base_actuators=tuple(base), seed=seed)
    return expand(sc, params).sensors


def replay_attack(
    recorded: np.ndarray,
    splice_len: int,
    drive: Sequence[Segment] = (),
    start: int = LEAD_IN,
    tail: int = 0,
    seed: int = 0,
) -> Scenario:
    """Overwrite the process readings with ``recorded`` while ``drive`` moves the actuators."""
    if splice_len <= 0:
        raise ScenarioError("zero-length splice")
    recorded = np.asarray(recorded, dtype=float)
    if len(recorded) < splice_len:
        raise ScenarioError(f"recorded segment ({len(recorded)}) shorter than splice ({splice_len})")
    segs = (Segment("replay", "sensors", start, splice_len),) + tuple(drive)
    horizon = start + splice_len + tail
    return Scenario("replay_attack", horizon, segs, ((start, horizon),), recorded=recorded[:splice_len].copy(), seed=seed)


def default_replay(seed: int = 0, splice_len: int = 240) -> Scenario:
    """Replay of recorded nominal readings while the coolant and feed commands drift upward."""
    rec = record_normal_segment(splice_len, seed + 1000)
    drive = (
        Segment("ramp", "Tc_cmd", LEAD_IN, splice_len, 4.0),
        Segment("ramp", "F_cmd", LEAD_IN, splice_len, 10.0),
    )
    return replay_attack(rec, splice_len, drive, seed=seed)


# ---------------------------------------------------------------------------
# Stealth tuning
# ---------------------------------------------------------------------------


def raises_alarm(ens: blue.DetectorEnsemble, run: ScenarioRun, consecutive: int = 3) -> bool:
    s = blue.stream_scores(ens, run.sensors)
    return bool(blue.alarms(s, ens.threshold, consecutive).any())


def tune_ramp(
    D_0: blue.DetectorEnsemble,
    seed: int = 0,
    hi: float = 6.0,
    iters: int = 12,
    params: P.PlantParams | None = None,
) -> float:
    """Largest coolant ramp (bisection on ``[0, hi]``) whose priming phase raises no D_0 alarm
    and stays inside the safety limits."""

    def ok(total: float) -> bool:
        run = expand(coolant_priming_valve_trip(total, seed=seed, include_trip=False), params)
        return run.breach_step is None and not raises_alarm(D_0, run)

    if not ok(0.0):
        raise ScenarioError("D_0 alarms on the un-ramped priming run")
    if ok(hi):
        return hi
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    logger.info("tuned coolant ramp: %.4f K over %d steps", lo, priming_steps())
    return lo


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def to_dict(sc: Scenario) -> dict:
    d = {
        "version": sc.version,
        "name": sc.name,
        "horizon": sc.horizon,
        "seed": sc.seed,
        "base_actuators": [float(v) for v in sc.base_actuators],
        "setpoint_sigma": [float(v) for v in sc.setpoint_sigma],
        "segments": [
            {"kind": s.kind, "channel": s.channel, "start": s.start, "length": s.length, "magnitude": float(s.magnitude)}
            for s in sc.segments
        ],
        "label_spans": [list(s) for s in sc.label_spans],
    }
    if sc.recorded is not None:
        d["recorded"] = [[float(v) for v in row] for row in sc.recorded]
    return d


def from_dict(d: dict) -> Scenario:
    if d.get("version") != SCENARIO_VERSION:
        raise ScenarioError(f"unsupported scenario version {d.get('version')!r}")
    rec = d.get("recorded")
    return Scenario(
        name=d["name"],
        horizon=int(d["horizon"]),
        segments=tuple(Segment(**s) for s in d["segments"]),
        label_spans=tuple(tuple(s) for s in d["label_spans"]),
        base_actuators=tuple(d.get("base_actuators", (300.0, 100.0, 1.0))),
        recorded=None if rec is None else np.asarray(rec, dtype=float),
        seed=int(d.get("seed", 0)),
        setpoint_sigma=tuple(d.get("setpoint_sigma", (0.5, 2.0, 0.02))),
    )


def save(path: str | Path, sc: Scenario) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(sc), sort_keys=False))


def load(path: str | Path) -> Scenario:
    return from_dict(yaml.safe_load(Path(path).read_text()))
