"""Window datasets drawn from the twin: normal operation and injected faults."""

from __future__ import annotations

import numpy as np

from arcsim import blue
from arcsim import plant as P

NORMAL_SETPOINT_SIGMA = (0.5, 2.0, 0.02)


def normal_windows(
    n_episodes: int,
    seed: int,
    length: int = 240,
    window_len: int = 12,
    params: P.PlantParams | None = None,
    setpoint_sigma=NORMAL_SETPOINT_SIGMA,
) -> blue.WindowSet:
    params = params or P.PlantParams()
    rng = np.random.default_rng(seed)
    sets = [
        blue.slice_windows(P.normal_episode(params, length, rng, setpoint_sigma=setpoint_sigma), window_len)
        for _ in range(n_episodes)
    ]
    return blue.WindowSet.concat(sets)


def fault_windows(
    n_episodes: int,
    seed: int,
    magnitudes,
    kind: str = "sensor_step_bias",
    length: int = 180,
    window_len: int = 12,
    params: P.PlantParams | None = None,
    setpoint_sigma=NORMAL_SETPOINT_SIGMA,
) -> blue.WindowSet:
    """Fault-labelled windows, ``n_episodes`` per channel.

    ``magnitudes`` holds one fault size per sensor channel. The fault starts a
    third of the way in and lasts a third of the episode.
    """
    params = params or P.PlantParams()
    rng = np.random.default_rng(seed)
    start, dur = length // 3, length // 3
    sets = []
    for ch, mag in enumerate(magnitudes):
        for _ in range(n_episodes):
            f = P.FaultSpec(kind, ch, float(mag), start, dur)
            ep = P.normal_episode(params, length, rng, setpoint_sigma=setpoint_sigma, faults=[f])
            w = blue.slice_windows(ep, window_len, origin="Z_fault")
            sets.append(w.take(np.flatnonzero(w.labels == blue.FAULT)))
    return blue.WindowSet.concat(sets)
