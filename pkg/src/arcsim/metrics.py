"""Detection metrics over labelled sensor trajectories.

A window is a positive if any of its steps carries the attack label and is
predicted positive if the consecutive-alarm rule fires on any of its steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from arcsim import blue
from arcsim.plant import SAMPLE_PERIOD_S

MISSED = "missed"


@dataclass
class LabeledRun:
    """Sensor rows with a per-step attack flag."""

    sensors: np.ndarray
    attack: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.sensors = np.asarray(self.sensors, dtype=float)
        self.attack = np.asarray(self.attack, dtype=bool)
        if len(self.sensors) != len(self.attack):
            raise ValueError("sensors and labels differ in length")

    @property
    def attack_start(self) -> int | None:
        idx = np.flatnonzero(self.attack)
        return int(idx[0]) if len(idx) else None


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else float("nan")

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else float("nan")

    @property
    def f1(self) -> float:
        if self.tp + self.fn == 0:
            return float("nan")
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else float("nan")


def confusion(truth: Sequence[bool], pred: Sequence[bool]) -> Confusion:
    t = np.asarray(truth, dtype=bool)
    p = np.asarray(pred, dtype=bool)
    return Confusion(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p)))


def roc_curve(scores: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ROC points from a threshold sweep over all distinct scores, (0,0) to (1,1)."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    P, N = truth.sum(), (~truth).sum()
    if P == 0 or N == 0:
        raise ValueError("ROC needs both classes")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # keep ties together
    tpr = np.r_[0.0, tp[last] / P]
    fpr = np.r_[0.0, fp[last] / N]
    return fpr, tpr


def auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.trapezoid(tpr, fpr))


def window_labels(attack: np.ndarray, window_len: int) -> np.ndarray:
    """Truth per sliding window (window ``i`` ends at step ``i + L - 1``)."""
    return blue.stream_windows(np.asarray(attack, dtype=bool)[:, None], window_len)[:, :, 0].any(axis=1)


@dataclass
class RunResult:
    name: str
    truth: np.ndarray
    pred: np.ndarray
    window_scores: np.ndarray
    latency_s: float | str | None  # None when the run has no attack


@dataclass
class EvalReport:
    f1: float
    precision: float
    recall: float
    confusion: Confusion
    latencies: dict[str, float | str]
    roc_fpr: np.ndarray
    roc_tpr: np.ndarray
    auc: float
    runs: list[RunResult] = field(default_factory=list)


def evaluate_run(ens: blue.DetectorEnsemble, run: LabeledRun) -> RunResult:
    L = ens.cfg.window_len
    scores = blue.stream_scores(ens, run.sensors)
    alarm = blue.alarms(scores, ens.threshold, ens.cfg.consecutive)
    truth = window_labels(run.attack, L)
    pred = window_labels(alarm, L)
    start = run.attack_start
    latency: float | str | None = None
    if start is not None:
        hits = np.flatnonzero(alarm[start:])
        latency = float(hits[0] * SAMPLE_PERIOD_S) if len(hits) else MISSED
    return RunResult(run.name, truth, pred, scores[L - 1 :], latency)


def evaluate(ens: blue.DetectorEnsemble, runs: Sequence[LabeledRun]) -> EvalReport:
    results = [evaluate_run(ens, r) for r in runs]
    truth = np.concatenate([r.truth for r in results])
    pred = np.concatenate([r.pred for r in results])
    sc = np.concatenate([r.window_scores for r in results])
    cm = confusion(truth, pred)
    if truth.all() or not truth.any():
        fpr = tpr = np.array([np.nan])
        area = float("nan")
    else:
        fpr, tpr = roc_curve(sc, truth)
        area = auc(fpr, tpr)
    lat = {r.name or str(i): r.latency_s for i, r in enumerate(results) if r.latency_s is not None}
    return EvalReport(cm.f1, cm.precision, cm.recall, cm, lat, fpr, tpr, area, results)


def window_fpr(ens: blue.DetectorEnsemble, normal: blue.WindowSet) -> float:
    """Fraction of normal windows whose fused score exceeds the threshold."""
    return float(np.mean(blue.score_batch(ens, normal.X)[2] > ens.threshold))


def degradation(f1_row: float, f1_base: float) -> float:
    """Relative change of a row's F1 against the base, as a fraction."""
    if f1_base == 0 or math.isnan(f1_base):
        return float("nan")
    return (f1_row - f1_base) / f1_base


def save_runs(path, runs: Sequence[LabeledRun]) -> None:
    """Store labelled runs in one ``.npz`` (concatenated rows plus per-run lengths)."""
    n_ch = runs[0].sensors.shape[1] if runs else blue.N_CHANNELS
    with open(path, "wb") as fh:
        np.savez(
            fh,
            sensors=np.concatenate([r.sensors for r in runs]) if runs else np.empty((0, n_ch)),
            attack=np.concatenate([r.attack for r in runs]) if runs else np.empty(0, dtype=bool),
            lengths=np.array([len(r.sensors) for r in runs], dtype=np.int64),
            names=np.array([r.name for r in runs], dtype=str),
        )


def load_runs(path) -> list[LabeledRun]:
    with np.load(path) as z:
        bounds = np.r_[0, np.cumsum(z["lengths"])]
        return [
            LabeledRun(z["sensors"][a:b], z["attack"][a:b], str(name))
            for a, b, name in zip(bounds[:-1], bounds[1:], z["names"])
        ]
