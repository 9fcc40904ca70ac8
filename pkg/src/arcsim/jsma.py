"""Greedy saliency-guided L0 perturbation of attack windows.

Saliency is the input gradient of the summed, median-normalised raw scores of
the LSTM and autoencoder. Each iteration moves one not-yet-touched window entry
against its gradient sign by a fixed per-channel step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from arcsim import blue

logger = logging.getLogger(__name__)

# Physical ranges of the five sensor channels (C_A, T, Tc, F, CAf)
DEFAULT_BOUNDS = ((0.0, 2.0), (250.0, 450.0), (280.0, 320.0), (60.0, 140.0), (0.6, 1.4))
REPORT_HEADER = ["window_id", "l0_used", "score_before", "score_after", "evaded"]


@dataclass
class JsmaConfig:
    k_max: int = 3
    step: np.ndarray | None = None  # per channel; defaults to half the normalisation scale
    step_fraction: float = 0.5
    feature_bounds: tuple = DEFAULT_BOUNDS
    target: str = "reduce_score"

    def __post_init__(self):
        if self.k_max < 0:
            raise ValueError("k_max must be non-negative")
        if self.step is not None:
            self.step = np.asarray(self.step, dtype=float)
            if np.any(self.step <= 0):
                raise ValueError("step must be positive")
        if self.target != "reduce_score":
            raise ValueError("only score reduction is supported")

    def steps_for(self, ens: blue.DetectorEnsemble) -> np.ndarray:
        if self.step is not None:
            return self.step
        return self.step_fraction * ens.norm_std


@dataclass
class JsmaReport:
    window_id: int
    l0_used: int
    score_before: float
    score_after: float
    evaded: bool
    raw_trace: list[float] = field(default_factory=list)


def saliency(ens: blue.DetectorEnsemble, w) -> np.ndarray:
    """Gradient of the combined differentiable raw score w.r.t. each window entry."""
    X = w.matrix if isinstance(w, blue.SensorWindow) else np.asarray(w, dtype=float)
    return blue.combined_raw(ens, X)[1][0]


def perturb_fn(
    scorer: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    fused: Callable[[np.ndarray], np.ndarray],
    X: np.ndarray,
    k_max: int,
    step: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    threshold: float,
    chunk: int = 16,
) -> tuple[np.ndarray, list[float], float]:
    """Greedy loop over a generic differentiable scorer.

    ``scorer`` and ``fused`` work on batches of windows. Candidates are visited
    in decreasing ``|saliency|``; the first move that strictly lowers both the
    differentiable score and the fused score is kept. The loop ends after
    ``k_max`` kept moves, when the fused score is at or below ``threshold``, or
    when no candidate improves.
    """
    X = X.copy()
    touched = np.zeros(X.shape, dtype=bool)
    s, g = scorer(X[None])
    s, g = float(s[0]), g[0]
    f = float(fused(X[None])[0])
    trace = [s]
    for _ in range(k_max):
        if f <= threshold:
            break
        order = [
            np.unravel_index(i, X.shape)
            for i in np.argsort(-np.abs(g), axis=None, kind="stable")
            if not touched.flat[i] and g.flat[i] != 0
        ]
        kept = False
        for start in range(0, len(order), chunk):
            idxs = order[start : start + chunk]
            cands = np.repeat(X[None], len(idxs), axis=0)
            for j, idx in enumerate(idxs):
                c = idx[-1]
                cands[(j,) + idx] = np.clip(X[idx] - np.sign(g[idx]) * step[c], lo[c], hi[c])
            s_new, g_new = scorer(cands)
            f_new = fused(cands)
            moved = np.array([cands[(j,) + idx] != X[idx] for j, idx in enumerate(idxs)])
            ok = np.flatnonzero(moved & (s_new < s) & (f_new < f))
            if len(ok):
                j = ok[0]
                X, s, g, f = cands[j], float(s_new[j]), g_new[j], float(f_new[j])
                touched[idxs[j]] = True
                trace.append(s)
                kept = True
                break
        if not kept:
            break
    return X, trace, f


def perturb(
    ens: blue.DetectorEnsemble,
    w: blue.SensorWindow | np.ndarray,
    cfg: JsmaConfig | None = None,
    window_id: int = 0,
) -> tuple[blue.SensorWindow, JsmaReport]:
    cfg = cfg or JsmaConfig()
    X0 = w.matrix if isinstance(w, blue.SensorWindow) else np.asarray(w, dtype=float)
    bounds = np.asarray(cfg.feature_bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]

    def scorer(X):
        return blue.combined_raw(ens, X)

    def fused(X):
        return blue.score_batch(ens, X)[2]

    before = float(fused(X0[None])[0])
    X, trace, after = perturb_fn(scorer, fused, X0, cfg.k_max, cfg.steps_for(ens), lo, hi, ens.threshold)
    l0 = int(np.count_nonzero(X != X0))
    rep = JsmaReport(window_id, l0, before, after, bool(after <= ens.threshold), trace)
    return blue.SensorWindow(X, "attack", "Z_JSMA"), rep


def perturb_set(
    ens: blue.DetectorEnsemble, windows: blue.WindowSet, cfg: JsmaConfig | None = None
) -> tuple[blue.WindowSet, list[JsmaReport]]:
    """Perturb every window; the result carries the ``Z_JSMA`` origin and attack label."""
    if len(windows) == 0:
        return blue.WindowSet.empty(ens.cfg.window_len, ens.n_channels), []
    out, reps = [], []
    for i in range(len(windows)):
        pw, rep = perturb(ens, windows.X[i], cfg, window_id=i)
        out.append(pw.matrix)
        reps.append(rep)
    ws = blue.WindowSet(np.stack(out), np.full(len(out), blue.ATTACK), np.full(len(out), "Z_JSMA"), windows.epochs.copy())
    return ws, reps


def write_report(path: str | Path, reports: list[JsmaReport]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(REPORT_HEADER)
        for r in reports:
            wr.writerow([r.window_id, r.l0_used, f"{r.score_before:.10g}", f"{r.score_after:.10g}", int(r.evaded)])
