"""The defender: LSTM predictor, autoencoder and isolation forest under max-fusion.

Each member produces a raw anomaly score per window. Raw scores are mapped
through an empirical CDF built on held-out normal windows, so every member
reports a calibrated score in [0, 1] and the fused score is their maximum.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from arcsim import nn
from arcsim.iforest import IsolationForest
from arcsim.plant import N_CHANNELS, Trajectory

logger = logging.getLogger(__name__)

MEMBERS = ("lstm", "ae", "iforest")
ORIGINS = ("Z_normal", "Z_fault", "Z_new", "Z_JSMA", "Z_replay")
NORMAL, ATTACK, FAULT = 0, 1, 2
LABEL_CODES = {"normal": NORMAL, "attack": ATTACK, "fault": FAULT}


class EnsembleError(ValueError):
    pass


@dataclass
class SensorWindow:
    matrix: np.ndarray
    label: str = "normal"
    origin: str = "Z_normal"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("sensor window contains non-finite entries")
        if self.label not in LABEL_CODES:
            raise ValueError(f"unknown label {self.label!r}")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")


@dataclass
class WindowSet:
    """A batch of windows: ``X`` is ``(N, L, C)``; labels use the integer codes."""

    X: np.ndarray
    labels: np.ndarray
    origins: np.ndarray
    epochs: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        n = len(self.X)
        self.labels = np.asarray(self.labels, dtype=int).reshape(n)
        self.origins = np.asarray(self.origins, dtype="<U8").reshape(n)
        if self.epochs is None:
            self.epochs = np.zeros(n, dtype=int)
        self.epochs = np.asarray(self.epochs, dtype=int).reshape(n)

    def __len__(self) -> int:
        return len(self.X)

    @classmethod
    def empty(cls, window_len: int, n_channels: int = N_CHANNELS) -> WindowSet:
        return cls(np.zeros((0, window_len, n_channels)), [], [])

    @classmethod
    def from_windows(cls, windows: Sequence[SensorWindow]) -> WindowSet:
        return cls(
            np.stack([w.matrix for w in windows]),
            [LABEL_CODES[w.label] for w in windows],
            [w.origin for w in windows],
        )

    def take(self, idx) -> WindowSet:
        idx = np.asarray(idx, dtype=int)
        return WindowSet(self.X[idx], self.labels[idx], self.origins[idx], self.epochs[idx])

    def with_origin(self, origin: str, label: int | None = None) -> WindowSet:
        labels = self.labels if label is None else np.full(len(self), label)
        return WindowSet(self.X.copy(), labels, np.full(len(self), origin), self.epochs.copy())

    def window(self, i: int) -> SensorWindow:
        name = {v: k for k, v in LABEL_CODES.items()}[int(self.labels[i])]
        return SensorWindow(self.X[i], name, str(self.origins[i]))

    @staticmethod
    def concat(sets: Iterable[WindowSet]) -> WindowSet:
        sets = [s for s in sets if len(s)]
        if not sets:
            raise ValueError("nothing to concatenate")
        return WindowSet(
            np.concatenate([s.X for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.origins for s in sets]),
            np.concatenate([s.epochs for s in sets]),
        )


def slice_windows(
    traj: Trajectory, window_len: int, stride: int = 1, origin: str = "Z_normal"
) -> WindowSet:
    """Sliding windows over a trajectory's sensor rows.

    A window's label is attack if any of its steps is attack, else fault if
    any step is fault, else normal.
    """
    n = len(traj)
    starts = np.arange(0, n - window_len + 1, stride)
    if len(starts) == 0:
        return WindowSet.empty(window_len, traj.sensors.shape[1])
    idx = starts[:, None] + np.arange(window_len)[None, :]
    X = traj.sensors[idx]
    lab = traj.labels[idx]
    labels = np.where((lab == ATTACK).any(axis=1), ATTACK, np.where((lab == FAULT).any(axis=1), FAULT, NORMAL))
    return WindowSet(X, labels, np.full(len(X), origin))


# ---------------------------------------------------------------------------
# Configuration and ensemble state
# ---------------------------------------------------------------------------


@dataclass
class BlueConfig:
    window_len: int = 12
    quantile: float = 0.995
    margin: float = 3.0
    member_mask: tuple[bool, bool, bool] = (True, True, True)
    consecutive: int = 3
    lstm_hidden: int = 16
    ae_hidden: tuple[int, int] = (24, 8)
    train_epochs: int = 25
    batch_size: int = 128
    lr: float = 3e-3
    n_trees: int = 100
    subsample: int = 256
    cal_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.member_mask = tuple(bool(b) for b in self.member_mask)
        self.ae_hidden = tuple(int(h) for h in self.ae_hidden)
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must lie in (0, 1)")
        if len(self.member_mask) != 3:
            raise ValueError("member_mask needs three flags (lstm, ae, iforest)")


def lstm_network(cfg: BlueConfig, n_channels: int = N_CHANNELS) -> nn.Network:
    return nn.Network(
        [nn.LSTM(n_channels, cfg.lstm_hidden), nn.Dense(cfg.lstm_hidden, n_channels)], prefix="lstm."
    )


def ae_network(cfg: BlueConfig, n_channels: int = N_CHANNELS) -> nn.Network:
    d = cfg.window_len * n_channels
    h1, h2 = cfg.ae_hidden
    return nn.Network(
        [
            nn.Dense(d, h1),
            nn.Activation("tanh", h1),
            nn.Dense(h1, h2),
            nn.Activation("tanh", h2),
            nn.Dense(h2, h1),
            nn.Activation("tanh", h1),
            nn.Dense(h1, d),
        ],
        prefix="ae.",
    )


@dataclass
class DetectorEnsemble:
    cfg: BlueConfig
    norm_mean: np.ndarray
    norm_std: np.ndarray
    lstm_params: nn.ParamVector
    ae_params: nn.ParamVector
    forest: IsolationForest
    calibrators: list[np.ndarray] = field(default_factory=list)
    raw_median: np.ndarray = field(default_factory=lambda: np.ones(3))
    threshold: float = 0.5
    member_mask: tuple[bool, bool, bool] = (True, True, True)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.member_mask = tuple(bool(b) for b in self.member_mask)
        self.lstm_net = lstm_network(self.cfg, len(self.norm_mean))
        self.ae_net = ae_network(self.cfg, len(self.norm_mean))

    @property
    def n_channels(self) -> int:
        return len(self.norm_mean)

    def copy(self) -> DetectorEnsemble:
        return DetectorEnsemble(
            replace(self.cfg),
            self.norm_mean.copy(),
            self.norm_std.copy(),
            self.lstm_params.copy(),
            self.ae_params.copy(),
            self.forest,
            [c.copy() for c in self.calibrators],
            self.raw_median.copy(),
            self.threshold,
            self.member_mask,
            dict(self.info),
        )

    def with_mask(self, mask: Sequence[bool]) -> DetectorEnsemble:
        """Same members, different ablation mask; the threshold is rebuilt on stored calibration scores."""
        out = self.copy()
        out.member_mask = tuple(bool(b) for b in mask)
        if "cal_calibrated" in self.info:
            out.threshold = _threshold(np.asarray(self.info["cal_calibrated"]), out.member_mask, out.cfg.quantile)
        return out

    def differentiable_params(self) -> np.ndarray:
        return np.concatenate([self.lstm_params.data, self.ae_params.data])

    def set_differentiable_params(self, flat: np.ndarray) -> None:
        n = len(self.lstm_params)
        if flat.shape != (n + len(self.ae_params),):
            raise EnsembleError(f"expected {n + len(self.ae_params)} parameters, got {flat.shape}")
        self.lstm_params.data[:] = flat[:n]
        self.ae_params.data[:] = flat[n:]


@dataclass
class AnomalyScore:
    raw: np.ndarray
    calibrated: np.ndarray
    fused: float


# ---------------------------------------------------------------------------
# Member raw scores
# ---------------------------------------------------------------------------


def normalise(ens: DetectorEnsemble, X: np.ndarray) -> np.ndarray:
    return (X - ens.norm_mean) / ens.norm_std


def _lstm_raw(ens: DetectorEnsemble, Xn: np.ndarray, params: nn.ParamVector | None = None):
    params = ens.lstm_params if params is None else params
    pred, tape = ens.lstm_net.forward(params, Xn[:, :-1])
    diff = pred - Xn[:, 1:]
    raw = np.mean(diff * diff, axis=(1, 2))

    def grad(w: np.ndarray):
        """Gradient of ``sum_i w_i raw_i`` w.r.t. params and the normalised window."""
        dpred = 2.0 * diff * (w / diff[0].size)[:, None, None]
        g, dx_in = nn.backward(tape, params, dpred)
        dX = np.zeros_like(Xn)
        dX[:, :-1] += dx_in
        dX[:, 1:] -= dpred
        return g, dX

    return raw, grad


def _ae_raw(ens: DetectorEnsemble, Xn: np.ndarray, params: nn.ParamVector | None = None):
    params = ens.ae_params if params is None else params
    flat = Xn.reshape(len(Xn), -1)
    recon, tape = ens.ae_net.forward(params, flat)
    diff = recon - flat
    raw = np.mean(diff * diff, axis=1)

    def grad(w: np.ndarray):
        drec = 2.0 * diff * (w / diff.shape[1])[:, None]
        g, dx_in = nn.backward(tape, params, drec)
        return g, (dx_in - drec).reshape(Xn.shape)

    return raw, grad


def window_features(Xn: np.ndarray) -> np.ndarray:
    """Per-channel mean, std, min, max and last-minus-first of each window."""
    return np.concatenate(
        [Xn.mean(axis=1), Xn.std(axis=1), Xn.min(axis=1), Xn.max(axis=1), Xn[:, -1] - Xn[:, 0]], axis=1
    )


def raw_scores(ens: DetectorEnsemble, X: np.ndarray) -> np.ndarray:
    """Raw member scores, shape ``(N, 3)``."""
    X = _check_windows(ens, X)
    Xn = normalise(ens, X)
    out = np.empty((len(X), 3))
    out[:, 0] = _lstm_raw(ens, Xn)[0]
    out[:, 1] = _ae_raw(ens, Xn)[0]
    out[:, 2] = ens.forest.score(window_features(Xn))
    return out


def _check_windows(ens: DetectorEnsemble, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (ens.cfg.window_len, ens.n_channels):
        raise EnsembleError(
            f"window shape {X.shape[1:]} does not match ({ens.cfg.window_len}, {ens.n_channels})"
        )
    return X


# ---------------------------------------------------------------------------
# Calibration and fusion
# ---------------------------------------------------------------------------


def calibrate(table: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Empirical CDF of ``table`` evaluated at ``raw`` with linear interpolation.

    Raw scores are non-negative. Below the smallest table entry the map falls
    linearly to 0 at raw 0; above the largest it follows a Pareto tail
    ``1 - top / (raw (n + 1))``, so the map stays strictly increasing past the
    calibration range instead of saturating at 1. Plotting positions are
    ``i / (n + 1)``, which makes both tails continuous.
    """
    n = len(table)
    raw = np.asarray(raw, dtype=float)
    lo, top = table[0], table[-1]
    out = np.interp(raw, table, np.arange(1, n + 1) / (n + 1))
    if lo > 0:
        below = raw < lo
        out = np.where(below, np.maximum(raw, 0.0) / lo / (n + 1), out)
    if top > 0:
        above = raw > top
        out = np.where(above, 1.0 - top / np.where(above, raw, 1.0) / (n + 1), out)
    return out


def calibrated_scores(ens: DetectorEnsemble, raw: np.ndarray) -> np.ndarray:
    return np.stack([calibrate(ens.calibrators[m], raw[:, m]) for m in range(3)], axis=1)


def fuse(calibrated: np.ndarray, mask: Sequence[bool]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EnsembleError("member_mask switches every detector off")
    return calibrated[:, mask].max(axis=1)


def score_batch(ens: DetectorEnsemble, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(raw, calibrated, fused)`` for a batch of windows."""
    if not any(ens.member_mask):
        raise EnsembleError("member_mask switches every detector off")
    raw = raw_scores(ens, X)
    cal = calibrated_scores(ens, raw)
    return raw, cal, fuse(cal, ens.member_mask)


def score(ens: DetectorEnsemble, w: SensorWindow | np.ndarray) -> AnomalyScore:
    X = w.matrix if isinstance(w, SensorWindow) else w
    raw, cal, fused = score_batch(ens, X)
    return AnomalyScore(raw[0], cal[0], float(fused[0]))


def _threshold(cal: np.ndarray, mask, quantile: float) -> float:
    fused = fuse(cal, mask)
    return float(np.clip(np.quantile(fused, quantile), 1e-6, 1.0 - 1e-6))


def recalibrate(ens: DetectorEnsemble, normal_windows: WindowSet | np.ndarray) -> DetectorEnsemble:
    """Rebuild CDF tables, per-member medians and the alarm threshold."""
    X = normal_windows.X if isinstance(normal_windows, WindowSet) else normal_windows
    if len(X) == 0:
        raise EnsembleError("recalibration needs held-out normal windows")
    out = ens.copy()
    raw = raw_scores(out, X)
    out.calibrators = [np.sort(raw[:, m]) for m in range(3)]
    out.raw_median = np.median(raw, axis=0)
    cal = calibrated_scores(out, raw)
    out.info["cal_calibrated"] = cal
    out.threshold = _threshold(cal, out.member_mask, out.cfg.quantile)
    return out


def refit_iforest(ens: DetectorEnsemble, normal_windows: WindowSet) -> DetectorEnsemble:
    """Refit the forest on normal windows only; attack data never reaches it."""
    if len(normal_windows) == 0:
        raise EnsembleError("cannot refit the isolation forest on an empty set")
    if isinstance(normal_windows, WindowSet) and np.any(normal_windows.labels != NORMAL):
        raise EnsembleError("isolation forest must be fitted on normal windows only")
    X = normal_windows.X if isinstance(normal_windows, WindowSet) else normal_windows
    out = ens.copy()
    feats = window_features(normalise(out, X))
    out.forest = IsolationForest(out.cfg.n_trees, out.cfg.subsample, out.cfg.seed).fit(feats)
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def split_normal(Z_normal: WindowSet, cal_fraction: float) -> tuple[WindowSet, WindowSet]:
    """Contiguous tail split so overlapping windows rarely straddle both halves."""
    n_cal = max(1, int(round(cal_fraction * len(Z_normal))))
    n_train = len(Z_normal) - n_cal
    if n_train < 1:
        raise EnsembleError("not enough normal windows to split off a calibration set")
    return Z_normal.take(np.arange(n_train)), Z_normal.take(np.arange(n_train, len(Z_normal)))


def fit_baseline(
    Z_normal: WindowSet,
    Z_fault: WindowSet | None = None,
    cfg: BlueConfig | None = None,
    Z_cal: WindowSet | None = None,
) -> DetectorEnsemble:
    """Train the initial defender on normal data.

    LSTM and autoencoder learn to predict/reconstruct normal windows, the
    forest is grown on normal window features, calibration uses ``Z_cal`` (or a
    held-out tail of ``Z_normal``). Fault windows only feed the recall figure
    stored in ``info``.
    """
    cfg = cfg or BlueConfig()
    if Z_normal is None or len(Z_normal) == 0:
        raise EnsembleError("fit_baseline needs normal windows")
    if Z_cal is None:
        train, cal = split_normal(Z_normal, cfg.cal_fraction)
    else:
        train, cal = Z_normal, Z_cal
    if train.X.shape[1] != cfg.window_len:
        raise EnsembleError(f"windows have length {train.X.shape[1]}, config says {cfg.window_len}")
    rng = np.random.default_rng(cfg.seed)
    C = train.X.shape[2]
    flat = train.X.reshape(-1, C)
    norm_mean = flat.mean(axis=0)
    norm_std = flat.std(axis=0)
    norm_std[norm_std == 0] = 1.0
    lstm_params = lstm_network(cfg, C).init_params(rng)
    ae_params = ae_network(cfg, C).init_params(rng)
    ens = DetectorEnsemble(cfg, norm_mean, norm_std, lstm_params, ae_params, IsolationForest(), member_mask=cfg.member_mask)
    ens.raw_median = np.ones(3)

    Xn = normalise(ens, train.X)
    states = {"lstm": nn.AdamState.for_params(ens.lstm_params), "ae": nn.AdamState.for_params(ens.ae_params)}
    for epoch in range(cfg.train_epochs):
        order = rng.permutation(len(Xn))
        for start in range(0, len(order), cfg.batch_size):
            batch = Xn[order[start : start + cfg.batch_size]]
            w = np.full(len(batch), 1.0 / len(batch))
            for name, fn, params in (("lstm", _lstm_raw, ens.lstm_params), ("ae", _ae_raw, ens.ae_params)):
                _, grad = fn(ens, batch, params)
                g, _ = grad(w)
                nn.adam_step(params, g, states[name], lr=cfg.lr)
    ens = refit_iforest(ens, train)
    ens = recalibrate(ens, cal)
    if Z_fault is not None and len(Z_fault):
        fused = score_batch(ens, Z_fault.X)[2]
        ens.info["fault_recall"] = float(np.mean(fused > ens.threshold))
    logger.info("baseline fitted: threshold=%.4f medians=%s", ens.threshold, ens.raw_median)
    return ens


def hardening_loss(ens: DetectorEnsemble, batch: WindowSet) -> tuple[float, dict[str, nn.ParamVector]]:
    """Mixed self-supervised / hinge loss over the differentiable members.

    Per member the raw score is divided by its normal median ``s``. Normal
    windows contribute ``raw / s``; attack and fault windows contribute
    ``max(0, margin - raw / s)``. The loss is the batch mean of the member sum.
    """
    if len(batch) == 0:
        raise EnsembleError("empty hardening batch")
    if np.any((batch.labels < 0) | (batch.labels > 2)):
        raise EnsembleError("hardening batch contains unlabelled windows")
    X = _check_windows(ens, batch.X)
    Xn = normalise(ens, X)
    anomalous = batch.labels != NORMAL
    n = len(X)
    total = 0.0
    grads = {}
    for m, (name, fn, params) in enumerate((("lstm", _lstm_raw, ens.lstm_params), ("ae", _ae_raw, ens.ae_params))):
        raw, grad = fn(ens, Xn, params)
        r = raw / ens.raw_median[m]
        hinge = np.maximum(0.0, ens.cfg.margin - r)
        per = np.where(anomalous, hinge, r)
        total += per.sum() / n
        active_hinge = anomalous & (hinge > 0)
        w = np.where(anomalous, np.where(active_hinge, -1.0, 0.0), 1.0) / (ens.raw_median[m] * n)
        grads[name], _ = grad(w)
    return float(total), grads


def harden(
    ens: DetectorEnsemble,
    sampler,
    steps: int,
    lr: float = 1e-3,
) -> tuple[DetectorEnsemble, list[float]]:
    """Run ``steps`` Adam updates of the hardening loss on batches from ``sampler()``."""
    out = ens.copy()
    states = {"lstm": nn.AdamState.for_params(out.lstm_params), "ae": nn.AdamState.for_params(out.ae_params)}
    losses = []
    for _ in range(steps):
        batch = sampler()
        loss, grads = hardening_loss(out, batch)
        losses.append(loss)
        nn.adam_step(out.lstm_params, grads["lstm"], states["lstm"], lr=lr, max_grad_norm=10.0)
        nn.adam_step(out.ae_params, grads["ae"], states["ae"], lr=lr, max_grad_norm=10.0)
    return out, losses


# ---------------------------------------------------------------------------
# Saliency of the differentiable members
# ---------------------------------------------------------------------------


def combined_raw(ens: DetectorEnsemble, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum of median-normalised raw scores of the active differentiable members and its input gradient.

    Returns ``(score (N,), gradient (N, L, C))`` in sensor units.
    """
    X = _check_windows(ens, X)
    Xn = normalise(ens, X)
    n = len(X)
    total = np.zeros(n)
    dX = np.zeros_like(Xn)
    members = [(0, _lstm_raw), (1, _ae_raw)]
    for m, fn in members:
        if not ens.member_mask[m]:
            continue
        raw, grad = fn(ens, Xn)
        total += raw / ens.raw_median[m]
        _, d = grad(np.full(n, 1.0 / ens.raw_median[m]))
        dX += d
    return total, dX / ens.norm_std


# ---------------------------------------------------------------------------
# Streams and alarms
# ---------------------------------------------------------------------------


def stream_windows(sensors: np.ndarray, window_len: int) -> np.ndarray:
    n = len(sensors)
    idx = np.arange(n - window_len + 1)[:, None] + np.arange(window_len)[None, :]
    return sensors[idx]


def stream_scores(ens: DetectorEnsemble, sensors: np.ndarray) -> np.ndarray:
    """Fused score per step for the window ending at that step; NaN before the first full window."""
    L = ens.cfg.window_len
    out = np.full(len(sensors), np.nan)
    if len(sensors) >= L:
        out[L - 1 :] = score_batch(ens, stream_windows(sensors, L))[2]
    return out


def alarms(scores: np.ndarray, threshold: float, consecutive: int = 3) -> np.ndarray:
    """Boolean alarm per step: the last ``consecutive`` scores all exceed ``threshold``."""
    over = np.nan_to_num(scores, nan=-np.inf) > threshold
    out = np.zeros(len(over), dtype=bool)
    run = 0
    for i, o in enumerate(over):
        run = run + 1 if o else 0
        out[i] = run >= consecutive
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_ensemble(path: str | Path, ens: DetectorEnsemble) -> None:
    """Write an ensemble as one ``.npz``: nn container entries plus ``forest.*`` and ``blue.*`` arrays."""
    arrays = {
        "format": np.array("arcsim-ensemble/1"),
        "lstm.data": ens.lstm_params.data,
        "lstm.manifest": np.array(json.dumps(nn._manifest_rows(ens.lstm_params))),
        "ae.data": ens.ae_params.data,
        "ae.manifest": np.array(json.dumps(nn._manifest_rows(ens.ae_params))),
        "blue.config": np.array(json.dumps(asdict(ens.cfg))),
        "blue.norm_mean": ens.norm_mean,
        "blue.norm_std": ens.norm_std,
        "blue.raw_median": ens.raw_median,
        "blue.threshold": np.array(ens.threshold),
        "blue.member_mask": np.array(ens.member_mask),
    }
    for m, table in enumerate(ens.calibrators):
        arrays[f"blue.calibrator{m}"] = table
    if "cal_calibrated" in ens.info:
        arrays["blue.cal_calibrated"] = np.asarray(ens.info["cal_calibrated"])
    for k, v in ens.forest.to_arrays().items():
        arrays[f"forest.{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_ensemble(path: str | Path) -> DetectorEnsemble:
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != "arcsim-ensemble/1":
            raise EnsembleError(f"{path}: not an ensemble container")
        cfg = BlueConfig(**json.loads(str(z["blue.config"])))

        def pv(key):
            rows = json.loads(str(z[f"{key}.manifest"]))
            return nn.ParamVector(z[f"{key}.data"].copy(), {n: (int(o), tuple(s)) for n, o, s in rows})

        forest = IsolationForest.from_arrays({k[7:]: z[k] for k in z.files if k.startswith("forest.")})
        info = {"cal_calibrated": z["blue.cal_calibrated"].copy()} if "blue.cal_calibrated" in z.files else {}
        return DetectorEnsemble(
            cfg,
            z["blue.norm_mean"].copy(),
            z["blue.norm_std"].copy(),
            pv("lstm"),
            pv("ae"),
            forest,
            [z[f"blue.calibrator{m}"].copy() for m in range(3)],
            z["blue.raw_median"].copy(),
            float(z["blue.threshold"]),
            tuple(bool(b) for b in z["blue.member_mask"]),
            info,
        )
