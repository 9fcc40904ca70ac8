"""Experiment plumbing shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import dataclasses
import logging
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from arcsim import blue, datasets, metrics
from arcsim import plant as P
from arcsim.config import ExperimentConfig, dump

logger = logging.getLogger(__name__)

ABLATION_HEADER = ["row", "f1", "degradation_pct"]
MEMBERS = ("lstm", "ae", "iforest")


def git_describe(cwd: str | Path | None = None) -> str:
    """``git describe`` of the package source tree (``unknown`` outside a checkout)."""
    cwd = cwd or Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=cwd,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def prepare_run_dir(out: str | Path, cfg: ExperimentConfig, seed: int, command: str) -> Path:
    """Create ``out`` and write the config snapshot and run metadata into it."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump(cfg))
    (out / "run_meta.txt").write_text(f"command: {command}\nseed: {seed}\ngit_describe: {git_describe()}\n")
    return out


@dataclass
class Corpus:
    train: blue.WindowSet
    cal: blue.WindowSet
    test: blue.WindowSet
    normal_eval: list[metrics.LabeledRun]


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    d, seed, L = cfg.data, cfg.seeds.data, cfg.blue.window_len
    Zn = datasets.normal_windows(d.normal_episodes, seed, length=d.episode_length, window_len=L, params=cfg.plant)
    train, cal = blue.split_normal(Zn, cfg.blue.cal_fraction)
    test = datasets.normal_windows(d.test_episodes, seed + 5, length=d.episode_length, window_len=L, params=cfg.plant)
    rng = np.random.default_rng(seed + 77)
    normal_eval = []
    for i in range(d.eval_runs):
        ep = P.normal_episode(cfg.plant, d.eval_length, rng, setpoint_sigma=datasets.NORMAL_SETPOINT_SIGMA)
        normal_eval.append(metrics.LabeledRun(ep.sensors, np.zeros(len(ep.sensors), dtype=bool), f"normal{i}"))
    return Corpus(train, cal, test, normal_eval)


def train_baseline(cfg: ExperimentConfig, corpus: Corpus) -> blue.DetectorEnsemble:
    bcfg = dataclasses.replace(cfg.blue, seed=cfg.seeds.baseline)
    return blue.fit_baseline(corpus.train, cfg=bcfg, Z_cal=corpus.cal)


def fault_recall(ens: blue.DetectorEnsemble, cfg: ExperimentConfig, train: blue.WindowSet) -> np.ndarray:
    """Per-channel window recall on step-bias faults of ``fault_sigma`` normal-operation deviations."""
    sigma = train.X.reshape(-1, train.X.shape[-1]).std(axis=0)
    d = cfg.data
    Zf = datasets.fault_windows(
        d.fault_episodes, cfg.seeds.data + 11, d.fault_sigma * sigma, window_len=cfg.blue.window_len, params=cfg.plant
    )
    over = blue.score_batch(ens, Zf.X)[2] > ens.threshold
    per = len(Zf) // len(sigma)
    return np.array([over[c * per : (c + 1) * per].mean() for c in range(len(sigma))])


def fault_runs(
    cfg: ExperimentConfig, sigma: np.ndarray, n_per_channel: int, seed: int, length: int = 180
) -> list[metrics.LabeledRun]:
    """Normal-operation runs with a step-bias fault of ``fault_sigma * sigma`` on one channel each."""
    rng = np.random.default_rng(seed)
    scale = cfg.data.fault_sigma * np.asarray(sigma, dtype=float)
    runs = []
    for ch in range(P.N_CHANNELS):
        for i in range(n_per_channel):
            f = P.FaultSpec("sensor_step_bias", ch, float(scale[ch]), length // 3, length // 3)
            ep = P.normal_episode(cfg.plant, length, rng, setpoint_sigma=datasets.NORMAL_SETPOINT_SIGMA, faults=[f])
            runs.append(metrics.LabeledRun(ep.sensors, ep.labels != 0, f"fault_ch{ch}_{i}"))
    return runs


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    name: str
    member_mask: tuple[bool, bool, bool] = (True, True, True)
    skip_arc: bool = False


def default_rows() -> list[AblationRow]:
    rows = [AblationRow("full_arc"), AblationRow("full_ensemble_no_arc", skip_arc=True)]
    for i, m in enumerate(MEMBERS):
        mask = tuple(j != i for j in range(3))
        rows.append(AblationRow(f"arc_without_{m}", mask))
    return rows


@dataclass
class AblationResult:
    name: str
    f1: float
    degradation: float


def ablation_grid(
    D_arc: blue.DetectorEnsemble,
    D_0: blue.DetectorEnsemble,
    rows: Sequence[AblationRow],
    runs: Sequence[metrics.LabeledRun],
) -> list[AblationResult]:
    """F1 of each row on the shared attack set and its relative change against the first row."""
    if not rows:
        raise ValueError("no ablation rows")
    f1s = []
    for r in rows:
        if len(r.member_mask) != 3 or not any(r.member_mask):
            raise ValueError(f"row {r.name}: member_mask needs three flags with at least one set")
        ens = (D_0 if r.skip_arc else D_arc).with_mask(r.member_mask)
        f1s.append(metrics.evaluate(ens, runs).f1)
    return [AblationResult(r.name, f, metrics.degradation(f, f1s[0])) for r, f in zip(rows, f1s)]


def write_ablation_csv(path: str | Path, results: Sequence[AblationResult]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ABLATION_HEADER)
        for r in results:
            wr.writerow([r.name, f"{r.f1:.10g}", f"{100.0 * r.degradation:.4f}"])


def write_eval_csvs(out: Path, rep: metrics.EvalReport) -> None:
    with open(out / "eval_summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["f1", "precision", "recall", "auc", "tp", "fp", "fn", "tn"])
        c = rep.confusion
        wr.writerow([f"{rep.f1:.10g}", f"{rep.precision:.10g}", f"{rep.recall:.10g}", f"{rep.auc:.10g}", c.tp, c.fp, c.fn, c.tn])
    with open(out / "latency.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["run", "latency_s"])
        for name, lat in rep.latencies.items():
            wr.writerow([name, lat if isinstance(lat, str) else f"{lat:.1f}"])
    with open(out / "roc.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["fpr", "tpr"])
        for a, b in zip(rep.roc_fpr, rep.roc_tpr):
            wr.writerow([f"{a:.10g}", f"{b:.10g}"])
