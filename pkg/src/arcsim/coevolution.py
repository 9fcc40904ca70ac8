"""Alternating attacker training and defender hardening with a replay buffer."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from arcsim import blue, jsma, metrics, nn
from arcsim import plant as P
from arcsim import red as R

logger = logging.getLogger(__name__)

REPORT_HEADER = ["epoch", "attacker_return", "stealth_rate", "f1_on_new", "f1_on_epoch1", "fpr_normal"]


class GenerationError(RuntimeError):
    pass


class PhaseError(RuntimeError):
    def __init__(self, msg: str, epoch: int):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass
class CoevolutionConfig:
    n_epochs: int = 3
    attacker_cycles: int = 150
    defender_steps: int = 1000
    num_samples: int = 600
    ratios: tuple[float, float, float, float] = (0.5, 0.2, 0.1, 0.2)
    batch_size: int = 64
    disruption_floor: float = 0.3
    episodes_per_try: int = 8
    max_retries: int = 6
    jsma_windows: int = 120
    harden_lr: float = 3e-3
    seed: int = 0
    env: R.EnvConfig = field(default_factory=lambda: R.EnvConfig(n_envs=8))
    ppo: R.PPOConfig = field(default_factory=lambda: R.PPOConfig(rollout_steps=64, minibatch=128, epochs=5))
    jsma: jsma.JsmaConfig = field(default_factory=jsma.JsmaConfig)

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ValueError("replay ratios must be non-negative and sum to 1")
        if self.n_epochs < 0 or self.batch_size < 1:
            raise ValueError("counts must be positive")


@dataclass
class AttackEpisode:
    """A harvested attack run with its step labels (lead-in rows are normal)."""

    run: metrics.LabeledRun
    epoch: int
    max_disruption: float
    stealthy: bool


@dataclass
class AttackBuffer:
    window_len: int
    Z_attacks: blue.WindowSet = None
    episodes: list[AttackEpisode] = field(default_factory=list)
    current_epoch: int = 0

    def __post_init__(self):
        if self.Z_attacks is None:
            self.Z_attacks = blue.WindowSet.empty(self.window_len)

    def add(self, Z_new: blue.WindowSet, episodes: list[AttackEpisode], epoch: int) -> None:
        if epoch < self.current_epoch:
            raise ValueError("epochs must be added in order")
        tagged = blue.WindowSet(Z_new.X, Z_new.labels, Z_new.origins, np.full(len(Z_new), epoch))
        self.Z_attacks = blue.WindowSet.concat([self.Z_attacks, tagged]) if len(Z_new) else self.Z_attacks
        self.episodes.extend(episodes)
        self.current_epoch = epoch

    def new(self) -> blue.WindowSet:
        return self.Z_attacks.take(np.flatnonzero(self.Z_attacks.epochs == self.current_epoch))

    def history(self) -> blue.WindowSet:
        return self.Z_attacks.take(np.flatnonzero(self.Z_attacks.epochs < self.current_epoch))

    def runs(self, epoch: int) -> list[metrics.LabeledRun]:
        return [e.run for e in self.episodes if e.epoch == epoch]


# ---------------------------------------------------------------------------
# Attack harvesting
# ---------------------------------------------------------------------------


def episode_labels(ep: R.Episode) -> np.ndarray:
    """Step flags: a step is attack once the attacker's setpoint offset is nonzero."""
    moved = np.any(ep.offsets != 0.0, axis=1)
    attack = np.maximum.accumulate(moved) if len(moved) else moved
    return np.r_[np.zeros(ep.lead_in, dtype=bool), attack]


def generate_attacks(
    agent: R.RedAgent,
    defender: blue.DetectorEnsemble,
    num_samples: int,
    env_cfg: R.EnvConfig,
    seed: int,
    epoch: int = 1,
    floor: float = 0.3,
    episodes_per_try: int = 8,
    max_retries: int = 6,
) -> tuple[blue.WindowSet, list[AttackEpisode]]:
    """Roll out the stochastic policy and slice disruptive episodes into windows.

    Returns exactly ``num_samples`` attack windows. Raises
    :class:`GenerationError` if no disruptive episode turns up within the
    retry budget.
    """
    L = defender.cfg.window_len
    if num_samples == 0:
        return blue.WindowSet.empty(L, defender.n_channels), []
    rng = np.random.default_rng(seed)
    pools, kept = [], []
    total = 0
    for attempt in range(max_retries):
        eps = R.rollout_episodes(agent, defender, episodes_per_try, env_cfg, seed=int(rng.integers(2**31)))
        for ep in eps:
            peak = float(ep.disruption.max()) if len(ep.disruption) else 0.0
            if peak < floor:
                continue
            attack = episode_labels(ep)
            run = metrics.LabeledRun(ep.sensors, attack, name=f"e{epoch}_{len(kept)}")
            kept.append(AttackEpisode(run, epoch, peak, ep.stealthy(defender.threshold)))
            traj = P.Trajectory(
                np.zeros((len(attack), 2)), np.zeros((len(attack), 3)), ep.sensors, attack.astype(int)
            )
            w = blue.slice_windows(traj, L, origin="Z_new")
            w = w.take(np.flatnonzero(w.labels == blue.ATTACK))
            pools.append(w)
            total += len(w)
        if total >= num_samples:
            break
    if total == 0:
        raise GenerationError(f"epoch {epoch}: no episode reached disruption {floor} in {max_retries} tries")
    pool = blue.WindowSet.concat(pools)
    idx = np.sort(rng.choice(len(pool), size=num_samples, replace=len(pool) < num_samples))
    out = pool.take(idx)
    return blue.WindowSet(out.X, out.labels, out.origins, np.full(num_samples, epoch)), kept


# ---------------------------------------------------------------------------
# Replay sampling and defender training
# ---------------------------------------------------------------------------


def batch_counts(ratios, batch_size: int, have_history: bool, have_jsma: bool = True) -> tuple[int, int, int, int]:
    """Integer (normal, new, jsma, replay) counts; missing sources fall back to normal."""
    r_norm, r_new, r_jsma, r_rep = ratios
    n_new = int(round(r_new * batch_size))
    n_jsma = int(round(r_jsma * batch_size)) if have_jsma else 0
    n_rep = int(round(r_rep * batch_size)) if have_history else 0
    n_norm = batch_size - n_new - n_jsma - n_rep
    return n_norm, n_new, n_jsma, n_rep


def sample_batch(
    buf: AttackBuffer,
    Z_normal: blue.WindowSet,
    Z_jsma: blue.WindowSet,
    ratios,
    batch_size: int,
    rng: np.random.Generator,
) -> blue.WindowSet:
    if len(Z_normal) == 0:
        raise ValueError("sample_batch needs normal windows")
    new, hist = buf.new(), buf.history()
    counts = batch_counts(ratios, batch_size, len(hist) > 0, len(Z_jsma) > 0)
    if len(new) == 0:
        counts = (counts[0] + counts[1], 0, counts[2], counts[3])
    parts = []
    for (src, origin, label), n in zip(
        (
            (Z_normal, "Z_normal", blue.NORMAL),
            (new, "Z_new", blue.ATTACK),
            (Z_jsma, "Z_JSMA", blue.ATTACK),
            (hist, "Z_replay", blue.ATTACK),
        ),
        counts,
    ):
        if n == 0:
            continue
        idx = rng.integers(len(src), size=n)
        part = src.take(idx)
        parts.append(blue.WindowSet(part.X, np.full(n, label), np.full(n, origin), part.epochs))
    return blue.WindowSet.concat(parts)


def train_defender(
    D_prev: blue.DetectorEnsemble,
    buf: AttackBuffer,
    Z_normal: blue.WindowSet,
    Z_cal: blue.WindowSet,
    cfg: CoevolutionConfig,
    rng: np.random.Generator,
) -> tuple[blue.DetectorEnsemble, dict]:
    """Diversify the new attacks with JSMA, harden on replay batches, refit the forest, recalibrate."""
    Z_new = buf.new()
    if len(Z_new) and cfg.jsma_windows:
        pick = np.sort(rng.choice(len(Z_new), size=min(cfg.jsma_windows, len(Z_new)), replace=False))
        Z_jsma, reps = jsma.perturb_set(D_prev, Z_new.take(pick), cfg.jsma)
    else:
        Z_jsma, reps = blue.WindowSet.empty(D_prev.cfg.window_len, D_prev.n_channels), []

    def sampler():
        return sample_batch(buf, Z_normal, Z_jsma, cfg.ratios, cfg.batch_size, rng)

    D, losses = blue.harden(D_prev, sampler, cfg.defender_steps, lr=cfg.harden_lr)
    D = blue.refit_iforest(D, Z_normal)
    D = blue.recalibrate(D, Z_cal)
    info = {
        "hardening_loss_first": losses[0] if losses else float("nan"),
        "hardening_loss_last": losses[-1] if losses else float("nan"),
        "jsma_evasion": float(np.mean([r.evaded for r in reps])) if reps else float("nan"),
    }
    return D, info


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    attacker_return: float
    stealth_rate: float
    f1_on_new: float
    f1_on_epoch1: float
    fpr_normal: float
    f1_d0_on_new: float = float("nan")


@dataclass
class ArcResult:
    D_final: blue.DetectorEnsemble
    defenders: list[blue.DetectorEnsemble]  # index k is D_k, index 0 is D_0
    agent: R.RedAgent | None
    buffer: AttackBuffer
    records: list[EpochRecord]

    def report_csv(self) -> str:
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(REPORT_HEADER)
        for r in self.records:
            wr.writerow(
                [r.epoch] + [f"{v:.10g}" for v in (r.attacker_return, r.stealth_rate, r.f1_on_new, r.f1_on_epoch1, r.fpr_normal)]
            )
        return out.getvalue()


def f1_on(ens: blue.DetectorEnsemble, attack_runs, normal_runs) -> float:
    return metrics.evaluate(ens, list(attack_runs) + list(normal_runs)).f1


def run_arc(
    cfg: CoevolutionConfig,
    D_0: blue.DetectorEnsemble,
    Z_normal: blue.WindowSet,
    Z_cal: blue.WindowSet,
    normal_eval: list[metrics.LabeledRun],
    Z_normal_test: blue.WindowSet | None = None,
    out_dir: str | Path | None = None,
    agent: R.RedAgent | None = None,
) -> ArcResult:
    """Run ``cfg.n_epochs`` epochs of attacker training then defender hardening.

    ``Z_normal`` trains (hardening, forest), ``Z_cal`` recalibrates,
    ``normal_eval`` supplies the normal runs mixed into every F1 evaluation and
    ``Z_normal_test`` the windows behind the reported false-positive rate.
    Each epoch's defender, attacker and new attack windows are archived under
    ``out_dir/epoch<k>/`` when ``out_dir`` is given.
    """
    rng = np.random.default_rng(cfg.seed)
    env_cfg = cfg.env
    if agent is None:
        agent = R.RedAgent.create(R.AttackEnv(env_cfg, D_0).obs_dim, env_cfg.max_delta, replace(cfg.ppo), seed=cfg.seed)
    buf = AttackBuffer(D_0.cfg.window_len)
    defenders = [D_0]
    records: list[EpochRecord] = []
    D = D_0
    Z_test = Z_normal_test if Z_normal_test is not None else Z_cal
    for epoch in range(1, cfg.n_epochs + 1):
        try:
            frozen = D.differentiable_params().tobytes()
            res = R.train_attacker(agent, D, cfg.attacker_cycles, env_cfg, seed=int(rng.integers(2**31)))
            agent = res.agent
            if D.differentiable_params().tobytes() != frozen:
                raise RuntimeError("defender changed during attacker training")
            Z_new, eps = generate_attacks(
                agent,
                D,
                cfg.num_samples,
                env_cfg,
                seed=int(rng.integers(2**31)),
                epoch=epoch,
                floor=cfg.disruption_floor,
                episodes_per_try=cfg.episodes_per_try,
                max_retries=cfg.max_retries,
            )
            buf.add(Z_new, eps, epoch)
            snap = agent.fingerprint()
            D, info = train_defender(D, buf, Z_normal, Z_cal, cfg, rng)
            if agent.fingerprint() != snap:
                raise RuntimeError("attacker changed during defender training")
        except Exception as exc:
            logger.error("co-evolution aborted in epoch %d: %s", epoch, exc)
            raise PhaseError(str(exc), epoch) from exc
        defenders.append(D)
        runs_new = buf.runs(epoch)
        rec = EpochRecord(
            epoch,
            res.final_decile_reward,
            float(np.mean([e.stealthy for e in eps])) if eps else float("nan"),
            f1_on(D, runs_new, normal_eval),
            f1_on(D, buf.runs(1), normal_eval),
            metrics.window_fpr(D, Z_test),
            f1_on(D_0, runs_new, normal_eval),
        )
        records.append(rec)
        logger.info("epoch %d: %s %s", epoch, rec, info)
        if out_dir is not None:
            archive_epoch(Path(out_dir) / f"epoch{epoch}", D, agent, Z_new, runs_new)
    return ArcResult(D, defenders, agent, buf, records)


def archive_epoch(
    path: Path, D: blue.DetectorEnsemble, agent: R.RedAgent, Z_new: blue.WindowSet, runs: list[metrics.LabeledRun] = ()
) -> None:
    path.mkdir(parents=True, exist_ok=True)
    blue.save_ensemble(path / "defender.npz", D)
    nn.save_params(
        path / "attacker.npz",
        {
            "policy": agent.policy,
            "log_std": nn.ParamVector(agent.log_std.copy(), {"log_std": (0, agent.log_std.shape)}),
            "value": agent.value,
        },
    )
    with open(path / "z_new.npz", "wb") as fh:
        np.savez(fh, X=Z_new.X, labels=Z_new.labels, origins=Z_new.origins, epochs=Z_new.epochs)
    metrics.save_runs(path / "attack_runs.npz", list(runs))
