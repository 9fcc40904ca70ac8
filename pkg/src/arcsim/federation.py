"""Federated hardening across plant sites with Byzantine-robust aggregation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from arcsim import blue, metrics

logger = logging.getLogger(__name__)

ROUND_HEADER = ["round", "agg_kind", "cosine_to_honest", "global_fpr", "global_f1"]


@dataclass
class ModelUpdate:
    client_id: int
    delta: np.ndarray
    sample_count: int = 1

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        if not np.all(np.isfinite(self.delta)):
            raise ValueError(f"client {self.client_id}: non-finite update")
        if self.sample_count < 0:
            raise ValueError("sample_count must be non-negative")


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "fedavg"
    beta: float = 0.0
    f: int = 0

    def __post_init__(self):
        if self.kind not in ("fedavg", "trimmed_mean", "median", "krum"):
            raise ValueError(f"unknown aggregator {self.kind!r}")
        if not 0.0 <= self.beta < 0.5:
            raise ValueError("trimmed-mean beta must lie in [0, 0.5)")
        if self.f < 0:
            raise ValueError("f must be non-negative")

    @classmethod
    def parse(cls, text: str) -> AggregatorSpec:
        """``fedavg``, ``median``, ``trimmed_mean:0.3`` or ``krum:3``."""
        kind, _, arg = text.partition(":")
        if kind == "trimmed_mean":
            return cls(kind, beta=float(arg or 0.0))
        if kind == "krum":
            return cls(kind, f=int(arg or 0))
        if arg:
            raise ValueError(f"{kind} takes no parameter")
        return cls(kind)


@dataclass(frozen=True)
class PoisonSpec:
    kind: str = "sign_flip"
    scale: float = 1.0
    clients: tuple[int, ...] = ()
    direction: tuple[float, ...] | None = None
    r_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sign_flip", "large_norm", "targeted_drift"):
            raise ValueError(f"unknown poison {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("poison scale must be positive")

    def apply(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "sign_flip":
            return -self.scale * u
        if self.kind == "large_norm":
            n = np.linalg.norm(u)
            return self.scale * u / n * self.r_max if n > 0 else u.copy()
        d = np.asarray(self.direction, dtype=float)
        if d.shape != u.shape:
            raise ValueError("drift direction has the wrong dimension")
        return self.scale * d


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _stack(updates: Sequence[ModelUpdate]) -> np.ndarray:
    if not updates:
        raise ValueError("no updates to aggregate")
    dims = {u.delta.shape for u in updates}
    if len(dims) != 1:
        raise ValueError("updates differ in dimension")
    return np.stack([u.delta for u in updates])


def krum_scores(X: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances from each update to its ``n - f - 2`` nearest others."""
    n = len(X)
    k = n - f - 2
    if k < 1:
        raise ValueError(f"krum needs n > f + 2 (n={n}, f={f})")
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    return np.sort(d2, axis=1)[:, :k].sum(axis=1)


def krum_select(updates: Sequence[ModelUpdate], f: int) -> ModelUpdate:
    ordered = sorted(updates, key=lambda u: u.client_id)
    scores = krum_scores(_stack(ordered), f)
    return ordered[int(np.argmin(scores))]  # argmin takes the first, i.e. the lowest id


def aggregate(updates: Sequence[ModelUpdate], spec: AggregatorSpec) -> np.ndarray:
    ordered = sorted(updates, key=lambda u: u.client_id)
    X = _stack(ordered)
    n = len(X)
    if spec.kind == "fedavg":
        w = np.array([u.sample_count for u in ordered], dtype=float)
        if w.sum() <= 0:
            w = np.ones(n)
        return (w / w.sum()) @ X
    if spec.kind == "median":
        return np.median(X, axis=0)
    if spec.kind == "trimmed_mean":
        t = int(np.floor(spec.beta * n))
        S = np.sort(X, axis=0)
        return S[t : n - t].mean(axis=0)
    if spec.f >= n / 2:
        raise ValueError("krum requires f < n/2")
    return krum_select(ordered, spec.f).delta.copy()


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------


def partition_non_iid(windows: blue.WindowSet, n_clients: int, skew: float, rng: np.random.Generator) -> list[blue.WindowSet]:
    """Split windows into shards; ``skew`` mixes random and temperature-sorted assignment.

    Each window keeps its random shard with probability ``1 - skew`` and takes
    its sorted (by mean temperature) shard otherwise.
    """
    n = len(windows)
    if n_clients < 1 or n_clients > n:
        raise ValueError("need 1 <= n_clients <= number of windows")
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must lie in [0, 1]")
    if n_clients == 1:
        return [windows]
    random_shard = rng.permutation(np.arange(n) % n_clients)
    order = np.argsort(windows.X[:, :, 1].mean(axis=1), kind="stable")
    sorted_shard = np.empty(n, dtype=int)
    sorted_shard[order] = np.arange(n) * n_clients // n
    use_sorted = rng.random(n) < skew
    shard = np.where(use_sorted, sorted_shard, random_shard)
    return [windows.take(np.flatnonzero(shard == c)) for c in range(n_clients)]


@dataclass
class Client:
    client_id: int
    normal: blue.WindowSet
    attacks: blue.WindowSet


def local_update(
    global_ens: blue.DetectorEnsemble, client: Client, steps: int, lr: float, batch_size: int, rng: np.random.Generator
) -> ModelUpdate:
    """Plain gradient steps of the hardening loss on the client's shard; the update is the parameter delta.

    Plain SGD keeps the delta proportional to the shard's gradient. Adam's
    per-coordinate normalisation would give every coordinate the same step size
    and bury the shared direction under client-specific noise.
    """
    normal, attacks = client.normal, client.attacks
    local = global_ens.copy()
    for _ in range(steps):
        k = batch_size // 2 if len(attacks) else batch_size
        parts = [normal.take(rng.integers(len(normal), size=k))]
        if len(attacks):
            a = attacks.take(rng.integers(len(attacks), size=batch_size - k))
            parts.append(blue.WindowSet(a.X, np.full(len(a), blue.ATTACK), a.origins, a.epochs))
        _, grads = blue.hardening_loss(local, blue.WindowSet.concat(parts))
        local.lstm_params.data -= lr * grads["lstm"].data
        local.ae_params.data -= lr * grads["ae"].data
    delta = local.differentiable_params() - global_ens.differentiable_params()
    return ModelUpdate(client.client_id, delta, len(normal) + len(attacks))


@dataclass
class RoundReport:
    round: int
    agg_kind: str
    cosine_to_honest: float
    global_fpr: float
    global_f1: float
    selected: int | None = None


def run_round(
    global_ens: blue.DetectorEnsemble,
    clients: Sequence[Client],
    local_steps: int,
    poison: PoisonSpec | None,
    agg: AggregatorSpec,
    rng: np.random.Generator,
    lr: float = 1e-2,
    batch_size: int = 128,
    round_index: int = 0,
    Z_cal: blue.WindowSet | None = None,
    eval_normal: blue.WindowSet | None = None,
    eval_runs: Sequence[metrics.LabeledRun] | None = None,
) -> tuple[blue.DetectorEnsemble, RoundReport, list[ModelUpdate]]:
    honest = [local_update(global_ens, c, local_steps, lr, batch_size, rng) for c in clients]
    bad = set(poison.clients) if poison else set()
    sent = [ModelUpdate(u.client_id, poison.apply(u.delta), u.sample_count) if u.client_id in bad else u for u in honest]
    agg_vec = aggregate(sent, agg)
    honest_mean = np.mean([u.delta for u in honest if u.client_id not in bad], axis=0)
    new = global_ens.copy()
    new.set_differentiable_params(global_ens.differentiable_params() + agg_vec)
    if Z_cal is not None:
        new = blue.recalibrate(new, Z_cal)
    fpr = metrics.window_fpr(new, eval_normal) if eval_normal is not None else float("nan")
    f1 = metrics.evaluate(new, eval_runs).f1 if eval_runs else float("nan")
    selected = None
    if agg.kind == "krum":
        selected = krum_select(sent, agg.f).client_id
    rep = RoundReport(round_index, agg.kind, cosine(agg_vec, honest_mean), fpr, f1, selected)
    return new, rep, sent


def write_round_csv(path: str | Path, reports: Sequence[RoundReport]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ROUND_HEADER)
        for r in reports:
            wr.writerow([r.round, r.agg_kind, f"{r.cosine_to_honest:.10g}", f"{r.global_fpr:.10g}", f"{r.global_f1:.10g}"])
