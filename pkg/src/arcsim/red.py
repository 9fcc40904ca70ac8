"""The attacker: a PPO agent acting on actuator setpoints of the twin.

The environment runs ``n_envs`` plants side by side. Each step the agent
nudges the three setpoints, the plant advances one sampling period, the frozen
defender scores the newest sensor window, and the reward trades disruption
against that score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from arcsim import blue, nn
from arcsim import plant as P

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Reward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardConfig:
    """Weights and bands of the attack reward over the monitored (C_A, T)."""

    w_disrupt: float = 1.0
    w_detect: float = 1.0
    setpoints: tuple[float, float] = (0.8773, 324.48)
    halfbands: tuple[float, float] = (0.2, 10.0)
    safety_low: tuple[float, float] = (0.3, 290.0)
    safety_high: tuple[float, float] = (1.2, 350.0)
    weights: tuple[float, float] = (0.5, 0.5)
    breach_bonus: float = 1.0

    def __post_init__(self):
        if self.w_disrupt < 0 or self.w_detect < 0:
            raise ValueError("reward weights must be non-negative")
        for sp, hb, lo, hi in zip(self.setpoints, self.halfbands, self.safety_low, self.safety_high):
            if not (lo < sp - hb and sp + hb < hi):
                raise ValueError("safety limits must lie outside the setpoint band")


def breached(x: np.ndarray, cfg: RewardConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.any((x < np.array(cfg.safety_low)) | (x > np.array(cfg.safety_high)), axis=-1)


def disruption(x: np.ndarray, cfg: RewardConfig, include_breach: bool = True) -> np.ndarray:
    """Weighted clipped deviation from setpoints plus the breach bonus."""
    x = np.asarray(x, dtype=float)
    dev = np.abs(x - np.array(cfg.setpoints)) / np.array(cfg.halfbands)
    val = np.sum(np.array(cfg.weights) * np.clip(dev, 0.0, 1.0), axis=-1)
    if include_breach:
        val = val + cfg.breach_bonus * breached(x, cfg)
    return val


def reward(x_next, det, cfg: RewardConfig, disrupt: np.ndarray | float | None = None):
    """``w_disrupt * Disruption(x_next) - w_detect * det``."""
    det = np.asarray(det, dtype=float)
    if np.any((det < 0) | (det > 1)):
        raise ValueError("detector score must lie in [0, 1]")
    if disrupt is None:
        disrupt = disruption(x_next, cfg)
    out = cfg.w_disrupt * np.asarray(disrupt) - cfg.w_detect * det
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------


@dataclass
class EnvConfig:
    horizon: int = 240
    n_envs: int = 16
    max_delta: tuple[float, float, float] = (0.25, 1.0, 0.01)
    noise_sigma: tuple[float, ...] = tuple(P.DEFAULT_NOISE)
    start_perturbation: tuple[float, float] = (0.01, 0.5)
    setpoint_sigma: tuple[float, float, float] = (0.5, 2.0, 0.02)
    setpoint_tau: float = 60.0
    reward: RewardConfig = field(default_factory=RewardConfig)
    limits: P.ActuatorLimits = field(default_factory=P.ActuatorLimits)
    plant: P.PlantParams = field(default_factory=P.PlantParams)


@dataclass
class MdpState:
    sensors: np.ndarray
    prev_score: np.ndarray
    time_frac: np.ndarray


class AttackEnv:
    """Batch of twins driven by setpoint deltas and watched by a frozen defender."""

    def __init__(self, cfg: EnvConfig, defender: blue.DetectorEnsemble, seed: int = 0):
        self.cfg = cfg
        self.defender = defender
        self.rng = np.random.default_rng(seed)
        self.E = cfg.n_envs
        self.L = defender.cfg.window_len
        self.noise = np.asarray(cfg.noise_sigma, dtype=float)
        self.max_delta = np.asarray(cfg.max_delta, dtype=float)
        self.nominal = cfg.plant.nominal_actuators().as_array()
        self.x = np.zeros((self.E, 2))
        self.u = np.zeros((self.E, 3))
        self.dev = np.zeros((self.E, 3))  # operator setpoint wander
        self.offset = np.zeros((self.E, 3))  # attacker's cumulative setpoint change
        self._ou_a = math.exp(-1.0 / cfg.setpoint_tau)
        self._ou_innov = np.asarray(cfg.setpoint_sigma) * math.sqrt(1.0 - self._ou_a**2)
        self.hist = np.zeros((self.E, self.L, P.N_CHANNELS))
        self.prev = np.zeros(self.E)
        self.t = np.zeros(self.E, dtype=int)
        self.active = np.zeros(self.E, dtype=bool)
        self._eq_cache: dict[tuple, np.ndarray] = {}

    @property
    def obs_dim(self) -> int:
        return P.N_CHANNELS + 2

    def _equilibrium(self, u: np.ndarray) -> np.ndarray:
        key = tuple(np.round(u, 6))
        if key not in self._eq_cache:
            self._eq_cache[key] = P.find_equilibrium(self.cfg.plant, u)
        return self._eq_cache[key]

    def _wander(self, dev: np.ndarray) -> np.ndarray:
        return self._ou_a * dev + self._ou_innov * self.rng.standard_normal(dev.shape)

    def _reset_one(self, i: int) -> None:
        cfg = self.cfg
        dev = np.asarray(cfg.setpoint_sigma) * self.rng.standard_normal(3)
        u = np.round(cfg.limits.clip(self.nominal + dev), 3)
        x = self._equilibrium(u) + np.asarray(cfg.start_perturbation) * self.rng.uniform(-1, 1, 2)
        # lead-in of normal operation so the first window is full
        for k in range(self.L):
            u = cfg.limits.clip(self.nominal + dev)
            x = P.advance(x, u, cfg.plant)
            self.hist[i, k] = P.observe_array(x, u, self.noise, self.rng)
            dev = self._wander(dev)
        self.x[i], self.u[i], self.dev[i] = x, u, dev
        self.offset[i] = 0.0
        self.prev[i] = 0.0
        self.t[i] = 0
        self.active[i] = True

    def reset(self) -> np.ndarray:
        for i in range(self.E):
            self._reset_one(i)
        return self.observation()

    def observation(self) -> np.ndarray:
        d = self.defender
        sens = (self.hist[:, -1] - d.norm_mean) / d.norm_std
        return np.concatenate(
            [sens, self.prev[:, None], (self.t / self.cfg.horizon)[:, None]], axis=1
        )

    def mdp_state(self, i: int) -> MdpState:
        return MdpState(self.hist[i, -1].copy(), self.prev[i].copy(), self.t[i] / self.cfg.horizon)

    def apply_action(self, delta: np.ndarray) -> np.ndarray:
        """Add the clipped delta to the attacker offset; commands = nominal + wander + offset."""
        lim = self.cfg.limits
        delta = np.clip(delta, -self.max_delta, self.max_delta)
        base = self.nominal + self.dev
        self.offset = lim.clip(base + self.offset + delta) - base
        self.u = base + self.offset
        return self.u

    def step(self, delta: np.ndarray):
        """Advance every plant. Returns ``(obs, reward, done, info)``.

        Finished plants are reset automatically; ``info`` carries the
        pre-reset state, score and disruption of this step.
        """
        cfg = self.cfg
        self.apply_action(np.asarray(delta, dtype=float))
        self.x = P.advance(self.x, self.u, cfg.plant)
        y = P.observe_array(self.x, self.u, self.noise, self.rng)
        self.hist = np.concatenate([self.hist[:, 1:], y[:, None]], axis=1)
        det = blue.score_batch(self.defender, self.hist)[2]
        dis = disruption(self.x, cfg.reward)
        r = reward(self.x, det, cfg.reward, disrupt=dis)
        self.prev = det
        self.t += 1
        br = breached(self.x, cfg.reward)
        done = br | (self.t >= cfg.horizon)
        info = {
            "x": self.x.copy(),
            "u": self.u.copy(),
            "sensors": y,
            "score": det.copy(),
            "disruption": dis,
            "breach": br,
            "alarm_over": det > self.defender.threshold,
        }
        info["offset"] = self.offset.copy()
        self.dev = self._wander(self.dev)
        obs = self.observation()
        for i in np.flatnonzero(done):
            self._reset_one(i)
        obs[done] = self.observation()[done]
        return obs, r, done, info


def env_step(env: AttackEnv, a: np.ndarray):
    """Single-call wrapper matching the documented contract."""
    return env.step(a)


# ---------------------------------------------------------------------------
# Policy / value
# ---------------------------------------------------------------------------


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 3e-4
    epochs: int = 10
    minibatch: int = 256
    rollout_steps: int = 128
    hidden: int = 64
    init_log_std: float = -0.5
    max_grad_norm: float = 1.0


def policy_network(obs_dim: int, act_dim: int, hidden: int) -> nn.Network:
    return nn.Network(
        [
            nn.Dense(obs_dim, hidden),
            nn.Activation("tanh", hidden),
            nn.Dense(hidden, hidden),
            nn.Activation("tanh", hidden),
            nn.Dense(hidden, act_dim),
        ],
        prefix="pi.",
    )


def value_network(obs_dim: int, hidden: int) -> nn.Network:
    return nn.Network(
        [
            nn.Dense(obs_dim, hidden),
            nn.Activation("tanh", hidden),
            nn.Dense(hidden, hidden),
            nn.Activation("tanh", hidden),
            nn.Dense(hidden, 1),
        ],
        prefix="v.",
    )


@dataclass
class RedAgent:
    obs_dim: int
    act_dim: int
    max_delta: np.ndarray
    cfg: PPOConfig
    policy: nn.ParamVector
    log_std: np.ndarray
    value: nn.ParamVector
    pi_opt: nn.AdamState | None = None
    std_opt: nn.AdamState | None = None
    v_opt: nn.AdamState | None = None

    def __post_init__(self):
        self.pi_net = policy_network(self.obs_dim, self.act_dim, self.cfg.hidden)
        self.v_net = value_network(self.obs_dim, self.cfg.hidden)
        if self.pi_opt is None:
            self.pi_opt = nn.AdamState.for_params(self.policy)
            self.std_opt = nn.AdamState(np.zeros_like(self.log_std), np.zeros_like(self.log_std))
            self.v_opt = nn.AdamState.for_params(self.value)

    @classmethod
    def create(cls, obs_dim: int, max_delta: Sequence[float], cfg: PPOConfig | None = None, seed: int = 0) -> RedAgent:
        cfg = cfg or PPOConfig()
        rng = np.random.default_rng(seed)
        max_delta = np.asarray(max_delta, dtype=float)
        act_dim = len(max_delta)
        pi = policy_network(obs_dim, act_dim, cfg.hidden).init_params(rng)
        pi["pi.l4.W"][...] *= 0.01
        v = value_network(obs_dim, cfg.hidden).init_params(rng)
        return cls(obs_dim, act_dim, max_delta, cfg, pi, np.full(act_dim, cfg.init_log_std), v)

    def copy(self) -> RedAgent:
        def cp(s):
            return nn.AdamState(s.m.copy(), s.v.copy(), s.t)

        return RedAgent(
            self.obs_dim,
            self.act_dim,
            self.max_delta.copy(),
            replace(self.cfg),
            self.policy.copy(),
            self.log_std.copy(),
            self.value.copy(),
            cp(self.pi_opt),
            cp(self.std_opt),
            cp(self.v_opt),
        )

    def fingerprint(self) -> bytes:
        return self.policy.data.tobytes() + self.log_std.tobytes() + self.value.data.tobytes()

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.pi_net(self.policy, obs)

    def values(self, obs: np.ndarray) -> np.ndarray:
        return self.v_net(self.value, obs)[:, 0]

    def squash(self, u: np.ndarray) -> np.ndarray:
        return self.max_delta * np.tanh(u)

    def act(self, obs: np.ndarray, rng: np.random.Generator, deterministic: bool = False):
        """Sample pre-squash ``u``; returns ``(u, action, log_prob)``.

        The log-probability is of the squashed action, including the
        change-of-variables term.
        """
        mu = self.mean(obs)
        if deterministic:
            u = mu
        else:
            u = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        logp, _, _ = nn.gaussian_log_prob(u, mu, self.log_std)
        logp = logp - nn.tanh_squash_log_det(u, self.max_delta)
        return u, self.squash(u), logp


# ---------------------------------------------------------------------------
# Advantage estimation and PPO update
# ---------------------------------------------------------------------------


def gae(rewards, values, gamma: float, lam: float, dones=None):
    """Generalised advantage estimation along the first axis.

    ``values`` has one more entry than ``rewards`` (the bootstrap value).
    ``dones[t]`` cuts the recursion after step ``t``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(values) != len(rewards) + 1:
        raise ValueError("values must have len(rewards) + 1 entries")
    if dones is None:
        dones = np.zeros_like(rewards, dtype=bool)
    nonterminal = 1.0 - np.asarray(dones, dtype=float)
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] * nonterminal[t] - values[t]
        last = delta + gamma * lam * nonterminal[t] * last
        adv[t] = last
    return adv, adv + values[:-1]


def clipped_surrogate(ratio, adv, clip_eps: float):
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)`` and its derivative in ``r``."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    obj = np.minimum(unclipped, clipped)
    inside = (ratio >= 1.0 - clip_eps) & (ratio <= 1.0 + clip_eps)
    d_ratio = np.where((unclipped <= clipped) | inside, adv, 0.0)
    return obj, d_ratio


@dataclass
class Batch:
    obs: np.ndarray
    u: np.ndarray
    logp: np.ndarray
    adv: np.ndarray
    returns: np.ndarray


class UpdateAborted(RuntimeError):
    pass


def ppo_update(agent: RedAgent, batch: Batch, rng: np.random.Generator, clip_eps: float | None = None, epochs: int | None = None, minibatch: int | None = None) -> dict:
    """Clipped-objective PPO on one batch, in place on ``agent``.

    Advantages are normalised over the batch. On a non-finite loss the update
    is abandoned and every parameter restored.
    """
    cfg = agent.cfg
    clip_eps = cfg.clip_eps if clip_eps is None else clip_eps
    epochs = cfg.epochs if epochs is None else epochs
    minibatch = cfg.minibatch if minibatch is None else minibatch
    adv = batch.adv - batch.adv.mean()
    std = batch.adv.std()
    if std > 1e-8:
        adv = adv / std
    backup = agent.copy()
    n = len(batch.obs)
    clip_fracs, kls, losses = [], [], []
    try:
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, minibatch):
                idx = order[start : start + minibatch]
                _minibatch_step(agent, batch, adv, idx, clip_eps, clip_fracs, kls, losses)
    except (UpdateAborted, nn.NonFiniteError, FloatingPointError) as exc:
        logger.warning("PPO update aborted: %s", exc)
        for name in ("policy", "log_std", "value", "pi_opt", "std_opt", "v_opt"):
            setattr(agent, name, getattr(backup, name))
        return {"aborted": True, "clip_fraction": float("nan"), "approx_kl": float("nan"), "loss": float("nan")}
    return {
        "aborted": False,
        "clip_fraction": float(np.mean(clip_fracs)) if clip_fracs else 0.0,
        "approx_kl": float(np.mean(kls)) if kls else 0.0,
        "loss": float(np.mean(losses)) if losses else 0.0,
    }


def _minibatch_step(agent, batch, adv_all, idx, clip_eps, clip_fracs, kls, losses):
    cfg = agent.cfg
    obs, u, old = batch.obs[idx], batch.u[idx], batch.logp[idx]
    adv, ret = adv_all[idx], batch.returns[idx]
    m = len(idx)
    mu, tape = agent.pi_net.forward(agent.policy, obs)
    logp, dmu, dls = nn.gaussian_log_prob(u, mu, agent.log_std)
    logp = logp - nn.tanh_squash_log_det(u, agent.max_delta)
    log_ratio = logp - old
    ratio = np.exp(log_ratio)
    obj, d_ratio = clipped_surrogate(ratio, adv, clip_eps)
    entropy = float(np.sum(agent.log_std + 0.5 * (1.0 + nn.LOG_2PI)))
    v, vtape = agent.v_net.forward(agent.value, obs)
    verr = v[:, 0] - ret
    loss = -obj.mean() - cfg.entropy_coef * entropy + cfg.value_coef * np.mean(verr * verr)
    if not math.isfinite(loss):
        raise UpdateAborted("non-finite PPO loss")
    # d(-obj)/d logp = -d_ratio * ratio
    dlogp = -(d_ratio * ratio) / m
    g_pi, _ = nn.backward(tape, agent.policy, dlogp[:, None] * dmu)
    g_std = (dlogp[:, None] * dls).sum(axis=0) - cfg.entropy_coef
    g_v, _ = nn.backward(vtape, agent.value, (2.0 * cfg.value_coef * verr / m)[:, None])
    nn.adam_step(agent.policy, g_pi, agent.pi_opt, lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    ls = nn.ParamVector(agent.log_std.copy(), {"log_std": (0, (agent.act_dim,))})
    nn.adam_step(ls, g_std, agent.std_opt, lr=cfg.lr)
    agent.log_std = np.clip(ls.data, -3.0, 1.0)
    nn.adam_step(agent.value, g_v, agent.v_opt, lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    clip_fracs.append(float(np.mean(np.abs(ratio - 1.0) > clip_eps)))
    kls.append(float(np.mean((ratio - 1.0) - log_ratio)))
    losses.append(float(loss))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class Rollout:
    obs: np.ndarray  # (T, E, obs_dim)
    u: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray  # (T, E)
    dones: np.ndarray
    values: np.ndarray  # (T + 1, E)
    scores: np.ndarray
    disruption: np.ndarray


def collect(agent: RedAgent, env: AttackEnv, obs: np.ndarray, steps: int, rng: np.random.Generator):
    T, E = steps, env.E
    buf = {
        "obs": np.zeros((T, E, env.obs_dim)),
        "u": np.zeros((T, E, agent.act_dim)),
        "logp": np.zeros((T, E)),
        "rewards": np.zeros((T, E)),
        "dones": np.zeros((T, E), dtype=bool),
        "values": np.zeros((T + 1, E)),
        "scores": np.zeros((T, E)),
        "disruption": np.zeros((T, E)),
    }
    for t in range(T):
        u, a, logp = agent.act(obs, rng)
        buf["obs"][t], buf["u"][t], buf["logp"][t] = obs, u, logp
        buf["values"][t] = agent.values(obs)
        obs, r, done, info = env.step(a)
        buf["rewards"][t], buf["dones"][t] = r, done
        buf["scores"][t], buf["disruption"][t] = info["score"], info["disruption"]
    buf["values"][T] = agent.values(obs)
    return Rollout(**buf), obs


@dataclass
class TrainResult:
    agent: RedAgent
    cycle_reward: list[float]
    cycle_score: list[float]
    cycle_disruption: list[float]
    diagnostics: list[dict]

    @property
    def final_decile_reward(self) -> float:
        k = max(1, len(self.cycle_reward) // 10)
        return float(np.mean(self.cycle_reward[-k:])) if self.cycle_reward else float("nan")

    @property
    def first_decile_reward(self) -> float:
        k = max(1, len(self.cycle_reward) // 10)
        return float(np.mean(self.cycle_reward[:k])) if self.cycle_reward else float("nan")


def train_attacker(
    agent: RedAgent,
    defender: blue.DetectorEnsemble,
    cycles: int,
    env_cfg: EnvConfig | None = None,
    seed: int = 0,
) -> TrainResult:
    """Collect / GAE / PPO cycles against a frozen defender; returns an updated copy."""
    env_cfg = env_cfg or EnvConfig()
    new = agent.copy()
    if cycles <= 0:
        return TrainResult(new, [], [], [], [])
    frozen = defender.differentiable_params().tobytes()
    rng = np.random.default_rng(seed)
    env = AttackEnv(env_cfg, defender, seed=int(rng.integers(2**31)))
    obs = env.reset()
    res = TrainResult(new, [], [], [], [])
    for cycle in range(cycles):
        ro, obs = collect(new, env, obs, new.cfg.rollout_steps, rng)
        adv, ret = gae(ro.rewards, ro.values, new.cfg.gamma, new.cfg.lam, ro.dones)
        batch = Batch(
            ro.obs.reshape(-1, env.obs_dim),
            ro.u.reshape(-1, new.act_dim),
            ro.logp.ravel(),
            adv.ravel(),
            ret.ravel(),
        )
        diag = ppo_update(new, batch, rng)
        res.cycle_reward.append(float(ro.rewards.mean()))
        res.cycle_score.append(float(ro.scores.mean()))
        res.cycle_disruption.append(float(ro.disruption.mean()))
        res.diagnostics.append(diag)
    if defender.differentiable_params().tobytes() != frozen:
        raise RuntimeError("defender parameters changed during attacker training")
    return res


@dataclass
class Episode:
    """One rolled-out attack episode for a single plant."""

    states: np.ndarray
    actuators: np.ndarray
    sensors: np.ndarray  # includes the lead-in rows
    lead_in: int
    scores: np.ndarray
    rewards: np.ndarray
    disruption: np.ndarray
    offsets: np.ndarray | None = None  # attacker setpoint offset per step

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    def stealthy(self, threshold: float) -> bool:
        return bool(np.all(self.scores <= threshold))


def rollout_episodes(
    agent: RedAgent,
    defender: blue.DetectorEnsemble,
    n_episodes: int,
    env_cfg: EnvConfig,
    seed: int,
    deterministic: bool = False,
) -> list[Episode]:
    """Run whole episodes with the stochastic (or mean) policy."""
    cfg = replace(env_cfg, n_envs=n_episodes)
    env = AttackEnv(cfg, defender, seed=seed)
    rng = np.random.default_rng(seed + 1)
    obs = env.reset()
    lead = env.hist.copy()
    E, L = n_episodes, env.L
    alive = np.ones(E, dtype=bool)
    rec = {k: [[] for _ in range(E)] for k in ("x", "u", "y", "score", "r", "dis", "off")}
    for _ in range(cfg.horizon):
        _, a, _ = agent.act(obs, rng, deterministic)
        obs, r, done, info = env.step(a)
        for i in np.flatnonzero(alive):
            rec["x"][i].append(info["x"][i])
            rec["u"][i].append(info["u"][i])
            rec["y"][i].append(info["sensors"][i])
            rec["score"][i].append(info["score"][i])
            rec["r"][i].append(r[i])
            rec["dis"][i].append(info["disruption"][i])
            rec["off"][i].append(info["offset"][i])
        alive &= ~done
        if not alive.any():
            break
    out = []
    for i in range(E):
        out.append(
            Episode(
                np.array(rec["x"][i]),
                np.array(rec["u"][i]),
                np.concatenate([lead[i], np.array(rec["y"][i])]),
                L,
                np.array(rec["score"][i]),
                np.array(rec["r"][i]),
                np.array(rec["dis"][i]),
                np.array(rec["off"][i]),
            )
        )
    return out
