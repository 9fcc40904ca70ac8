"""Non-isothermal CSTR twin: physics, RK4 integration, sensors, faults, GRU residual.

State ``x = (C_A, T)``; actuators ``u = (T_c_cmd, F_cmd, C_Af_cmd)``. The
array functions accept any leading batch shape so many plants can be advanced
together.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from arcsim import nn

logger = logging.getLogger(__name__)

SAMPLE_PERIOD_MIN = 5.0 / 60.0
SAMPLE_PERIOD_S = 5.0
RK4_H_MAX = 0.05

CHANNELS = ("C_A", "T", "Tc_cmd", "F_cmd", "CAf_cmd")
N_CHANNELS = len(CHANNELS)
ACTUATORS = ("T_c_cmd", "F_cmd", "C_Af_cmd")

# Arrhenius guard
T_MIN_K = 100.0
MAX_EXPONENT = 700.0


class IntegrationError(FloatingPointError):
    """Non-finite or out-of-domain value during derivative evaluation."""

    def __init__(self, msg: str, state=None):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class PlantParams:
    F: float = 100.0
    V: float = 100.0
    C_Af: float = 1.0
    k0: float = 7.2e10
    E_over_R: float = 8750.0
    T_f: float = 350.0
    dH: float = -5.0e4
    rho_Cp: float = 239.0
    UA: float = 5.0e4
    T_c: float = 300.0

    def __post_init__(self):
        for name in ("F", "V", "C_Af", "rho_Cp", "UA", "E_over_R", "T_f", "T_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PlantParams.{name} must be positive")
        if self.k0 < 0:
            raise ValueError("PlantParams.k0 must be non-negative")

    def nominal_actuators(self) -> ActuatorVector:
        return ActuatorVector(self.T_c, self.F, self.C_Af)


@dataclass(frozen=True)
class ProcessState:
    C_A: float
    T: float

    def __post_init__(self):
        if self.C_A < 0 or not self.T > 0:
            raise ValueError(f"invalid process state {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.C_A, self.T])


@dataclass(frozen=True)
class ActuatorLimits:
    T_c_cmd: tuple[float, float] = (285.0, 315.0)
    F_cmd: tuple[float, float] = (70.0, 130.0)
    C_Af_cmd: tuple[float, float] = (0.7, 1.3)

    @property
    def low(self) -> np.ndarray:
        return np.array([self.T_c_cmd[0], self.F_cmd[0], self.C_Af_cmd[0]])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.T_c_cmd[1], self.F_cmd[1], self.C_Af_cmd[1]])

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.low, self.high)


@dataclass(frozen=True)
class ActuatorVector:
    T_c_cmd: float
    F_cmd: float
    C_Af_cmd: float
    limits: ActuatorLimits = field(default_factory=ActuatorLimits, compare=False)

    def __post_init__(self):
        u = self.as_array()
        if np.any(u < self.limits.low) or np.any(u > self.limits.high):
            raise ValueError(f"actuator command {u} outside {self.limits}")

    def as_array(self) -> np.ndarray:
        return np.array([self.T_c_cmd, self.F_cmd, self.C_Af_cmd])


@dataclass(frozen=True)
class DisturbanceVector:
    d_Tf: float = 0.0
    d_noise_seed: int = 0


# ---------------------------------------------------------------------------
# Physics
# ---------------------------------------------------------------------------


def rhs(x: np.ndarray, u: np.ndarray, p: PlantParams, d_Tf: float = 0.0) -> np.ndarray:
    """Mass and energy balances on arrays; ``x[..., :2]``, ``u[..., :3]``."""
    CA, T = x[..., 0], x[..., 1]
    Tc, F, CAf = u[..., 0], u[..., 1], u[..., 2]
    if np.any(T < T_MIN_K) or np.any(p.E_over_R / T > MAX_EXPONENT):
        raise IntegrationError(f"Arrhenius term out of domain at state {x!r}", state=x)
    rate = p.k0 * np.exp(-p.E_over_R / T) * CA
    dil = F / p.V
    dCA = dil * (CAf - CA) - rate
    dT = dil * (p.T_f + d_Tf - T) + (-p.dH / p.rho_Cp) * rate - p.UA / (p.rho_Cp * p.V) * (T - Tc)
    out = np.stack([dCA, dT], axis=-1)
    if not np.all(np.isfinite(out)):
        raise IntegrationError(f"non-finite derivative at state {x!r}", state=x)
    return out


def physics_derivatives(
    s: ProcessState, a: ActuatorVector, p: PlantParams, d: DisturbanceVector | None = None
) -> tuple[float, float]:
    """Right-hand sides of the CSTR balances with actuator commands substituted."""
    d_Tf = d.d_Tf if d is not None else 0.0
    out = rhs(s.as_array(), a.as_array(), p, d_Tf)
    return float(out[0]), float(out[1])


def rk4_array(
    x: np.ndarray,
    u: np.ndarray,
    p: PlantParams,
    h: float,
    extra: np.ndarray | float = 0.0,
    d_Tf: float = 0.0,
) -> np.ndarray:
    """One classical RK4 step with an optional constant additive derivative."""
    if not h > 0:
        raise ValueError("step size must be positive")
    k1 = rhs(x, u, p, d_Tf) + extra
    k2 = rhs(x + 0.5 * h * k1, u, p, d_Tf) + extra
    k3 = rhs(x + 0.5 * h * k2, u, p, d_Tf) + extra
    k4 = rhs(x + h * k3, u, p, d_Tf) + extra
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite state after RK4 step", state=x)
    neg = out[..., 0] < 0
    if np.any(neg):
        logger.info("C_A clamped at 0 (%d plant(s))", int(np.count_nonzero(neg)))
        out[..., 0] = np.maximum(out[..., 0], 0.0)
    return out


def step_rk4(s: ProcessState, a: ActuatorVector, p: PlantParams, h: float) -> ProcessState:
    x = rk4_array(s.as_array(), a.as_array(), p, h)
    return ProcessState(float(x[0]), float(x[1]))


def advance(
    x: np.ndarray,
    u: np.ndarray,
    p: PlantParams,
    period: float = SAMPLE_PERIOD_MIN,
    h_max: float = RK4_H_MAX,
    extra: np.ndarray | float = 0.0,
    d_Tf: float = 0.0,
) -> np.ndarray:
    """Advance one sampling period using equal RK4 sub-steps no longer than ``h_max``."""
    n = max(1, math.ceil(period / h_max - 1e-12))
    h = period / n
    for _ in range(n):
        x = rk4_array(x, u, p, h, extra, d_Tf)
    return x


def _equilibrium_T_residual(T: float, u: np.ndarray, p: PlantParams) -> float:
    Tc, F, CAf = u
    k = p.k0 * math.exp(-p.E_over_R / T)
    dil = F / p.V
    CA = dil * CAf / (dil + k)
    return float(rhs(np.array([CA, T]), u, p)[1])


def find_equilibrium(
    p: PlantParams,
    u: np.ndarray | ActuatorVector | None = None,
    T_range: tuple[float, float] = (250.0, 500.0),
    branch: int = 0,
) -> np.ndarray:
    """Steady state ``(C_A, T)``; ``branch`` indexes roots in increasing T."""
    if u is None:
        u = p.nominal_actuators()
    if isinstance(u, ActuatorVector):
        u = u.as_array()
    u = np.asarray(u, dtype=float)
    grid = np.linspace(*T_range, 2001)
    k = p.k0 * np.exp(-p.E_over_R / grid)
    dil = u[1] / p.V
    CA = dil * u[2] / (dil + k)
    vals = rhs(np.stack([CA, grid], axis=-1), np.broadcast_to(u, (len(grid), 3)), p)[:, 1]
    roots = []
    for lo, hi, flo, fhi in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if flo == 0.0:
            roots.append(lo)
        elif flo * fhi < 0:
            roots.append(brentq(_equilibrium_T_residual, lo, hi, args=(u, p), xtol=1e-13))
    if len(roots) <= branch:
        raise ValueError(f"no equilibrium branch {branch} in {T_range}")
    T = roots[branch]
    k = p.k0 * math.exp(-p.E_over_R / T)
    dil = u[1] / p.V
    return np.array([dil * u[2] / (dil + k), T])


# ---------------------------------------------------------------------------
# Sensors and faults
# ---------------------------------------------------------------------------

DEFAULT_NOISE = np.array([0.005, 0.25, 0.1, 0.5, 0.005])


def observe_array(x: np.ndarray, u: np.ndarray, sigma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    clean = np.concatenate([x, u], axis=-1)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("noise sigmas must be non-negative")
    return clean + sigma * rng.standard_normal(clean.shape)


def observe(
    s: ProcessState, a: ActuatorVector, noise_sigma: Sequence[float], rng: np.random.Generator
) -> np.ndarray:
    """Sensor vector ``[C_A, T, T_c_cmd, F_cmd, C_Af_cmd]`` plus Gaussian noise.

    Determinism is inherited from ``rng``: two generators in the same state
    produce the same vector.
    """
    return observe_array(s.as_array(), a.as_array(), np.asarray(noise_sigma), rng)


FAULT_KINDS = ("sensor_step_bias", "stuck_actuator", "ramp_drift")


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    channel: int
    magnitude: float
    start_step: int
    duration: int

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.start_step < 0 or self.duration < 1:
            raise ValueError("fault needs start_step >= 0 and duration >= 1")

    def active(self, t: int) -> bool:
        return self.start_step <= t < self.start_step + self.duration


def apply_fault(
    vec: np.ndarray, f: FaultSpec, t: int, held: np.ndarray | None = None
) -> np.ndarray:
    """Return a copy of ``vec`` with the fault applied at step ``t``.

    ``held`` is the vector observed at ``f.start_step``; a stuck channel is
    frozen at ``held[channel]``. At the start step itself ``vec`` is used.
    """
    vec = np.array(vec, dtype=float)
    if not 0 <= f.channel < vec.shape[-1]:
        raise IndexError(f"fault channel {f.channel} invalid for vector of size {vec.shape[-1]}")
    if not f.active(t):
        return vec
    if f.kind == "sensor_step_bias":
        vec[..., f.channel] += f.magnitude
    elif f.kind == "ramp_drift":
        vec[..., f.channel] += f.magnitude * (t - f.start_step) / f.duration
    else:
        if held is None:
            if t != f.start_step:
                raise ValueError("stuck_actuator needs the vector held at start_step")
            held = vec
        vec[..., f.channel] = np.asarray(held)[..., f.channel]
    return vec


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """A simulated run: true states, commanded actuators, sensor readings, labels."""

    states: np.ndarray  # (n, 2)
    actuators: np.ndarray  # (n, 3)
    sensors: np.ndarray  # (n, 5)
    labels: np.ndarray  # (n,) 0 normal / 1 attack / 2 fault

    def __len__(self) -> int:
        return len(self.states)


def simulate(
    p: PlantParams,
    x0: np.ndarray,
    actuator_seq: np.ndarray,
    rng: np.random.Generator,
    noise_sigma: np.ndarray = DEFAULT_NOISE,
    faults: Iterable[FaultSpec] = (),
    extra: np.ndarray | float = 0.0,
    d: DisturbanceVector | None = None,
    labels: np.ndarray | None = None,
) -> Trajectory:
    """Run the plant over ``len(actuator_seq)`` samples.

    Row ``k`` holds the state at step ``k``, the command applied during step
    ``k`` and the sensor reading of that state. Faults act on sensor vectors.
    """
    actuator_seq = np.asarray(actuator_seq, dtype=float)
    n = len(actuator_seq)
    d_Tf = d.d_Tf if d is not None else 0.0
    faults = list(faults)
    states = np.empty((n, 2))
    sensors = np.empty((n, N_CHANNELS))
    x = np.asarray(x0, dtype=float).copy()
    held: dict[int, np.ndarray] = {}
    for k in range(n):
        states[k] = x
        y = observe_array(x, actuator_seq[k], noise_sigma, rng)
        for i, f in enumerate(faults):
            if k == f.start_step:
                held[i] = y.copy()
            y = apply_fault(y, f, k, held.get(i))
        sensors[k] = y
        x = advance(x, actuator_seq[k], p, extra=extra, d_Tf=d_Tf)
    if labels is None:
        labels = np.zeros(n, dtype=int)
        for f in faults:
            labels[f.start_step : f.start_step + f.duration] = 2
    return Trajectory(states, actuator_seq.copy(), sensors, np.asarray(labels, dtype=int))


def ou_setpoints(
    p: PlantParams,
    n: int,
    rng: np.random.Generator,
    sigma: Sequence[float] = (1.0, 2.0, 0.02),
    tau_steps: float = 60.0,
    limits: ActuatorLimits | None = None,
) -> np.ndarray:
    """Normal operating drift: Ornstein-Uhlenbeck wander of each setpoint around nominal.

    ``sigma`` is the stationary standard deviation per actuator.
    """
    limits = limits or ActuatorLimits()
    nominal = p.nominal_actuators().as_array()
    sigma = np.asarray(sigma, dtype=float)
    a = math.exp(-1.0 / tau_steps)
    innov = sigma * math.sqrt(1.0 - a * a)
    dev = sigma * rng.standard_normal(3)
    out = np.empty((n, 3))
    for k in range(n):
        out[k] = limits.clip(nominal + dev)
        dev = a * dev + innov * rng.standard_normal(3)
    return out


def normal_episode(
    p: PlantParams,
    n: int,
    rng: np.random.Generator,
    noise_sigma: np.ndarray = DEFAULT_NOISE,
    setpoint_sigma: Sequence[float] = (1.0, 2.0, 0.02),
    warmup: int = 60,
    faults: Iterable[FaultSpec] = (),
) -> Trajectory:
    """A normal-operation run starting from the equilibrium of its initial setpoints."""
    u = ou_setpoints(p, n + warmup, rng, sigma=setpoint_sigma)
    x0 = find_equilibrium(p, u[0])
    faults = [replace(f, start_step=f.start_step + warmup) for f in faults]
    traj = simulate(p, x0, u, rng, noise_sigma=noise_sigma, faults=faults)
    return Trajectory(
        traj.states[warmup:], traj.actuators[warmup:], traj.sensors[warmup:], traj.labels[warmup:]
    )


TRAJECTORY_HEADER = ["step", "time_min", "C_A", "T", "Tc_cmd", "F_cmd", "CAf_cmd", "sensor_C_A", "sensor_T", "label"]
LABEL_NAMES = {0: "normal", 1: "attack", 2: "fault"}


def write_trajectory_csv(path: str | Path, traj: Trajectory, extra_columns: dict[str, np.ndarray] | None = None) -> None:
    extra_columns = extra_columns or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER + list(extra_columns))
        for k in range(len(traj)):
            row = [k, repr(k * SAMPLE_PERIOD_MIN)]
            row += [repr(float(v)) for v in traj.states[k]]
            row += [repr(float(v)) for v in traj.actuators[k]]
            row += [repr(float(traj.sensors[k, 0])), repr(float(traj.sensors[k, 1]))]
            row.append(LABEL_NAMES[int(traj.labels[k])])
            row += [repr(float(col[k])) for col in extra_columns.values()]
            w.writerow(row)


# ---------------------------------------------------------------------------
# Hybrid model: physics + GRU residual
# ---------------------------------------------------------------------------


class ResidualFitError(RuntimeError):
    pass


def default_residual_bound(p: PlantParams) -> np.ndarray:
    """20% of the inflow-driven derivative scale per state channel."""
    dil = p.F / p.V
    return 0.2 * np.array([dil * p.C_Af, dil * abs(p.T_f - p.T_c)])


@dataclass
class HybridModel:
    """Physics plus a clamped GRU correction.

    The GRU reads a window of normalised ``[C_A, T, T_c, F, C_Af]`` rows and
    emits a 2-vector residual ``bound * tanh(raw)``.
    """

    params: PlantParams
    gru_theta: nn.ParamVector
    window: int = 8
    hidden: int = 8
    bound: np.ndarray = None
    center: np.ndarray = field(default_factory=lambda: np.array([0.877, 324.5, 300.0, 100.0, 1.0]))
    scale: np.ndarray = field(default_factory=lambda: np.array([0.05, 3.0, 1.0, 2.0, 0.02]))

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.bound is None:
            self.bound = default_residual_bound(self.params)
        if not np.all(np.isfinite(self.gru_theta.data)):
            raise ValueError("gru_theta must be finite")

    @property
    def net(self) -> nn.Network:
        return residual_network(self.hidden)

    @classmethod
    def create(cls, params: PlantParams, window: int = 8, hidden: int = 8, seed: int = 0, zero: bool = False) -> HybridModel:
        net = residual_network(hidden)
        theta = net.init_params(np.random.default_rng(seed))
        theta["l1.W"][...] = 0.0
        if zero:
            theta.data[:] = 0.0
        return cls(params, theta, window=window, hidden=hidden)

    def residual(self, history: np.ndarray) -> np.ndarray:
        """GRU correction for one ``(window, 5)`` history or a batch ``(B, window, 5)``."""
        h = np.asarray(history, dtype=float)
        single = h.ndim == 2
        if single:
            h = h[None]
        if h.shape[1] < self.window:
            raise ValueError(f"history has {h.shape[1]} rows, model window is {self.window}")
        h = h[:, -self.window :]
        raw = self.net(self.gru_theta, (h - self.center) / self.scale)
        g = self.bound * np.tanh(raw)
        return g[0] if single else g


def residual_network(hidden: int) -> nn.Network:
    return nn.Network([nn.GRU(N_CHANNELS, hidden, return_sequences=False), nn.Dense(hidden, 2)])


def hybrid_derivatives(m: HybridModel, history: np.ndarray) -> np.ndarray:
    """Physics derivatives at the last row of ``history`` plus the GRU residual."""
    history = np.asarray(history, dtype=float)
    if history.shape[0] < m.window:
        raise ValueError(f"window underfull: {history.shape[0]} < {m.window}")
    last = history[-1]
    return rhs(last[:2], last[2:5], m.params) + m.residual(history)


def _residual_dataset(m: HybridModel, episodes: Sequence[Trajectory]):
    X, R = [], []
    for ep in episodes:
        obs = np.concatenate([ep.sensors[:, :2], ep.actuators], axis=1)
        n = len(ep)
        if n <= m.window:
            continue
        idx = np.arange(m.window - 1, n - 1)
        pred = advance(obs[idx, :2], obs[idx, 2:5], m.params)
        R.append((obs[idx + 1, :2] - pred) / SAMPLE_PERIOD_MIN)
        X.append(np.stack([obs[i - m.window + 1 : i + 1] for i in idx]))
    if not X:
        raise ValueError("episodes are shorter than the model window")
    return np.concatenate(X), np.concatenate(R)


def fit_residual(
    m: HybridModel,
    episodes: Sequence[Trajectory],
    epochs: int = 300,
    lr: float = 0.01,
    tol: float = 1e-9,
) -> tuple[HybridModel, list[float]]:
    """Fit the GRU to one-step residuals of the physics model.

    Full-batch Adam with backtracking: a step that raises the loss by more
    than ``tol`` is undone and the learning rate halved, so the recorded loss
    curve is non-increasing.
    """
    if len(episodes) == 0:
        raise ValueError("fit_residual needs at least one episode")
    X, R = _residual_dataset(m, episodes)
    Xn = (X - m.center) / m.scale
    Rn = R / m.bound
    net = m.net
    theta = m.gru_theta.copy()
    state = nn.AdamState.for_params(theta)

    def loss_and_grad(th):
        raw, tape = net.forward(th, Xn)
        g = np.tanh(raw)
        diff = g - Rn
        loss = float(np.mean(diff * diff))
        dy = 2.0 * diff * (1.0 - g * g) / diff.size
        grads, _ = nn.backward(tape, th, dy)
        return loss, grads

    loss, grads = loss_and_grad(theta)
    history = [loss]
    for epoch in range(1, epochs + 1):
        if not math.isfinite(loss):
            raise ResidualFitError(f"residual fit diverged at epoch {epoch}")
        saved = (theta.data.copy(), state.m.copy(), state.v.copy(), state.t)
        nn.adam_step(theta, grads, state, lr=lr)
        new_loss, new_grads = loss_and_grad(theta)
        if not math.isfinite(new_loss):
            raise ResidualFitError(f"residual fit diverged at epoch {epoch}")
        if new_loss > loss + tol:
            theta.data[:], state.m[:], state.v[:], state.t = saved
            lr *= 0.5
            history.append(loss)
            continue
        loss, grads = new_loss, new_grads
        history.append(loss)
    fitted = replace(m, gru_theta=theta)
    return fitted, history


def one_step_predictions(m: HybridModel | None, ep: Trajectory, window: int, params: PlantParams) -> tuple[np.ndarray, np.ndarray]:
    """One-step predictions of the sensed state and the matching targets.

    With ``m=None`` the physics model alone is used; otherwise the residual is
    held constant over the sampling period.
    """
    obs = np.concatenate([ep.sensors[:, :2], ep.actuators], axis=1)
    idx = np.arange(window - 1, len(ep) - 1)
    extra = 0.0
    if m is not None:
        hist = np.stack([obs[i - window + 1 : i + 1] for i in idx])
        extra = m.residual(hist)
    pred = advance(obs[idx, :2], obs[idx, 2:5], params, extra=extra)
    return pred, obs[idx + 1, :2]
