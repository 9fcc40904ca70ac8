"""Small reverse-mode neural network toolkit on numpy.

Networks are fixed stacks of layers. A forward pass returns the output and a
:class:`Tape` holding the cached activations; :func:`backward` walks the tape
in reverse and returns exact gradients for every parameter plus the gradient
with respect to the input.

Conventions:
    * float64 everywhere.
    * Dense inputs have shape ``(..., n_in)``; recurrent inputs ``(B, T, n_in)``.
    * GRU: ``h_t = (1 - z) * h_{t-1} + z * h_tilde`` with
      ``h_tilde = tanh(x Wh + (r * h_{t-1}) Uh + bh)``.
    * LSTM: gates ordered (i, f, g, o); forget-gate bias initialised to 1.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Input dimensions do not match the network specification."""


class TapeError(RuntimeError):
    """Backward pass called with a tape that does not match the parameters."""


class NonFiniteError(FloatingPointError):
    """A NaN or inf showed up where finite numbers are required."""


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """Flat float64 array plus a manifest of named slices.

    ``manifest`` maps a tensor name to ``(offset, shape)``. The slices are
    contiguous, ordered, and cover the array exactly.
    """

    data: np.ndarray
    manifest: dict[str, tuple[int, tuple[int, ...]]]

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        expected = 0
        for name, (offset, shape) in self.manifest.items():
            if offset != expected:
                raise ValueError(f"manifest slice {name!r} does not start at {expected}")
            expected += int(np.prod(shape, dtype=np.int64))
        if expected != self.data.size:
            raise ValueError(f"manifest covers {expected} entries, array has {self.data.size}")

    @classmethod
    def zeros(cls, shapes: dict[str, tuple[int, ...]]) -> ParamVector:
        manifest = {}
        offset = 0
        for name, shape in shapes.items():
            manifest[name] = (offset, tuple(int(s) for s in shape))
            offset += int(np.prod(shape, dtype=np.int64))
        return cls(np.zeros(offset, dtype=DTYPE), manifest)

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.manifest[name]
        size = int(np.prod(shape, dtype=np.int64))
        return self.data[offset : offset + size].reshape(shape)

    def __len__(self) -> int:
        return self.data.size

    def copy(self) -> ParamVector:
        return ParamVector(self.data.copy(), dict(self.manifest))

    def like(self, data: np.ndarray) -> ParamVector:
        """Same manifest, different values."""
        return ParamVector(np.asarray(data, dtype=DTYPE).copy(), dict(self.manifest))

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Views of every tensor whose name starts with ``prefix``, prefix stripped."""
        return {k[len(prefix) :]: self[k] for k in self.manifest if k.startswith(prefix)}

    def checksum(self) -> int:
        return zlib.crc32(self.data.tobytes())


def save_params(path: str | Path, params: ParamVector | dict[str, ParamVector]) -> None:
    """Write one or several parameter vectors to an ``.npz`` container.

    Layout: for each entry ``<key>`` two arrays, ``<key>.data`` (float64) and
    ``<key>.manifest`` (UTF-8 JSON of ``[[name, offset, shape], ...]``), plus a
    ``format`` array holding ``"arcsim-params/1"``. A bare :class:`ParamVector`
    is stored under the key ``params``.
    """
    if isinstance(params, ParamVector):
        params = {"params": params}
    arrays: dict[str, np.ndarray] = {"format": np.array("arcsim-params/1")}
    for key, pv in params.items():
        arrays[f"{key}.data"] = pv.data
        arrays[f"{key}.manifest"] = np.array(json.dumps(_manifest_rows(pv)))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path: str | Path) -> dict[str, ParamVector]:
    with np.load(path, allow_pickle=False) as npz:
        if str(npz["format"]) != "arcsim-params/1":
            raise ValueError(f"{path}: unknown container format {npz['format']!r}")
        keys = sorted({k.rsplit(".", 1)[0] for k in npz.files if k != "format"})
        out = {}
        for key in keys:
            rows = json.loads(str(npz[f"{key}.manifest"]))
            manifest = {name: (int(off), tuple(shape)) for name, off, shape in rows}
            out[key] = ParamVector(npz[f"{key}.data"].copy(), manifest)
    return out


def _manifest_rows(pv: ParamVector) -> list:
    return [[name, off, list(shape)] for name, (off, shape) in pv.manifest.items()]


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class Layer:
    """Base class. Subclasses are stateless descriptions; weights live in a ParamVector."""

    n_in: int
    n_out: int
    sequence_input = False

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init(self, rng: np.random.Generator, p: dict[str, np.ndarray]) -> None:
        pass

    def forward(self, p: dict[str, np.ndarray], x: np.ndarray):
        raise NotImplementedError

    def backward(self, p: dict[str, np.ndarray], cache, dy: np.ndarray):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out

    def param_shapes(self):
        return {"W": (self.n_in, self.n_out), "b": (self.n_out,)}

    def init(self, rng, p):
        p["W"][...] = glorot(rng, self.n_in, self.n_out, p["W"].shape)
        p["b"][...] = 0.0

    def forward(self, p, x):
        return x @ p["W"] + p["b"], x

    def backward(self, p, x, dy):
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        grads = {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}
        return dy @ p["W"].T, grads


class Activation(Layer):
    def __init__(self, kind: str, n: int):
        if kind not in ("tanh", "sigmoid", "relu", "identity"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.n_in = self.n_out = n

    def forward(self, p, x):
        if self.kind == "tanh":
            y = np.tanh(x)
        elif self.kind == "sigmoid":
            y = sigmoid(x)
        elif self.kind == "relu":
            y = np.maximum(x, 0.0)
        else:
            y = x
        return y, (x, y)

    def backward(self, p, cache, dy):
        x, y = cache
        if self.kind == "tanh":
            return dy * (1.0 - y * y), {}
        if self.kind == "sigmoid":
            return dy * y * (1.0 - y), {}
        if self.kind == "relu":
            return dy * (x > 0), {}
        return dy, {}


class GRU(Layer):
    """Gated recurrent unit over ``(B, T, n_in)`` sequences, h_0 = 0."""

    sequence_input = True

    def __init__(self, n_in: int, n_hidden: int, return_sequences: bool = True):
        self.n_in, self.n_out = n_in, n_hidden
        self.return_sequences = return_sequences

    def param_shapes(self):
        H, D = self.n_out, self.n_in
        return {"Wx": (D, 3 * H), "Uzr": (H, 2 * H), "Uh": (H, H), "b": (3 * H,)}

    def init(self, rng, p):
        H, D = self.n_out, self.n_in
        p["Wx"][...] = glorot(rng, D, H, (D, 3 * H))
        p["Uzr"][...] = glorot(rng, H, H, (H, 2 * H))
        p["Uh"][...] = glorot(rng, H, H, (H, H))
        p["b"][...] = 0.0

    def forward(self, p, x):
        B, T, _ = x.shape
        H = self.n_out
        xw = x @ p["Wx"] + p["b"]
        h = np.zeros((B, H))
        hs = np.empty((B, T, H))
        steps = []
        for t in range(T):
            zr = sigmoid(xw[:, t, : 2 * H] + h @ p["Uzr"])
            z, r = zr[:, :H], zr[:, H:]
            rh = r * h
            hh = np.tanh(xw[:, t, 2 * H :] + rh @ p["Uh"])
            h_new = (1.0 - z) * h + z * hh
            steps.append((h, z, r, rh, hh))
            hs[:, t] = h_new
            h = h_new
        y = hs if self.return_sequences else hs[:, -1]
        return y, (x, steps)

    def backward(self, p, cache, dy):
        x, steps = cache
        B, T, D = x.shape
        H = self.n_out
        if self.return_sequences:
            dhs = dy
        else:
            dhs = np.zeros((B, T, H))
            dhs[:, -1] = dy
        dxw = np.empty((B, T, 3 * H))
        dUzr = np.zeros((H, 2 * H))
        dUh = np.zeros((H, H))
        dh_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            h, z, r, rh, hh = steps[t]
            dh = dhs[:, t] + dh_next
            dhh = dh * z
            dz = dh * (hh - h)
            dh_prev = dh * (1.0 - z)
            da_h = dhh * (1.0 - hh * hh)
            dUh += rh.T @ da_h
            drh = da_h @ p["Uh"].T
            dr = drh * h
            dh_prev += drh * r
            da_zr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            dUzr += h.T @ da_zr
            dh_prev += da_zr @ p["Uzr"].T
            dxw[:, t, : 2 * H] = da_zr
            dxw[:, t, 2 * H :] = da_h
            dh_next = dh_prev
        flat = dxw.reshape(-1, 3 * H)
        grads = {
            "Wx": x.reshape(-1, D).T @ flat,
            "Uzr": dUzr,
            "Uh": dUh,
            "b": flat.sum(axis=0),
        }
        return dxw @ p["Wx"].T, grads


class LSTM(Layer):
    """Long short-term memory over ``(B, T, n_in)`` sequences, h_0 = c_0 = 0."""

    sequence_input = True

    def __init__(self, n_in: int, n_hidden: int, return_sequences: bool = True):
        self.n_in, self.n_out = n_in, n_hidden
        self.return_sequences = return_sequences

    def param_shapes(self):
        H, D = self.n_out, self.n_in
        return {"Wx": (D, 4 * H), "Uh": (H, 4 * H), "b": (4 * H,)}

    def init(self, rng, p):
        H, D = self.n_out, self.n_in
        p["Wx"][...] = glorot(rng, D, H, (D, 4 * H))
        p["Uh"][...] = glorot(rng, H, H, (H, 4 * H))
        p["b"][...] = 0.0
        p["b"][H : 2 * H] = 1.0

    def forward(self, p, x):
        B, T, _ = x.shape
        H = self.n_out
        xw = x @ p["Wx"] + p["b"]
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.empty((B, T, H))
        steps = []
        for t in range(T):
            a = xw[:, t] + h @ p["Uh"]
            ifo = sigmoid(np.concatenate([a[:, : 2 * H], a[:, 3 * H :]], axis=1))
            i, f, o = ifo[:, :H], ifo[:, H : 2 * H], ifo[:, 2 * H :]
            g = np.tanh(a[:, 2 * H : 3 * H])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            steps.append((h, c, i, f, g, o, tc))
            hs[:, t] = h_new
            h, c = h_new, c_new
        y = hs if self.return_sequences else hs[:, -1]
        return y, (x, steps)

    def backward(self, p, cache, dy):
        x, steps = cache
        B, T, D = x.shape
        H = self.n_out
        if self.return_sequences:
            dhs = dy
        else:
            dhs = np.zeros((B, T, H))
            dhs[:, -1] = dy
        da_all = np.empty((B, T, 4 * H))
        dUh = np.zeros((H, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            h, c, i, f, g, o, tc = steps[t]
            dh = dhs[:, t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            df = dc * c
            dg = dc * i
            da = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            da_all[:, t] = da
            dUh += h.T @ da
            dh_next = da @ p["Uh"].T
            dc_next = dc * f
        flat = da_all.reshape(-1, 4 * H)
        grads = {"Wx": x.reshape(-1, D).T @ flat, "Uh": dUh, "b": flat.sum(axis=0)}
        return da_all @ p["Wx"].T, grads


# ---------------------------------------------------------------------------
# Network + tape
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Cached activations of one forward pass, consumed in reverse order."""

    net: Network
    checksum: int
    records: list = field(default_factory=list)


class Network:
    """A fixed sequential stack of layers."""

    def __init__(self, layers: Sequence[Layer], prefix: str = ""):
        if not layers:
            raise ValueError("network needs at least one layer")
        self.layers = list(layers)
        self.prefix = prefix
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def _key(self, i: int) -> str:
        return f"{self.prefix}l{i}."

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            for name, shape in layer.param_shapes().items():
                shapes[self._key(i) + name] = shape
        return shapes

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        pv = ParamVector.zeros(self.param_shapes())
        self.init_into(pv, rng)
        return pv

    def init_into(self, pv: ParamVector, rng: np.random.Generator) -> None:
        for i, layer in enumerate(self.layers):
            layer.init(rng, pv.subset(self._key(i)))

    def forward(self, params: ParamVector, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=DTYPE)
        first = self.layers[0]
        if first.sequence_input and x.ndim != 3:
            raise ShapeError(f"expected (B, T, {first.n_in}) input, got shape {x.shape}")
        if x.shape[-1] != first.n_in:
            raise ShapeError(f"expected last dim {first.n_in}, got shape {x.shape}")
        tape = Tape(self, params.checksum())
        for i, layer in enumerate(self.layers):
            p = params.subset(self._key(i))
            x, cache = layer.forward(p, x)
            tape.records.append(cache)
        return x, tape

    def __call__(self, params: ParamVector, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x)[0]


def backward(
    tape: Tape, params: ParamVector, dy: np.ndarray, grads: ParamVector | None = None
) -> tuple[ParamVector, np.ndarray]:
    """Reverse pass. Returns ``(param_grads, input_grad)``.

    Gradients are accumulated into ``grads`` when given (it must share the
    manifest of ``params``), otherwise a fresh zero vector is created.
    """
    net = tape.net
    if len(tape.records) != len(net.layers):
        raise TapeError("tape is incomplete")
    if params.checksum() != tape.checksum:
        raise TapeError("parameters changed since the forward pass (stale tape)")
    if grads is None:
        grads = params.like(np.zeros_like(params.data))
    dy = np.asarray(dy, dtype=DTYPE)
    for i in range(len(net.layers) - 1, -1, -1):
        key = net._key(i)
        p = params.subset(key)
        dy, g = net.layers[i].backward(p, tape.records[i], dy)
        for name, val in g.items():
            grads[key + name][...] += val
    return grads, dy


def mse_loss(y: np.ndarray, target: np.ndarray, axes=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean squared error over ``axes`` (all non-batch axes by default).

    Returns per-sample loss and its gradient w.r.t. ``y`` scaled for the
    per-sample values (i.e. ``d loss_i / d y``).
    """
    diff = y - target
    if axes is None:
        axes = tuple(range(1, diff.ndim))
    count = int(np.prod([diff.shape[a] for a in axes]))
    loss = np.mean(diff * diff, axis=axes)
    return loss, 2.0 * diff / count


# ---------------------------------------------------------------------------
# Gaussian policy head
# ---------------------------------------------------------------------------

LOG_2PI = np.log(2.0 * np.pi)


def gaussian_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray):
    """Diagonal Gaussian log-density summed over the last axis.

    Returns ``(logp, dlogp_dmean, dlogp_dlogstd)``; the log-std gradient keeps
    the batch axis so callers can weight samples before reducing.
    """
    std = np.exp(log_std)
    zs = (u - mean) / std
    logp = np.sum(-0.5 * zs * zs - log_std - 0.5 * LOG_2PI, axis=-1)
    return logp, zs / std, zs * zs - 1.0


def tanh_squash_log_det(u: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """log |d a / d u| for ``a = scale * tanh(u)``, summed over the last axis.

    Uses ``log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))`` which stays
    finite for large ``|u|``.
    """
    sp = np.logaddexp(0.0, -2.0 * u)
    return np.sum(np.log(scale) + 2.0 * (np.log(2.0) - u - sp), axis=-1)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamVector) -> AdamState:
        return cls(np.zeros_like(params.data), np.zeros_like(params.data))


def adam_step(
    params: ParamVector,
    grads: ParamVector | np.ndarray,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    max_grad_norm: float | None = None,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Raises :class:`NonFiniteError` before touching anything if the gradient
    contains NaN or inf.
    """
    g = grads.data if isinstance(grads, ParamVector) else np.asarray(grads, dtype=DTYPE)
    if g.shape != params.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {params.data.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient; parameters left untouched")
    if max_grad_norm is not None:
        norm = np.linalg.norm(g)
        if norm > max_grad_norm:
            g = g * (max_grad_norm / norm)
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * g
    state.v *= beta2
    state.v += (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    params.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def directional_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    grad: np.ndarray,
    rng: np.random.Generator,
    n_dirs: int = 20,
    eps: float = 1e-5,
) -> float:
    """Worst relative error between ``grad . d`` and a central difference of f.

    Each random direction ``d`` is unit-norm. ``f`` takes a flat array.
    """
    x = np.asarray(x, dtype=DTYPE).ravel()
    grad = np.asarray(grad, dtype=DTYPE).ravel()
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.standard_normal(x.size)
        d /= np.linalg.norm(d)
        numeric = (f(x + eps * d) - f(x - eps * d)) / (2.0 * eps)
        analytic = float(grad @ d)
        denom = max(abs(numeric), abs(analytic), 1e-10)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
