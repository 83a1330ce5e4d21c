"""Feed-forward networks with hand-written reverse-mode gradients.

The hidden layers use an elementwise activation; the output layer is linear.
Parameters live in one flat float64 vector, with per-layer weight and bias
views into it, so optimizers and checkpoints deal with a single array.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

LOG2PI = float(np.log(2.0 * np.pi))
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0

ACTIVATIONS = ("tanh", "elu", "identity")


class NetError(ValueError):
    pass


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    return x


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - post * post
    if name == "elu":
        return np.where(pre > 0, 1.0, post + 1.0)
    return np.ones_like(pre)


@dataclass
class GradTape:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each hidden layer
    post: list
    used: bool = False


class MlpNet:
    def __init__(self, layer_dims: Sequence[int], activation: str = "tanh", params: np.ndarray | None = None):
        if len(layer_dims) < 2:
            raise NetError("an MLP needs at least input and output widths")
        if activation not in ACTIVATIONS:
            raise NetError(f"unknown activation {activation!r}")
        self.layer_dims = tuple(int(d) for d in layer_dims)
        self.activation = activation
        self.param_count = sum((a + 1) * b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))
        if params is None:
            params = np.zeros(self.param_count)
        params = np.array(params, dtype=float)
        if params.shape != (self.param_count,):
            raise NetError(f"expected {self.param_count} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def init(cls, layer_dims, activation, rng: np.random.Generator, out_scale: float = 1.0) -> "MlpNet":
        """Scaled-normal init (std 1/sqrt(fan_in)), biases zero, last layer scaled by ``out_scale``."""
        net = cls(layer_dims, activation)
        for i, (w, b) in enumerate(net.layers()):
            w[...] = rng.standard_normal(w.shape) / np.sqrt(w.shape[0])
            if i == len(net.layer_dims) - 2:
                w *= out_scale
        return net

    def layers(self, params: np.ndarray | None = None):
        """(W, b) views for each layer; W has shape (d_in, d_out)."""
        p = self.params if params is None else params
        out, off = [], 0
        for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = p[off:off + a * b].reshape(a, b)
            off += a * b
            out.append((w, p[off:off + b]))
            off += b
        return out

    def copy(self) -> "MlpNet":
        return MlpNet(self.layer_dims, self.activation, self.params.copy())

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, GradTape]:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise NetError(f"input width {x.shape[-1] if x.ndim else '?'} != {self.layer_dims[0]}")
        tape = GradTape([], [], [])
        layers = self.layers()
        h = x
        for i, (w, b) in enumerate(layers):
            tape.inputs.append(h)
            z = h @ w + b
            if i < len(layers) - 1:
                a = _act(self.activation, z)
                tape.pre.append(z)
                tape.post.append(a)
                h = a
            else:
                h = z
        return h, tape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: GradTape, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of sum(grad_out * output) w.r.t. params and input."""
        if tape.used:
            raise NetError("gradient tape already consumed")
        grad_out = np.asarray(grad_out, dtype=float)
        n = tape.inputs[0].shape[0]
        if grad_out.shape != (n, self.layer_dims[-1]):
            raise NetError(f"output gradient shape {grad_out.shape} != {(n, self.layer_dims[-1])}")
        tape.used = True
        grads = np.zeros(self.param_count)
        gl = self.layers(grads)
        layers = self.layers()
        g = grad_out
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            gw, gb = gl[i]
            gw[...] = tape.inputs[i].T @ g
            gb[...] = g.sum(axis=0)
            g = g @ w.T
            if i > 0:
                g = g * _act_grad(self.activation, tape.pre[i - 1], tape.post[i - 1])
        return grads, g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0

    @classmethod
    def for_params(cls, n: int, lr: float, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), lr, **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One Adam update with bias correction (decoupled weight decay if configured)."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise NetError("parameter, gradient and moment shapes must match")
    if not np.all(np.isfinite(grads)):
        raise NetError("non-finite gradient")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        update = update + state.lr * state.weight_decay * params
    return params - update


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(grads, grads)))
    if max_norm > 0 and norm > max_norm:
        return grads * (max_norm / norm), norm
    return grads, norm


# -- diagonal Gaussian --------------------------------------------------------

def gaussian_log_density(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Sum over the last axis of the diagonal-Gaussian log density."""
    zsc = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * zsc * zsc - log_std - 0.5 * LOG2PI, axis=-1)


@dataclass
class GaussianHead:
    """Diagonal Gaussian over actions.

    ``log_std`` is clamped to [-5, 2]; where the clamp is active the gradient
    with respect to the raw log-std is zero.
    """

    mean: np.ndarray
    raw_log_std: np.ndarray
    log_std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.raw_log_std = np.broadcast_to(np.asarray(self.raw_log_std, dtype=float), self.mean.shape)
        self.log_std = np.clip(self.raw_log_std, LOG_STD_MIN, LOG_STD_MAX)

    @classmethod
    def from_output(cls, out: np.ndarray) -> "GaussianHead":
        out = np.asarray(out, dtype=float)
        if out.shape[-1] % 2:
            raise NetError("network output width must be 2 x action dim")
        d = out.shape[-1] // 2
        return cls(out[..., :d], out[..., d:])

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return gaussian_log_density(x, self.mean, self.log_std)

    def entropy(self) -> np.ndarray:
        return np.sum(self.log_std + 0.5 + 0.5 * LOG2PI, axis=-1)

    def log_prob_grads(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """d log_prob / d mean and d log_prob / d raw_log_std."""
        inv_var = np.exp(-2.0 * self.log_std)
        diff = x - self.mean
        g_mean = diff * inv_var
        g_log_std = diff * diff * inv_var - 1.0
        return g_mean, g_log_std * self._clamp_mask()

    def entropy_grad(self) -> np.ndarray:
        return np.ones_like(self.mean) * self._clamp_mask()

    def _clamp_mask(self) -> np.ndarray:
        return ((self.raw_log_std >= LOG_STD_MIN) & (self.raw_log_std <= LOG_STD_MAX)).astype(float)


def grad_check(f, grad: np.ndarray, x: np.ndarray, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Relative error between ``grad . v`` and a central difference along a random direction ``v``."""
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    fd = (f(x + h * v) - f(x - h * v)) / (2 * h)
    an = float(np.dot(grad.ravel(), v.ravel()))
    return abs(fd - an) / max(abs(fd), abs(an), 1e-12)


# -- checkpoints --------------------------------------------------------------
#
# Layout (little-endian):
#   8s   magic b"QTCKPT\x00\x01"
#   u32  entry count
#   per entry:
#     u16 name length, utf-8 name
#     u8  kind (0 = MLP, 1 = raw vector)
#     MLP only: u8 activation index, u32 layer count, u32[count] layer dims
#     u64 parameter count, f64[count] parameters
#     u8  has optimizer; if 1: u64 step, f64 lr, beta1, beta2, eps, weight_decay,
#         f64[count] first moments, f64[count] second moments

MAGIC = b"QTCKPT\x00\x01"


class CheckpointError(ValueError):
    pass


def _write_vec(f: BinaryIO, v: np.ndarray):
    f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_vec(f: BinaryIO, n: int) -> np.ndarray:
    return np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").astype(float)


def save_checkpoint(path, entries: dict):
    """``entries`` maps name -> MlpNet | ndarray | (MlpNet | ndarray, AdamState | None)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, item in entries.items():
            obj, opt = item if isinstance(item, tuple) else (item, None)
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw)
            if isinstance(obj, MlpNet):
                f.write(struct.pack("<BBI", 0, ACTIVATIONS.index(obj.activation), len(obj.layer_dims)))
                f.write(struct.pack(f"<{len(obj.layer_dims)}I", *obj.layer_dims))
                vec = obj.params
            else:
                f.write(struct.pack("<B", 1))
                vec = np.asarray(obj, dtype=float).ravel()
            f.write(struct.pack("<Q", vec.size))
            _write_vec(f, vec)
            if opt is None:
                f.write(struct.pack("<B", 0))
            else:
                f.write(struct.pack("<BQ5d", 1, opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay))
                _write_vec(f, opt.m)
                _write_vec(f, opt.v)


def load_checkpoint(path) -> dict:
    """Inverse of :func:`save_checkpoint`; values are (MlpNet | ndarray, AdamState | None)."""
    out = {}
    with open(path, "rb") as f:
        if _read_exact(f, 8) != MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode()
            (kind,) = struct.unpack("<B", _read_exact(f, 1))
            if kind == 0:
                act, ndims = struct.unpack("<BI", _read_exact(f, 5))
                dims = struct.unpack(f"<{ndims}I", _read_exact(f, 4 * ndims))
            elif kind != 1:
                raise CheckpointError(f"unknown entry kind {kind}")
            (n,) = struct.unpack("<Q", _read_exact(f, 8))
            vec = _read_vec(f, n)
            obj = MlpNet(dims, ACTIVATIONS[act], vec) if kind == 0 else vec
            (has_opt,) = struct.unpack("<B", _read_exact(f, 1))
            opt = None
            if has_opt:
                step, lr, b1, b2, eps, wd = struct.unpack("<Q5d", _read_exact(f, 48))
                m = _read_vec(f, n)
                v = _read_vec(f, n)
                opt = AdamState(m, v, lr, b1, b2, eps, wd, int(step))
            out[name] = (obj, opt)
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint entries")
    return out
