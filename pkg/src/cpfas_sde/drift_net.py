"""Neural drift ``f_theta(x, t)`` distilled from smoother trajectories.

The network is a plain numpy MLP: the state is concatenated with a
sinusoidal embedding of time, passed through four SiLU hidden layers and a
linear output layer.  Gradients are computed by hand-written backprop.

Training minimizes the mean-matching loss ``|f_theta(x_j, t_j) dt_j - z_j|^2``
where ``z_j`` is the mean-change record stored by the smoother.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, CorruptModelError, NumericalDivergenceError
from .timegrid import DiffusionSchedule, SdeModel, TimeGrid, simulate

CHECKPOINT_MAGIC = b"CPFSDENN"
CHECKPOINT_VERSION = 1


class SinusoidalEmbedding:
    """Maps ``t`` to ``[sin(w_1 t), cos(w_1 t), sin(w_2 t), cos(w_2 t), ...]``."""

    def __init__(self, frequencies: Sequence[float]):
        self.frequencies = np.asarray(frequencies, dtype=float).ravel()
        if len(self.frequencies) == 0:
            raise ConfigurationError("embedding needs at least one frequency")

    @classmethod
    def geometric(cls, n_freqs: int, longest_period: float, shortest_period: float):
        periods = np.geomspace(longest_period, shortest_period, n_freqs)
        return cls(2.0 * np.pi / periods)

    @property
    def n_freqs(self) -> int:
        return len(self.frequencies)

    @property
    def dim(self) -> int:
        return 2 * len(self.frequencies)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        arg = t[..., None] * self.frequencies
        out = np.empty(t.shape + (self.dim,))
        out[..., 0::2] = np.sin(arg)
        out[..., 1::2] = np.cos(arg)
        return out


def embed_time(emb: SinusoidalEmbedding, t):
    return emb(t)


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def _dense(h, W, b):
    # BLAS picks different kernels for single rows and for narrow outputs;
    # both cases are routed so that each output row is computed the same way
    # regardless of batch size.
    if W.shape[1] < 16:
        return np.einsum("bk,km->bm", h, W) + b
    if h.shape[0] == 1:
        return (np.vstack([h, h]) @ W)[:1] + b
    return h @ W + b


class DriftNet:
    """Feed-forward drift network with a flat parameter vector.

    ``params`` holds every weight matrix and bias back to back; the layer
    arrays are views into it, so optimizers can work on the flat vector.
    """

    def __init__(self, dim: int, embedding: SinusoidalEmbedding,
                 hidden: Sequence[int] = (128, 128, 128, 128),
                 params: Optional[np.ndarray] = None):
        self.dim = int(dim)
        self.embedding = embedding
        self.hidden = tuple(int(h) for h in hidden)
        sizes = [self.dim + embedding.dim, *self.hidden, self.dim]
        self.shapes = [(sizes[k], sizes[k + 1]) for k in range(len(sizes) - 1)]
        n = sum(a * b + b for a, b in self.shapes)
        if params is None:
            params = np.zeros(n)
        params = np.ascontiguousarray(params, dtype=float)
        if params.shape != (n,):
            raise ConfigurationError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self._bind()

    def _bind(self):
        self.layers = []
        off = 0
        for fan_in, fan_out in self.shapes:
            W = self.params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = self.params[off:off + fan_out]
            off += fan_out
            self.layers.append((W, b))

    @classmethod
    def create(cls, dim: int, T: float, dt: float, hidden=(128, 128, 128, 128),
               n_freqs: int = 16, seed=0) -> "DriftNet":
        """Fresh network with fan-in scaled uniform initialization.

        The time embedding spans periods from ``4 T`` down to ``dt``.
        """
        emb = SinusoidalEmbedding.geometric(n_freqs, 4.0 * T, dt)
        net = cls(dim, emb, hidden)
        rng = np.random.default_rng(seed)
        for W, b in net.layers:
            bound = 1.0 / math.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, W.shape)
            b[...] = rng.uniform(-bound, bound, b.shape)
        return net

    @property
    def n_params(self) -> int:
        return len(self.params)

    def copy(self) -> "DriftNet":
        return DriftNet(self.dim, SinusoidalEmbedding(self.embedding.frequencies.copy()),
                        self.hidden, self.params.copy())

    def _inputs(self, x, t):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[1] != self.dim:
            raise ConfigurationError(f"input dimension {x2.shape[1]} != network dimension {self.dim}")
        tt = np.broadcast_to(np.asarray(t, dtype=float), (x2.shape[0],))
        return np.concatenate([x2, self.embedding(tt)], axis=1), single

    def forward(self, x, t):
        if not np.all(np.isfinite(self.params)):
            raise CorruptModelError("network parameters contain non-finite values")
        h, single = self._inputs(x, t)
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            h = _dense(h, W, b)
            if k < last:
                h = _silu(h)
        return h[0] if single else h

    __call__ = forward

    def forward_backward(self, x, t, grad_fn):
        """Forward pass, then backprop ``grad_fn(output)`` into a flat gradient.

        ``grad_fn`` receives the ``(B, d)`` output and returns ``(value, dL/doutput)``.
        """
        h, _ = self._inputs(x, t)
        acts = [h]
        pre = []
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            z = _dense(h, W, b)
            if k < last:
                pre.append(z)
                h = _silu(z)
            else:
                h = z
            acts.append(h)
        value, g = grad_fn(h)
        grad = np.empty_like(self.params)
        views = []
        off = 0
        for fan_in, fan_out in self.shapes:
            gW = grad[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            gb = grad[off:off + fan_out]
            off += fan_out
            views.append((gW, gb))
        for k in range(last, -1, -1):
            if k < last:
                g = g * _silu_grad(pre[k])
            gW, gb = views[k]
            np.dot(acts[k].T, g, out=gW)
            gb[...] = g.sum(axis=0)
            if k > 0:
                g = g @ self.layers[k][0].T
        return value, grad

    def header(self) -> dict:
        return {
            "dim": self.dim,
            "hidden": list(self.hidden),
            "activation": "silu",
            "frequencies": self.embedding.frequencies.tolist(),
            "n_params": self.n_params,
        }


@dataclass
class TrainingBatch:
    states: np.ndarray
    times: np.ndarray
    deltas: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        B = len(self.states)
        self.times = np.broadcast_to(np.asarray(self.times, dtype=float), (B,))
        self.deltas = np.broadcast_to(np.asarray(self.deltas, dtype=float), (B,))
        if self.targets.shape != self.states.shape:
            raise ConfigurationError("targets and states must have the same shape")

    def __len__(self):
        return len(self.states)

    def subset(self, idx) -> "TrainingBatch":
        return TrainingBatch(self.states[idx], self.times[idx], self.deltas[idx], self.targets[idx])


def _mean_matching(batch: TrainingBatch):
    B = len(batch)
    dt = batch.deltas[:, None]

    def grad_fn(out):
        r = out * dt - batch.targets
        per = np.sum(r * r, axis=1)
        # fsum is exactly rounded, so the value does not depend on batch order.
        return math.fsum(per) / B, (2.0 / B) * r * dt

    return grad_fn


def loss(net: DriftNet, batch: TrainingBatch):
    """Mean-matching loss over ``batch`` and its gradient w.r.t. ``net.params``."""
    if len(batch) == 0:
        raise ConfigurationError("empty batch")
    return net.forward_backward(batch.states, batch.times, _mean_matching(batch))


def loss_value(net: DriftNet, batch: TrainingBatch, chunk: int = 8192) -> float:
    per = []
    for lo in range(0, len(batch), chunk):
        sub = batch.subset(slice(lo, lo + chunk))
        r = net.forward(sub.states, sub.times) * sub.deltas[:, None] - sub.targets
        per.append(np.sum(r * r, axis=1))
    return math.fsum(np.concatenate(per)) / len(batch)


def pool_to_batch(pool) -> TrainingBatch:
    """Flatten references into ``(x_j, t_j, dt_j, z_j)`` rows for ``j < N_T``."""
    pool = list(pool)
    if not pool:
        raise ConfigurationError("training pool is empty")
    xs, ts, ds, zs = [], [], [], []
    for ref in pool:
        grid = ref.grid
        if ref.diffs is None or len(ref.diffs) != grid.n_steps:
            raise ConfigurationError("every reference must carry a full diff history")
        xs.append(ref.states.states[:-1])
        ts.append(grid.times[:-1])
        ds.append(grid.deltas)
        zs.append(ref.diffs)
    return TrainingBatch(np.concatenate(xs), np.concatenate(ts), np.concatenate(ds),
                         np.concatenate(zs))


@dataclass
class TrainOptions:
    lr: float = 1e-4
    batch_size: int = 2048
    epochs: int = 200
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainResult:
    net: DriftNet
    epoch_losses: List[float]
    initial_loss: float
    final_loss: float
    options: TrainOptions = None

    def manifest(self) -> dict:
        o = self.options
        return {"seed": o.seed, "lr": o.lr, "epochs": o.epochs, "batch_size": o.batch_size,
                "optimizer": o.optimizer, "initial_loss": self.initial_loss,
                "final_loss": self.final_loss}


class _Adam:
    def __init__(self, n, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0

    def step(self, params, grad):
        self.k += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.k)
        vhat = self.v / (1 - self.b2 ** self.k)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grad):
        params -= self.lr * grad


def train(net: DriftNet, pool, opts: Optional[TrainOptions] = None, log_fn=None, **kw) -> TrainResult:
    """Fit ``net`` (a copy is trained) to the mean-change records of ``pool``.

    ``pool`` is a list of references or a prebuilt :class:`TrainingBatch`.
    """
    opts = opts or TrainOptions(**kw)
    data = pool if isinstance(pool, TrainingBatch) else pool_to_batch(pool)
    if opts.batch_size < 1 or opts.epochs < 0:
        raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
    net = net.copy()
    if opts.optimizer == "adam":
        optim = _Adam(net.n_params, opts.lr, opts.beta1, opts.beta2, opts.eps)
    elif opts.optimizer == "sgd":
        optim = _SGD(opts.lr)
    else:
        raise ConfigurationError(f"unknown optimizer {opts.optimizer!r}")
    rng = np.random.default_rng(opts.seed)
    initial = loss_value(net, data)
    history = []
    n = len(data)
    for epoch in range(opts.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, opts.batch_size)):
            sub = data.subset(order[lo:lo + opts.batch_size])
            value, grad = loss(net, sub)
            if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                raise NumericalDivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b}")
            optim.step(net.params, grad)
            total += value * len(sub)
        history.append(total / n)
        if log_fn is not None:
            log_fn(epoch, history[-1])
    final = loss_value(net, data)
    return TrainResult(net, history, initial, final, opts)


def sample_learned(net: DriftNet, schedule: DiffusionSchedule, grid: TimeGrid, init, n_paths: int,
                   seed) -> list:
    """Simulate the learned SDE ``dx = f_theta dt + g dB``; no observations involved."""
    model = SdeModel(net, schedule, net.dim, init)
    return simulate(model, grid, n_paths, seed)


def save_checkpoint(path, net: DriftNet, training: Optional[dict] = None):
    """Binary checkpoint: magic, u64 header length, JSON header, little-endian f8 params."""
    header = dict(net.header(), format="cpfas_sde.drift_net", version=CHECKPOINT_VERSION,
                  dtype="<f8", training=training or {})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(net, header)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 16:
        raise CorruptModelError(f"{path}: not a drift-net checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CorruptModelError(f"{path}: bad header ({exc})") from None
    params = np.frombuffer(raw[16 + hlen:], dtype="<f8").astype(float)
    if len(params) != header.get("n_params"):
        raise CorruptModelError(f"{path}: expected {header.get('n_params')} parameters, "
                                f"found {len(params)}")
    emb = SinusoidalEmbedding(header["frequencies"])
    net = DriftNet(header["dim"], emb, header["hidden"], params)
    return net, header
