"""MLP embedder with final L2 normalization, exact backprop, and optimizers.

The embedder maps raw feature vectors through fully connected ReLU layers to a
d-dimensional output, then normalizes each row to the unit sphere. Everything
is float64 and deterministic given (layer dims, seed). Checkpoints use a small
self-describing binary format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidConfig, NonFiniteInput, ShapeMismatch

__all__ = [
    "EPS_NORM",
    "MLPEmbedder",
    "OptimizerConfig",
    "Optimizer",
    "save_checkpoint",
    "load_checkpoint",
]

# Added inside the normalization denominator: z = u / sqrt(|u|^2 + EPS_NORM).
# Keeps the map smooth at u = 0 while staying within 1e-12 of plain u/|u|
# for unit-scale inputs.
EPS_NORM = 1e-12

CHECKPOINT_MAGIC = b"XBNC"
CHECKPOINT_VERSION = 1
_FLAG_FLOAT64 = 1


class MLPEmbedder:
    """Fully connected ReLU network emitting unit-norm embeddings.

    layer_dims = (input_dim, hidden..., output_dim). A single-element tuple is
    the zero-depth embedder: identity followed by normalization. Weights are
    initialized uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases at zero.
    """

    def __init__(self, layer_dims, seed=0):
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 1 or any(d < 1 for d in dims):
            raise InvalidConfig(f"layer_dims must be >= 1 positive sizes, got {layer_dims}")
        self.layer_dims = dims
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            limit = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.frozen_below_last = False

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def embed_dim(self) -> int:
        return self.layer_dims[-1]

    def freeze_all_but_last(self) -> None:
        """Restrict optimizer updates to the final projection layer."""
        if self.n_layers < 1:
            raise InvalidConfig("zero-depth embedder has no layers to freeze")
        self.frozen_below_last = True

    def unfreeze(self) -> None:
        self.frozen_below_last = False

    def trainable_layers(self) -> range:
        if self.frozen_below_last:
            return range(self.n_layers - 1, self.n_layers)
        return range(self.n_layers)

    def forward(self, inputs: np.ndarray) -> tuple[np.ndarray, dict]:
        """Embeddings plus the cache backward() needs.

        Every output row has unit L2 norm (within EPS_NORM rounding).
        """
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(
                f"inputs must be (n, {self.input_dim}), got shape {x.shape}"
            )
        if not np.isfinite(x).all():
            raise NonFiniteInput("embedder inputs contain NaN or infinity")
        a = x
        layer_inputs = []
        relu_masks = []
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            layer_inputs.append(a)
            h = a @ w + b
            if idx < self.n_layers - 1:
                mask = h > 0.0
                relu_masks.append(mask)
                a = np.where(mask, h, 0.0)
            else:
                a = h
        u = a
        s = np.sqrt((u * u).sum(axis=1) + EPS_NORM)
        z = u / s[:, None]
        cache = {
            "layer_inputs": layer_inputs,
            "relu_masks": relu_masks,
            "u": u,
            "s": s,
            "n": x.shape[0],
        }
        return z, cache

    def embed(self, inputs: np.ndarray) -> np.ndarray:
        z, _ = self.forward(inputs)
        return z

    def backward(self, cache: dict, grad_z: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Parameter gradients (dW, db) per layer for d(loss)/d(embeddings) = grad_z.

        Exact chain rule through the normalization: with s = sqrt(|u|^2 + eps),
        dL/du = g/s - u (u.g)/s^3, i.e. the scaled projection that annihilates
        the radial component.
        """
        u, s = cache["u"], cache["s"]
        grad_z = np.asarray(grad_z, dtype=np.float64)
        if grad_z.shape != u.shape:
            raise ShapeMismatch(f"grad_z shape {grad_z.shape} != embeddings shape {u.shape}")
        radial = (u * grad_z).sum(axis=1) / s**3
        g = grad_z / s[:, None] - u * radial[:, None]
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.n_layers  # type: ignore
        for idx in range(self.n_layers - 1, -1, -1):
            a_in = cache["layer_inputs"][idx]
            if a_in.shape[0] != grad_z.shape[0]:
                raise ShapeMismatch("cache does not match grad_z batch size")
            grads[idx] = (a_in.T @ g, g.sum(axis=0))
            if idx > 0:
                g = (g @ self.weights[idx].T) * cache["relu_masks"][idx - 1]
        return grads

    def clone(self) -> "MLPEmbedder":
        """Deep copy of parameters and freeze state."""
        other = MLPEmbedder.__new__(MLPEmbedder)
        other.layer_dims = self.layer_dims
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.frozen_below_last = self.frozen_below_last
        return other


@dataclass(frozen=True)
class OptimizerConfig:
    """Update rule plus step learning-rate schedule.

    kind "sgd" (optional heavy-ball momentum, conventional coupled weight
    decay) or "adamw" (decoupled weight decay). The schedule multiplies the
    learning rate by schedule_gamma every schedule_every epochs;
    schedule_every 0 disables decay.
    """

    kind: str = "adamw"
    learning_rate: float = 1e-4
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule_gamma: float = 1.0
    schedule_every: int = 0

    def validate(self) -> None:
        if self.kind not in ("sgd", "adamw"):
            raise InvalidConfig(f"optimizer kind must be sgd or adamw, got {self.kind!r}")
        if not self.learning_rate > 0:
            raise InvalidConfig(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidConfig(f"betas must be in [0, 1), got ({self.beta1}, {self.beta2})")
        if not 0.0 <= self.schedule_gamma <= 1.0:
            raise InvalidConfig(f"schedule_gamma must be in [0, 1], got {self.schedule_gamma}")
        if self.schedule_every < 0:
            raise InvalidConfig(f"schedule_every must be >= 0, got {self.schedule_every}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"weight_decay must be >= 0, got {self.weight_decay}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.schedule_gamma ** (epoch // self.schedule_every)


class Optimizer:
    """Per-layer update state for one embedder; respects its freeze flag."""

    def __init__(self, config: OptimizerConfig, embedder: MLPEmbedder):
        config.validate()
        self.config = config
        self.t = 0
        self._m = [
            (np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(embedder.weights, embedder.biases)
        ]
        self._v = [
            (np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(embedder.weights, embedder.biases)
        ]

    def step(
        self,
        embedder: MLPEmbedder,
        grads: list[tuple[np.ndarray, np.ndarray]],
        epoch: int,
    ) -> None:
        """One in-place parameter update at the scheduled learning rate.

        Frozen layers are skipped entirely: their parameters and state stay
        bit-identical.
        """
        if len(grads) != embedder.n_layers:
            raise ShapeMismatch(f"got {len(grads)} gradients for {embedder.n_layers} layers")
        cfg = self.config
        lr = cfg.lr_at(epoch)
        self.t += 1
        for idx in embedder.trainable_layers():
            params = (embedder.weights[idx], embedder.biases[idx])
            for slot, (param, grad) in enumerate(zip(params, grads[idx])):
                if grad.shape != param.shape:
                    raise ShapeMismatch(
                        f"gradient shape {grad.shape} != parameter shape {param.shape}"
                    )
                if cfg.kind == "sgd":
                    if cfg.weight_decay:
                        grad = grad + cfg.weight_decay * param
                    buf = self._m[idx][slot]
                    buf *= cfg.momentum
                    buf += grad
                    param -= lr * buf
                else:
                    m = self._m[idx][slot]
                    v = self._v[idx][slot]
                    m *= cfg.beta1
                    m += (1.0 - cfg.beta1) * grad
                    v *= cfg.beta2
                    v += (1.0 - cfg.beta2) * grad**2
                    m_hat = m / (1.0 - cfg.beta1**self.t)
                    v_hat = v / (1.0 - cfg.beta2**self.t)
                    param -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
                    if cfg.weight_decay:
                        param -= lr * cfg.weight_decay * param


def save_checkpoint(embedder: MLPEmbedder, path) -> None:
    """Write parameters to a self-describing little-endian binary file.

    Layout: magic "XBNC", version u16, flags u16 (bit 0: 64-bit floats),
    u32 layer-dims count, the dims as u32s, then per layer the weight matrix
    (row-major) followed by the bias vector.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HHI", CHECKPOINT_VERSION, _FLAG_FLOAT64, len(embedder.layer_dims)))
        f.write(np.asarray(embedder.layer_dims, dtype="<u4").tobytes())
        for w, b in zip(embedder.weights, embedder.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> MLPEmbedder:
    """Rebuild an embedder from save_checkpoint output (bit-exact round trip)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(blob) < 12:
        raise FormatError("truncated checkpoint header", len(blob))
    version, flags, n_dims = struct.unpack_from("<HHI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    dtype = np.dtype("<f8") if flags & _FLAG_FLOAT64 else np.dtype("<f4")
    offset = 12
    if len(blob) < offset + 4 * n_dims:
        raise FormatError("truncated layer dims", len(blob))
    dims = np.frombuffer(blob, dtype="<u4", count=n_dims, offset=offset).tolist()
    offset += 4 * n_dims
    if n_dims < 1 or any(d < 1 for d in dims):
        raise FormatError("invalid layer dims", 12)
    embedder = MLPEmbedder(dims)
    for idx, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        w_bytes = fan_in * fan_out * dtype.itemsize
        b_bytes = fan_out * dtype.itemsize
        if len(blob) < offset + w_bytes + b_bytes:
            raise FormatError(f"truncated parameters for layer {idx}", len(blob))
        w = np.frombuffer(blob, dtype=dtype, count=fan_in * fan_out, offset=offset)
        embedder.weights[idx] = w.reshape(fan_in, fan_out).astype(np.float64)
        offset += w_bytes
        b = np.frombuffer(blob, dtype=dtype, count=fan_out, offset=offset)
        embedder.biases[idx] = b.astype(np.float64)
        offset += b_bytes
    if offset != len(blob):
        raise FormatError("trailing bytes after parameters", offset)
    return embedder
