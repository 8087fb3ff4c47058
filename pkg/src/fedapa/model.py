"""Feed-forward encoder + linear classifier with hand-written backprop.

The encoder is a tanh MLP whose last layer is affine followed by a norm clamp
``r = z / max(1, ||z||)``, so every embedding lies in the closed unit ball.
Inputs are batched: ``x`` has shape ``(B, d_in)`` (a 1-D vector is treated as a
batch of one).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DimensionMismatch

ARCH_PRESETS: dict[str, tuple[int, ...]] = {
    "tiny": (32,),
    "middle": (64, 64),
    "large": (128, 128, 128),
}

DEFAULT_D_FEAT = 256


class UnknownArch(KeyError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    act: str  # "tanh" | "clip" (final encoder layer) | "linear" (classifier)


@dataclass
class ModelParams:
    """Encoder layers plus classifier. Also used as the gradient shadow."""

    encoder: list[DenseLayer]
    classifier: DenseLayer
    arch: str = "custom"

    @property
    def d_in(self) -> int:
        return self.encoder[0].W.shape[0]

    @property
    def d_feat(self) -> int:
        return self.encoder[-1].W.shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier.W.shape[1]

    def layers(self) -> list[DenseLayer]:
        return [*self.encoder, self.classifier]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.extend((layer.W, layer.b))
        return out

    def encoder_tensors(self) -> list[np.ndarray]:
        out = []
        for layer in self.encoder:
            out.extend((layer.W, layer.b))
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> ModelParams:
        return ModelParams(
            [DenseLayer(l.W.copy(), l.b.copy(), l.act) for l in self.encoder],
            DenseLayer(self.classifier.W.copy(), self.classifier.b.copy(), "linear"),
            self.arch,
        )

    def zeros_like(self) -> ModelParams:
        z = self.copy()
        for t in z.tensors():
            t[...] = 0.0
        return z

    def flat(self, encoder_only: bool = False) -> np.ndarray:
        ts = self.encoder_tensors() if encoder_only else self.tensors()
        return np.concatenate([t.ravel() for t in ts])

    def set_flat(self, vec: np.ndarray, encoder_only: bool = False) -> None:
        ts = self.encoder_tensors() if encoder_only else self.tensors()
        if vec.size != sum(t.size for t in ts):
            raise ShapeMismatch("flat vector length does not match parameter count")
        pos = 0
        for t in ts:
            t[...] = vec[pos : pos + t.size].reshape(t.shape)
            pos += t.size


GradShadow = ModelParams


def init_model(
    arch: str,
    d_in: int,
    num_classes: int,
    rng: np.random.Generator,
    d_feat: int = DEFAULT_D_FEAT,
) -> ModelParams:
    """Draw a preset architecture with LeCun-normal weights and zero biases."""
    if arch not in ARCH_PRESETS:
        raise UnknownArch(f"unknown architecture {arch!r}; choose from {sorted(ARCH_PRESETS)}")
    widths = (d_in, *ARCH_PRESETS[arch], d_feat)
    encoder = []
    for k in range(len(widths) - 1):
        fan_in, fan_out = widths[k], widths[k + 1]
        W = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        act = "clip" if k == len(widths) - 2 else "tanh"
        encoder.append(DenseLayer(W, np.zeros(fan_out), act))
    Wc = rng.standard_normal((d_feat, num_classes)) / np.sqrt(d_feat)
    return ModelParams(encoder, DenseLayer(Wc, np.zeros(num_classes), "linear"), arch)


@dataclass
class EncoderCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    outputs: list[np.ndarray] = field(default_factory=list)  # post-activation
    pre_norm: np.ndarray | None = None  # ||z|| of final layer, shape (B,)


def _as_batch(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionMismatch(f"expected input dim {dim}, got shape {x.shape}")
    return x


def encoder_forward(m: ModelParams, x: np.ndarray) -> tuple[np.ndarray, EncoderCache]:
    h = _as_batch(x, m.d_in)
    cache = EncoderCache()
    for layer in m.encoder:
        cache.inputs.append(h)
        z = h @ layer.W + layer.b
        if layer.act == "tanh":
            h = np.tanh(z)
        else:
            n = np.sqrt(np.einsum("ij,ij->i", z, z))
            cache.pre_norm = n
            h = z / np.maximum(1.0, n)[:, None]
        cache.outputs.append(h)
    return h, cache


def embed(m: ModelParams, x: np.ndarray) -> np.ndarray:
    """Embeddings only; a single input vector gives a single output vector."""
    r = encoder_forward(m, x)[0]
    return r[0] if np.ndim(x) == 1 else r


def classifier_forward(m: ModelParams, r: np.ndarray) -> np.ndarray:
    single = np.ndim(r) == 1
    z = _as_batch(r, m.d_feat) @ m.classifier.W + m.classifier.b
    return z[0] if single else z


def encoder_backward(
    m: ModelParams, cache: EncoderCache, d_r: np.ndarray, grads: ModelParams
) -> None:
    """Accumulate encoder gradients for upstream gradient ``d_r`` into ``grads``."""
    g = d_r
    for k in range(len(m.encoder) - 1, -1, -1):
        layer = m.encoder[k]
        out = cache.outputs[k]
        if layer.act == "tanh":
            dz = g * (1.0 - out * out)
        else:
            n = cache.pre_norm
            big = n > 1.0
            dz = g.copy()
            if np.any(big):
                rb = out[big]
                gb = g[big]
                proj = np.einsum("ij,ij->i", rb, gb)
                dz[big] = (gb - rb * proj[:, None]) / n[big][:, None]
        inp = cache.inputs[k]
        grads.encoder[k].W += inp.T @ dz
        grads.encoder[k].b += dz.sum(axis=0)
        if k > 0:
            g = dz @ layer.W.T


def classifier_backward(
    m: ModelParams, r: np.ndarray, d_logits: np.ndarray, grads: ModelParams
) -> np.ndarray:
    """Accumulate classifier gradients; return the gradient w.r.t. ``r``."""
    grads.classifier.W += r.T @ d_logits
    grads.classifier.b += d_logits.sum(axis=0)
    return d_logits @ m.classifier.W.T


@dataclass
class OptimizerState:
    velocity: ModelParams
    lr: float = 1e-2
    momentum: float = 0.5
    weight_decay: float = 1e-5

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be nonnegative")


def make_optimizer(
    m: ModelParams, lr: float = 1e-2, momentum: float = 0.5, weight_decay: float = 1e-5
) -> OptimizerState:
    return OptimizerState(m.zeros_like(), lr, momentum, weight_decay)


def sgd_step(
    m: ModelParams, grads: ModelParams, opt: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """In-place momentum SGD: ``v = mu*v + (g + wd*w); w -= lr*v``."""
    ws, gs, vs = m.tensors(), grads.tensors(), opt.velocity.tensors()
    if len(ws) != len(gs) or any(w.shape != g.shape for w, g in zip(ws, gs)):
        raise ShapeMismatch("gradient shapes do not match parameters")
    for w, g, v in zip(ws, gs, vs):
        v *= opt.momentum
        v += g
        if opt.weight_decay:
            v += opt.weight_decay * w
        w -= opt.lr * v
    return m, opt


_MAGIC = b"FAPA"
_CKPT_VERSION = 1


def save_checkpoint(m: ModelParams, path: str | Path) -> None:
    """Little-endian binary: header, then per tensor its shape and float64 payload."""
    arch = m.arch.encode("utf-8")
    buf = [_MAGIC, struct.pack("<III", _CKPT_VERSION, len(m.encoder), len(arch)), arch]
    for layer in m.layers():
        act = layer.act.encode("ascii")
        buf.append(struct.pack("<I", len(act)) + act)
        for t in (layer.W, layer.b):
            buf.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            buf.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    pos = 4
    version, n_enc, n_arch = struct.unpack_from("<III", data, pos)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 12
    arch = data[pos : pos + n_arch].decode("utf-8")
    pos += n_arch
    layers = []
    for _ in range(n_enc + 1):
        (n_act,) = struct.unpack_from("<I", data, pos)
        pos += 4
        act = data[pos : pos + n_act].decode("ascii")
        pos += n_act
        pair = []
        for _ in range(2):
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            pair.append(arr.astype(np.float64))
        layers.append(DenseLayer(pair[0], pair[1], act))
    return ModelParams(layers[:-1], layers[-1], arch)
