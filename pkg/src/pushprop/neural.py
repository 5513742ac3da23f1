"""From-scratch MLP with reverse-mode gradients and Adam.

Everything runs in float64. The model is a plain stack of linear layers
with rectifier activations and a softmax head; an optional embedding
matrix in front supports the embed-then-propagate training variant, and
optional batch normalization sits after each hidden linear layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, TrainingError

MODEL_MAGIC = b"GPMD"
MODEL_VERSION = 1

PROB_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, label: int) -> float:
    """Negative log probability of the true class, floor-clamped."""
    if not 0 <= label < p.shape[-1]:
        raise InputError(f"label {label} out of range")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def sharpen(p: np.ndarray, tau: float) -> np.ndarray:
    """Temperature transform p^(1/tau) renormalized; lowers entropy."""
    if not 0.0 < tau <= 1.0:
        raise InputError("tau must lie in (0, 1]")
    u = np.asarray(p, dtype=np.float64) ** (1.0 / tau)
    return u / u.sum(axis=-1, keepdims=True)


def l2_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Squared L2 distance between probability vectors."""
    d = np.asarray(p) - np.asarray(q)
    return float((d * d).sum())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with 0 log 0 = 0 and q floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    terms = np.where(p > 0, p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(q)), 0.0)
    return float(terms.sum())


@dataclass
class BatchNormState:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def init(cls, dim: int) -> "BatchNormState":
        return cls(
            scale=np.ones(dim), shift=np.zeros(dim),
            running_mean=np.zeros(dim), running_var=np.ones(dim),
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.scale.copy(), self.shift.copy(),
                              self.running_mean.copy(), self.running_var.copy())


def batch_normalize(x: np.ndarray, state: BatchNormState, training: bool):
    """Normalize columns; returns (output, cache for backward).

    Training uses batch statistics (biased variance) and folds them into
    the running estimates; inference uses the running estimates only.
    """
    if training:
        if x.shape[0] < 2:
            raise InputError("batch normalization needs batch size >= 2 in training")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        n = x.shape[0]
        state.running_mean[:] = BN_MOMENTUM * state.running_mean + (1 - BN_MOMENTUM) * mean
        state.running_var[:] = (
            BN_MOMENTUM * state.running_var + (1 - BN_MOMENTUM) * var * n / max(n - 1, 1)
        )
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x - mean) * inv_std
    out = x_hat * state.scale + state.shift
    return out, (x_hat, inv_std, training)


def batch_normalize_backward(grad_out, state: BatchNormState, cache):
    """Gradients wrt input, scale, shift."""
    x_hat, inv_std, training = cache
    grad_shift = grad_out.sum(axis=0)
    grad_scale = (grad_out * x_hat).sum(axis=0)
    g = grad_out * state.scale
    if not training:
        return g * inv_std, grad_scale, grad_shift
    n = grad_out.shape[0]
    grad_x = inv_std * (g - g.mean(axis=0) - x_hat * (g * x_hat).mean(axis=0))
    return grad_x, grad_scale, grad_shift


@dataclass
class MlpModel:
    """Optional embedding matrix, weight layers, optional batch norms."""

    embed: np.ndarray | None
    layers: list[tuple[np.ndarray, np.ndarray]]
    norms: list[BatchNormState] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def input_dim(self) -> int:
        if self.embed is not None:
            return self.embed.shape[0]
        return self.layers[0][0].shape[0]

    @property
    def hidden_dim(self) -> int:
        if len(self.layers) > 1:
            return self.layers[0][0].shape[1]
        if self.embed is not None:
            return self.embed.shape[1]
        return 0

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in declaration order (running stats excluded)."""
        params = []
        if self.embed is not None:
            params.append(self.embed)
        for w, b in self.layers:
            params.append(w)
            params.append(b)
        for bn in self.norms:
            params.append(bn.scale)
            params.append(bn.shift)
        return params

    def copy(self) -> "MlpModel":
        return MlpModel(
            embed=None if self.embed is None else self.embed.copy(),
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            norms=[bn.copy() for bn in self.norms],
        )

    def load_values(self, other: "MlpModel") -> None:
        for dst, src in zip(self.parameters(), other.parameters()):
            dst[:] = src
        for bn_dst, bn_src in zip(self.norms, other.norms):
            bn_dst.running_mean[:] = bn_src.running_mean
            bn_dst.running_var[:] = bn_src.running_var


def init_model(rng: np.random.Generator, input_dim: int, hidden_dim: int,
               num_classes: int, num_layers: int, embed: bool = False,
               batchnorm: bool = False) -> MlpModel:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases."""
    if num_layers not in (1, 2):
        raise InputError("num_layers must be 1 or 2")
    if (num_layers == 2 or embed) and hidden_dim < 1:
        raise InputError("hidden_dim must be >= 1 for this architecture")

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    embed_w = glorot(input_dim, hidden_dim) if embed else None
    first_in = hidden_dim if embed else input_dim
    layers = []
    if num_layers == 1:
        layers.append((glorot(first_in, num_classes), np.zeros(num_classes)))
    else:
        layers.append((glorot(first_in, hidden_dim), np.zeros(hidden_dim)))
        layers.append((glorot(hidden_dim, num_classes), np.zeros(num_classes)))
    norms = [BatchNormState.init(w.shape[1]) for w, _ in layers[:-1]] if batchnorm else []
    return MlpModel(embed=embed_w, layers=layers, norms=norms)


def mlp_forward(model: MlpModel, inputs: np.ndarray, training: bool = False):
    """Softmax class probabilities plus the cache needed for backward.

    ``inputs`` are the already-propagated vectors; the embed matrix, when
    present, is applied before propagation and is not part of this pass.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layers[0][0].shape[0]:
        raise InputError(
            f"input dim {x.shape} does not match first layer "
            f"({model.layers[0][0].shape[0]})"
        )
    hidden_caches = []
    h = x
    for li, (w, b) in enumerate(model.layers[:-1]):
        pre = h @ w + b
        bn_cache = None
        z = pre
        if model.norms:
            z, bn_cache = batch_normalize(pre, model.norms[li], training)
        act = np.maximum(z, 0.0)
        hidden_caches.append((h, bn_cache, z > 0))
        h = act
    w, b = model.layers[-1]
    logits = h @ w + b
    probs = softmax(logits)
    cache = (hidden_caches, h, probs)
    return probs, cache


def mlp_backward(model: MlpModel, cache, grad_logits: np.ndarray):
    """Gradients aligned with model.parameters(), plus grad wrt inputs."""
    hidden_caches, last_in, _probs = cache
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = []
    norm_grads: list[tuple[np.ndarray, np.ndarray]] = []

    g = np.asarray(grad_logits, dtype=np.float64)
    w_last, _ = model.layers[-1]
    layer_grads.append((last_in.T @ g, g.sum(axis=0)))
    g = g @ w_last.T
    for li in range(len(model.layers) - 2, -1, -1):
        h_in, bn_cache, relu_mask = hidden_caches[li]
        g = g * relu_mask
        if model.norms:
            g, g_scale, g_shift = batch_normalize_backward(g, model.norms[li], bn_cache)
            norm_grads.append((g_scale, g_shift))
        w, _ = model.layers[li]
        layer_grads.append((h_in.T @ g, g.sum(axis=0)))
        g = g @ w.T

    grads: list[np.ndarray] = []
    if model.embed is not None:
        # embed gradient is produced by the propagation scatter, not here
        grads.append(np.zeros_like(model.embed))
    for gw, gb in reversed(layer_grads):
        grads.append(gw)
        grads.append(gb)
    for g_scale, g_shift in reversed(norm_grads):
        grads.append(g_scale)
        grads.append(g_shift)
    return grads, g


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient on probabilities back to the logits."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


@dataclass
class AdamState:
    """Adam with global-norm clipping and decoupled weight decay."""

    lr: float
    weight_decay: float = 0.0
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray]) -> None:
    """One in-place update; raises TrainingError on non-finite gradients."""
    if len(params) != len(grads):
        raise InputError("params and grads must align")
    for g in grads:
        if not np.isfinite(g).all():
            raise TrainingError("non-finite gradient")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]

    if state.clip_norm is not None:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads))
        if total > state.clip_norm:
            scale = state.clip_norm / total
            grads = [g * scale for g in grads]

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class PropagationSettings:
    """Propagation configuration stored alongside the model weights."""

    delta: float
    scheme: str
    alpha: float | None
    order: int


def save_model(path, model: MlpModel, settings: PropagationSettings) -> None:
    from .push import _SCHEME_TAG  # single source of truth for the tags

    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        alpha = 0.0 if settings.alpha is None else settings.alpha
        fh.write(struct.pack(
            "<IIIIBBdBdI",
            model.input_dim, model.hidden_dim, model.num_classes,
            model.num_layers, int(model.embed is not None), int(bool(model.norms)),
            settings.delta, _SCHEME_TAG[settings.scheme], alpha, settings.order,
        ))
        if model.embed is not None:
            fh.write(model.embed.astype("<f8").tobytes())
        for w, b in model.layers:
            fh.write(w.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())
        for bn in model.norms:
            for arr in (bn.scale, bn.shift, bn.running_mean, bn.running_var):
                fh.write(arr.astype("<f8").tobytes())


def load_model(path) -> tuple[MlpModel, PropagationSettings]:
    from .push import _TAG_SCHEME

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise InputError(f"{path}: not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != MODEL_VERSION:
        raise InputError(f"{path}: unsupported model version {version}")
    header = struct.unpack_from("<IIIIBBdBdI", data, 8)
    input_dim, hidden_dim, num_classes, num_layers, has_embed, has_bn = header[:6]
    delta, tag, alpha, order = header[6:]
    if tag not in _TAG_SCHEME:
        raise InputError(f"{path}: unknown scheme tag {tag}")
    scheme = _TAG_SCHEME[tag]
    offset = 8 + struct.calcsize("<IIIIBBdBdI")

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        return arr.reshape(shape).astype(np.float64)

    embed = take((input_dim, hidden_dim)) if has_embed else None
    first_in = hidden_dim if has_embed else input_dim
    dims = []
    if num_layers == 1:
        dims.append((first_in, num_classes))
    else:
        dims.append((first_in, hidden_dim))
        dims.append((hidden_dim, num_classes))
    layers = [(take(d), take((d[1],))) for d in dims]
    norms = []
    if has_bn:
        for w, _ in layers[:-1]:
            norms.append(BatchNormState(
                scale=take((w.shape[1],)), shift=take((w.shape[1],)),
                running_mean=take((w.shape[1],)), running_var=take((w.shape[1],)),
            ))
    if offset != len(data):
        raise InputError(f"{path}: trailing bytes after parameters")
    model = MlpModel(embed=embed, layers=layers, norms=norms)
    settings = PropagationSettings(
        delta=delta, scheme=scheme,
        alpha=None if scheme != "ppr" else alpha, order=order,
    )
    return model, settings
