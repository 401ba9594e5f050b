"""Light CNN (3 conv + 1 FC, softmax) in plain numpy.

Activations are NHWC. Convolutions run in the frequency domain (rfft2 of
the padded input, per-frequency channel mixing). Batch gradients are
reduced over fixed-size micro-batches in a fixed order, so training is
bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft

CHECKPOINT_MAGIC = b"MDSCNN1\0"
N_CLASSES = 5
MICRO_BATCH = 35


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    filter_size: tuple[int, int]
    depth: int
    padding: int = 1
    stride: int = 1
    activation: str = "relu"
    pool_size: int = 2
    pool_stride: int = 2

    def to_dict(self):
        return dict(filter_size=list(self.filter_size), depth=self.depth, padding=self.padding,
                    stride=self.stride, activation=self.activation, pool_size=self.pool_size,
                    pool_stride=self.pool_stride)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["filter_size"] = tuple(d["filter_size"])
        return cls(**d)


LIGHT_CNN_LAYERS = (
    ConvSpec((21, 21), 16),
    ConvSpec((16, 16), 32),
    ConvSpec((4, 4), 64),
)
LIGHT_CNN_INPUT = (128, 128, 3)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 70
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be a positive finite number")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class CnnModel:
    input_shape: tuple[int, int, int]
    layers: tuple[ConvSpec, ...]
    n_classes: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0

    def __post_init__(self):
        if not self.adam_m:
            self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        if not self.adam_v:
            self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def param_names(self) -> list[str]:
        return [f"conv{i}_{s}" for i in range(1, len(self.layers) + 1) for s in ("w", "b")] + ["fc_w", "fc_b"]

    @property
    def dtype(self):
        return self.params["fc_w"].dtype

    def param_counts(self) -> dict[str, int]:
        """Weights plus biases per layer, keyed conv1..convN and fc."""
        counts = {}
        for i in range(1, len(self.layers) + 1):
            counts[f"conv{i}"] = self.params[f"conv{i}_w"].size + self.params[f"conv{i}_b"].size
        counts["fc"] = self.params["fc_w"].size + self.params["fc_b"].size
        return counts

    def param_count(self) -> int:
        return sum(self.param_counts().values())

    def copy(self) -> "CnnModel":
        cp = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return CnnModel(self.input_shape, self.layers, self.n_classes, cp(self.params),
                        cp(self.adam_m), cp(self.adam_v), self.step, self.epoch)


def feature_sides(input_shape, layers) -> list[tuple[int, int]]:
    """(conv output side, pooled side) for each layer."""
    side = input_shape[0]
    out = []
    for spec in layers:
        kh = spec.filter_size[0]
        conv = (side + 2 * spec.padding - kh) // spec.stride + 1
        pooled = (conv - spec.pool_size) // spec.pool_stride + 1
        out.append((conv, pooled))
        side = pooled
    return out


def flatten_length(input_shape, layers) -> int:
    h, w = input_shape[:2]
    for spec in layers:
        kh, kw = spec.filter_size
        h = ((h + 2 * spec.padding - kh) // spec.stride + 1 - spec.pool_size) // spec.pool_stride + 1
        w = ((w + 2 * spec.padding - kw) // spec.stride + 1 - spec.pool_size) // spec.pool_stride + 1
    return h * w * layers[-1].depth


def build_model(input_shape=LIGHT_CNN_INPUT, layers=LIGHT_CNN_LAYERS, n_classes=N_CLASSES,
                seed: int = 0, dtype=np.float32) -> CnnModel:
    """He-normal weights, zero biases, zeroed Adam state."""
    rng = np.random.default_rng(seed)
    params = {}
    in_depth = input_shape[2]
    for i, spec in enumerate(layers, 1):
        kh, kw = spec.filter_size
        fan_in = in_depth * kh * kw
        params[f"conv{i}_w"] = (rng.standard_normal((spec.depth, in_depth, kh, kw)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[f"conv{i}_b"] = np.zeros(spec.depth, dtype)
        in_depth = spec.depth
    flat = flatten_length(input_shape, layers)
    params["fc_w"] = (rng.standard_normal((flat, n_classes)) * np.sqrt(2.0 / flat)).astype(dtype)
    params["fc_b"] = np.zeros(n_classes, dtype)
    return CnnModel(tuple(input_shape), tuple(layers), n_classes, params)


def init_model(seed: int = 0) -> CnnModel:
    """The light CNN: 128x128x3 input, 217,125 parameters."""
    return build_model(seed=seed)


# --- layer kernels ---------------------------------------------------------
# Convolutions are valid cross-correlations computed as circular ones on the
# padded input grid; for outputs inside the valid region nothing wraps.

def _freq_mix(a_f, b_f):
    """Per-frequency matmul: (B, H, Wq, C) x (H, Wq, C, O) -> (B, H, Wq, O)."""
    b, h, wq, c = a_f.shape
    lhs = a_f.reshape(b, h * wq, c).transpose(1, 0, 2)
    out = np.matmul(lhs, b_f.reshape(h * wq, c, -1))
    return out.transpose(1, 0, 2).reshape(b, h, wq, -1)


def _conv_forward(xp, w, bias, stride):
    """Valid cross-correlation of padded NHWC input with [out, in, kh, kw] weights."""
    _, hp, wp, _ = xp.shape
    kh, kw = w.shape[2:]
    x_f = sp_fft.rfft2(xp, axes=(1, 2))
    w_f = sp_fft.rfft2(w.transpose(2, 3, 1, 0), s=(hp, wp), axes=(0, 1))
    z = sp_fft.irfft2(_freq_mix(x_f, np.conj(w_f)), s=(hp, wp), axes=(1, 2))
    z = z[:, :hp - kh + 1:stride, :wp - kw + 1:stride] + bias
    return z.astype(xp.dtype, copy=False), x_f, w_f


def _conv_backward(dz, x_f, w_f, xp_shape, kernel, stride, need_input):
    _, hp, wp, _ = xp_shape
    kh, kw = kernel
    dz_full = np.zeros(xp_shape[:3] + (dz.shape[3],), dz.dtype)
    dz_full[:, :hp - kh + 1:stride, :wp - kw + 1:stride] = dz
    dz_f = sp_fft.rfft2(dz_full, axes=(1, 2))
    # weight gradient: correlation of input with output gradient, summed over batch
    b, h, wq, c = x_f.shape
    lhs = x_f.reshape(b, h * wq, c).transpose(1, 2, 0)
    rhs = np.conj(dz_f).reshape(b, h * wq, -1).transpose(1, 0, 2)
    g_f = np.matmul(lhs, rhs).reshape(h, wq, c, -1)
    dw = sp_fft.irfft2(g_f, s=(hp, wp), axes=(0, 1))[:kh, :kw].transpose(3, 2, 0, 1)
    db = dz.sum(axis=(0, 1, 2))
    dxp = None
    if need_input:
        dxp = sp_fft.irfft2(_freq_mix(dz_f, w_f.transpose(0, 1, 3, 2)), s=(hp, wp), axes=(1, 2))
        dxp = dxp.astype(dz.dtype, copy=False)
    return dw.astype(dz.dtype, copy=False), db, dxp


def _pool_forward(x, size, stride):
    if size != stride:
        raise NotImplementedError("only non-overlapping pooling is supported")
    b, h, w, c = x.shape
    h2, w2 = h // size, w // size
    r = x[:, :h2 * size, :w2 * size].reshape(b, h2, size, w2, size, c)
    r = r.transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, size * size)
    arg = np.argmax(r, axis=-1)  # first occurrence wins ties
    out = np.take_along_axis(r, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, in_shape, size):
    b, h, w, c = in_shape
    h2, w2 = dout.shape[1:3]
    routed = (arg[..., None] == np.arange(size * size)) * dout[..., None]
    routed = routed.reshape(b, h2, w2, c, size, size).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(in_shape, dout.dtype)
    dx[:, :h2 * size, :w2 * size] = routed.reshape(b, h2 * size, w2 * size, c)
    return dx


def _forward(model: CnnModel, x: np.ndarray, keep: bool):
    p = model.params
    caches = []
    a = x
    for i, spec in enumerate(model.layers, 1):
        pad = spec.padding
        xp = np.pad(a, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else a
        z, x_f, w_f = _conv_forward(xp, p[f"conv{i}_w"], p[f"conv{i}_b"], spec.stride)
        r = np.maximum(z, 0)
        pooled, arg = _pool_forward(r, spec.pool_size, spec.pool_stride)
        if keep:
            caches.append((x_f, w_f, xp.shape, z, arg))
        a = pooled
    flat = a.reshape(a.shape[0], -1)
    logits = flat @ p["fc_w"] + p["fc_b"]
    return logits, (caches, flat, a.shape)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _prepare(model: CnnModel, images) -> np.ndarray:
    x = np.asarray(images)
    if x.dtype == np.uint8:
        x = x.astype(model.dtype) / model.dtype.type(255)
    x = x.astype(model.dtype, copy=False)
    if x.shape == model.input_shape:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"expected input {model.input_shape}, got {x.shape[1:]}")
    return x


def forward(model: CnnModel, image: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Class probabilities for one image ``(H, W, C)`` or a batch ``(B, H, W, C)``.

    uint8 input is scaled by 1/255; float input is used as given.
    """
    single = np.asarray(image).shape == model.input_shape
    x = _prepare(model, image)
    out = []
    for s in range(0, x.shape[0], chunk):
        logits, _ = _forward(model, x[s:s + chunk], keep=False)
        out.append(softmax(logits.astype(np.float64)))
    probs = np.concatenate(out)
    return probs[0] if single else probs


def _backward(model: CnnModel, caches, flat, pooled_shape, dlogits, grads):
    p = model.params
    grads["fc_w"] += flat.T @ dlogits
    grads["fc_b"] += dlogits.sum(axis=0)
    d = (dlogits @ p["fc_w"].T).reshape(pooled_shape)
    for i in range(len(model.layers), 0, -1):
        spec = model.layers[i - 1]
        x_f, w_f, xp_shape, z, arg = caches[i - 1]
        d = _pool_backward(d, arg, z.shape, spec.pool_size)
        d = d * (z > 0)
        # the first layer's input gradient is never needed
        dw, db, dxp = _conv_backward(d, x_f, w_f, xp_shape, spec.filter_size, spec.stride, need_input=i > 1)
        grads[f"conv{i}_w"] += dw
        grads[f"conv{i}_b"] += db
        if dxp is not None:
            pad = spec.padding
            d = dxp[:, pad:xp_shape[1] - pad, pad:xp_shape[2] - pad] if pad else dxp


def loss_and_gradients(model: CnnModel, images, labels, micro_batch: int = MICRO_BATCH):
    """Mean cross-entropy over the batch and its gradient for every parameter.

    Returns ``(loss, grads, probabilities)``.
    """
    x = _prepare(model, images)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape[0] != x.shape[0]:
        raise ValueError("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    total = 0.0
    n = x.shape[0]
    probs_all = []
    for s in range(0, n, micro_batch):
        xb, yb = x[s:s + micro_batch], labels[s:s + micro_batch]
        logits, (caches, flat, pshape) = _forward(model, xb, keep=True)
        probs = softmax(logits)
        probs_all.append(probs)
        picked = probs[np.arange(len(yb)), yb]
        total += -float(np.sum(np.log(np.maximum(picked.astype(np.float64), 1e-300))))
        dlogits = probs.copy()
        dlogits[np.arange(len(yb)), yb] -= 1
        dlogits /= n
        _backward(model, caches, flat, pshape, dlogits.astype(model.dtype), grads)
    return total / n, grads, np.concatenate(probs_all)


def adam_step(model: CnnModel, grads: dict, config: TrainConfig) -> CnnModel:
    """One bias-corrected Adam update, in place."""
    model.step += 1
    t = model.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, param in model.params.items():
        g = grads[k]
        m, v = model.adam_m[k], model.adam_v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        param -= (config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)).astype(param.dtype)
    return model


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def train(model: CnnModel, train_images, train_labels, config: TrainConfig,
          val_images=None, val_labels=None, on_epoch=None):
    """Train from ``model.epoch`` up to ``config.epochs``.

    Each epoch's shuffle depends only on (seed, epoch), so a run resumed
    from a checkpoint retraces the uninterrupted one. Returns
    ``(model, history)``; history holds one dict per epoch run here.
    """
    x = np.asarray(train_images)
    y = np.asarray(train_labels, dtype=int)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    history = []
    while model.epoch < config.epochs:
        order = _epoch_order(config.seed, model.epoch, x.shape[0])
        loss_sum, correct = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads, probs = loss_and_gradients(model, x[idx], y[idx])
            adam_step(model, grads, config)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == y[idx]))
        model.epoch += 1
        rec = {"epoch": model.epoch, "train_loss": loss_sum / len(order), "train_accuracy": correct / len(order)}
        if val_images is not None and len(val_images):
            rec.update(zip(("val_loss", "val_accuracy"), _loss_accuracy(model, val_images, val_labels)))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(model, rec)
    return model, history


def _loss_accuracy(model, images, labels):
    probs = forward(model, np.asarray(images))
    labels = np.asarray(labels, dtype=int)
    picked = probs[np.arange(len(labels)), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    return loss, float(np.mean(np.argmax(probs, axis=1) == labels))


def predict(model: CnnModel, images) -> np.ndarray:
    return np.argmax(forward(model, np.asarray(images)), axis=-1)


def confusion_matrix(true, predicted, n_classes: int = N_CLASSES) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true, int), np.asarray(predicted, int)), 1)
    return cm


def evaluate(model: CnnModel, images, labels):
    """``(confusion, accuracy)``; rows are true classes, columns predictions."""
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("empty test set")
    cm = confusion_matrix(labels, predict(model, images), model.n_classes)
    return cm, float(np.trace(cm) / cm.sum())


# --- checkpoints -----------------------------------------------------------

def save_model(model: CnnModel, path) -> Path:
    """Binary checkpoint: magic, JSON shape table, float32 LE params, then Adam state."""
    path = Path(path)
    names = model.param_names
    table = {
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.layers],
        "n_classes": model.n_classes,
        "tensors": [[k, list(model.params[k].shape)] for k in names],
    }
    header = json.dumps(table, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for group in (model.params, model.adam_m, model.adam_v):
            for k in names:
                fh.write(np.ascontiguousarray(group[k], dtype="<f4").tobytes())
        fh.write(struct.pack("<QQ", model.step, model.epoch))
    return path


def load_model(path) -> CnnModel:
    raw = Path(path).read_bytes()
    n_magic = len(CHECKPOINT_MAGIC)
    if raw[:n_magic] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    try:
        (hlen,) = struct.unpack("<I", raw[n_magic:n_magic + 4])
        table = json.loads(raw[n_magic + 4:n_magic + 4 + hlen])
        layers = tuple(ConvSpec.from_dict(d) for d in table["layers"])
        input_shape = tuple(table["input_shape"])
        n_classes = int(table["n_classes"])
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt shape table") from exc
    expected = build_model(input_shape, layers, n_classes, seed=0)
    shapes = [(k, tuple(s)) for k, s in table["tensors"]]
    if shapes != [(k, expected.params[k].shape) for k in expected.param_names]:
        raise CheckpointError(f"{path}: tensor table does not match the architecture")
    pos = n_magic + 4 + hlen
    total = sum(int(np.prod(s)) for _, s in shapes)
    if len(raw) != pos + 3 * total * 4 + 16:
        raise CheckpointError(f"{path}: payload size mismatch")
    groups = []
    for _ in range(3):
        g = {}
        for k, s in shapes:
            n = int(np.prod(s))
            g[k] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(s).astype(np.float32)
            pos += 4 * n
        groups.append(g)
    step, epoch = struct.unpack("<QQ", raw[pos:pos + 16])
    return CnnModel(input_shape, layers, n_classes, groups[0], groups[1], groups[2], step, epoch)


def write_history(history, path) -> Path:
    """One JSON object per line, one line per epoch."""
    path = Path(path)
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
