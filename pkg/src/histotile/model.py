"""Small residual CNN patch classifier written directly in numpy.

Architecture (all convolutions 3x3, zero "same" padding)::

    stem conv -> relu
    for each stage s:
        [s > 0]  stride-2 conv (widths[s-1] -> widths[s]) -> relu
        blocks_per_stage x  out = relu(conv2(relu(conv1(x))) + x)
    global average pooling -> fully connected (4 outputs) -> softmax

Training is mini-batch SGD with Nesterov momentum on the cross-entropy
loss. Weights are He-initialized from the training seed; pretrained
ImageNet weights are not used.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from histotile.dataset import NUM_CLASSES, ClassLabel
from histotile.images import resize_bilinear
from histotile.predictions import PredictionRecord
from histotile.tiling import Patch

PROB_FLOOR = 1e-12
PARAMS_MAGIC = b"HTPARAMS"
PARAMS_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    widths: tuple[int, ...] = (8, 16)
    blocks_per_stage: int = 1
    learning_rate: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 32
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.input_size < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError("input_size and widths must be positive")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")


# -- layers -----------------------------------------------------------------

def _conv_forward(x, w, b, stride=1):
    k = w.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2), (x.shape, cols, stride)


def _conv_backward(dout, w, cache):
    (n, c, h, wd), cols, stride = cache
    f, _, k, _ = w.shape
    pad = k // 2
    ho, wo = dout.shape[2:]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = np.ascontiguousarray(
        (d @ w.reshape(f, -1)).reshape(n, ho, wo, c, k, k).transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
    return dxp[:, :, pad:pad + h, pad:pad + wd], dw, db


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- parameters -------------------------------------------------------------

def _plan(params: Mapping[str, np.ndarray]):
    """Recover (stage, has_down, n_blocks) from parameter names."""
    stages = []
    s = 0
    while any(k.startswith(f"stage{s}.") for k in params):
        n_blocks = 0
        while f"stage{s}.block{n_blocks}.conv1.w" in params:
            n_blocks += 1
        stages.append((s, f"stage{s}.down.w" in params, n_blocks))
        s += 1
    return stages


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"stem.w": (config.widths[0], 3, 3, 3), "stem.b": (config.widths[0],)}
    for s, width in enumerate(config.widths):
        if s > 0:
            shapes[f"stage{s}.down.w"] = (width, config.widths[s - 1], 3, 3)
            shapes[f"stage{s}.down.b"] = (width,)
        for b in range(config.blocks_per_stage):
            for conv in ("conv1", "conv2"):
                shapes[f"stage{s}.block{b}.{conv}.w"] = (width, width, 3, 3)
                shapes[f"stage{s}.block{b}.{conv}.b"] = (width,)
    shapes["fc.w"] = (NUM_CLASSES, config.widths[-1])
    shapes["fc.b"] = (NUM_CLASSES,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like_params(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# -- forward / backward -----------------------------------------------------

def _check_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] < 1:
        raise ShapeError(f"expected a non-empty (N, C, H, W) batch, got shape {x.shape}")
    if x.shape[1] != params["stem.w"].shape[1]:
        raise ShapeError(f"expected {params['stem.w'].shape[1]} input channels, got {x.shape[1]}")
    return x


def _forward(params, x):
    tape = {}
    h, tape["stem"] = _conv_forward(x, params["stem.w"], params["stem.b"])
    tape["stem.mask"] = h > 0
    h = np.maximum(h, 0)
    for s, has_down, n_blocks in _plan(params):
        if has_down:
            h, tape[f"stage{s}.down"] = _conv_forward(
                h, params[f"stage{s}.down.w"], params[f"stage{s}.down.b"], stride=2)
            tape[f"stage{s}.down.mask"] = h > 0
            h = np.maximum(h, 0)
        for b in range(n_blocks):
            pre = f"stage{s}.block{b}"
            a, tape[pre + ".conv1"] = _conv_forward(h, params[pre + ".conv1.w"], params[pre + ".conv1.b"])
            tape[pre + ".conv1.mask"] = a > 0
            a = np.maximum(a, 0)
            f, tape[pre + ".conv2"] = _conv_forward(a, params[pre + ".conv2.w"], params[pre + ".conv2.b"])
            out = f + h
            tape[pre + ".mask"] = out > 0
            h = np.maximum(out, 0)
    tape["gap.shape"] = h.shape
    feat = h.mean(axis=(2, 3))
    tape["feat"] = feat
    logits = feat @ params["fc.w"].T + params["fc.b"]
    return logits, tape


def _backward(params, tape, dlogits):
    grads = {}
    grads["fc.w"] = dlogits.T @ tape["feat"]
    grads["fc.b"] = dlogits.sum(axis=0)
    dfeat = dlogits @ params["fc.w"]
    n, c, h, w = tape["gap.shape"]
    dh = np.broadcast_to(dfeat[:, :, None, None] / (h * w), (n, c, h, w)).copy()
    for s, has_down, n_blocks in reversed(_plan(params)):
        for b in reversed(range(n_blocks)):
            pre = f"stage{s}.block{b}"
            dout = dh * tape[pre + ".mask"]
            da, grads[pre + ".conv2.w"], grads[pre + ".conv2.b"] = _conv_backward(
                dout, params[pre + ".conv2.w"], tape[pre + ".conv2"])
            da = da * tape[pre + ".conv1.mask"]
            dx, grads[pre + ".conv1.w"], grads[pre + ".conv1.b"] = _conv_backward(
                da, params[pre + ".conv1.w"], tape[pre + ".conv1"])
            dh = dx + dout
        if has_down:
            dh = dh * tape[f"stage{s}.down.mask"]
            dh, grads[f"stage{s}.down.w"], grads[f"stage{s}.down.b"] = _conv_backward(
                dh, params[f"stage{s}.down.w"], tape[f"stage{s}.down"])
    dh = dh * tape["stem.mask"]
    _, grads["stem.w"], grads["stem.b"] = _conv_backward(dh, params["stem.w"], tape["stem"])
    for name, value in params.items():
        grads.setdefault(name, np.zeros_like(value))
    return {k: grads[k] for k in params}


def logits(params: Mapping[str, np.ndarray], x) -> np.ndarray:
    return _forward(params, _check_input(params, x))[0]


def forward(params: Mapping[str, np.ndarray], x) -> np.ndarray:
    """Class probabilities, shape ``(N, 4)``, for a float ``(N, 3, H, W)`` batch."""
    return softmax(logits(params, x))


def _labels_array(labels) -> np.ndarray:
    return np.array([int(v) for v in labels], dtype=np.int64)


def loss(probs, labels) -> float:
    """Mean cross-entropy, true-class probability floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    y = _labels_array(labels)
    if probs.shape[0] != y.shape[0]:
        raise ShapeError("probs and labels differ in length")
    p_true = probs[np.arange(len(y)), y]
    return float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))


def loss_and_grads(params: Mapping[str, np.ndarray], x, labels):
    x = _check_input(params, x)
    y = _labels_array(labels)
    if y.shape[0] != x.shape[0]:
        raise ShapeError("batch and labels differ in length")
    z, tape = _forward(params, x)
    probs = softmax(z)
    n = len(y)
    p_true = probs[np.arange(n), y]
    value = float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    # the floored loss is flat where p_true < PROB_FLOOR
    dlogits[p_true < PROB_FLOOR] = 0.0
    dlogits /= n
    return value, _backward(params, tape, dlogits), probs


def sgd_nesterov_step(params, grads, velocity, lr: float, momentum: float, nesterov: bool = True):
    """One SGD step with (Nesterov) momentum.

    v' = momentum * v - lr * g
    theta' = theta + momentum * v' - lr * g     (nesterov)
    theta' = theta + v'                         (classical momentum)

    Works on a single array/scalar or on matching name -> array mappings.
    Returns new ``(params, velocity)``; inputs are not modified.
    """
    if isinstance(params, Mapping):
        if params.keys() != grads.keys() or params.keys() != velocity.keys():
            raise ShapeError("params, grads and velocity have different names")
        new_p, new_v = {}, {}
        for k in params:
            new_p[k], new_v[k] = sgd_nesterov_step(params[k], grads[k], velocity[k], lr, momentum, nesterov)
        return new_p, new_v
    theta, g, v = np.asarray(params, float), np.asarray(grads, float), np.asarray(velocity, float)
    if theta.shape != g.shape or theta.shape != v.shape:
        raise ShapeError(f"shape mismatch {theta.shape} / {g.shape} / {v.shape}")
    v_new = momentum * v - lr * g
    theta_new = theta + momentum * v_new - lr * g if nesterov else theta + v_new
    if theta_new.ndim == 0:
        return float(theta_new), float(v_new)
    return theta_new, v_new


# -- data -------------------------------------------------------------------

def prepare_pixels(patches: Sequence[Patch], input_size: int) -> np.ndarray:
    """Downscale patches to ``input_size`` and stack as uint8 ``(N, 3, S, S)``."""
    out = np.empty((len(patches), 3, input_size, input_size), dtype=np.uint8)
    for i, p in enumerate(patches):
        px = np.asarray(p.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"patch {p.name} has shape {px.shape}, expected (H, W, 3)")
        out[i] = resize_bilinear(px, input_size).transpose(2, 0, 1)
    return out


def to_float(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 127.5 - 1.0


def _predict_probs(params, pixels, batch_size):
    chunks = [forward(params, to_float(pixels[i:i + batch_size]))
              for i in range(0, len(pixels), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, NUM_CLASSES))


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


def train(train_patches: Sequence[Patch], val_patches: Sequence[Patch],
          config: ModelConfig = ModelConfig()) -> TrainResult:
    """Fixed-budget training; returns the parameters of the best epoch.

    "Best" is highest validation accuracy (training accuracy when there is
    no validation set), earliest epoch on ties. Batches are drawn from a
    permutation per epoch using ``numpy.random.default_rng(config.seed)``.
    """
    if not train_patches:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    result = TrainResult(params=copy.deepcopy(params))
    if config.max_epochs == 0:
        return result

    x_train = prepare_pixels(train_patches, config.input_size)
    y_train = _labels_array(p.label for p in train_patches)
    x_val = prepare_pixels(val_patches, config.input_size) if val_patches else None
    y_val = _labels_array(p.label for p in val_patches) if val_patches else None
    velocity = zeros_like_params(params)
    best_score = -1.0
    n = len(x_train)

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch_loss, grads, probs = loss_and_grads(params, to_float(x_train[idx]), y_train[idx])
            total_loss += batch_loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y_train[idx]))
            params, velocity = sgd_nesterov_step(params, grads, velocity, config.learning_rate,
                                                 config.momentum, config.nesterov)
        metrics = {"epoch": epoch + 1, "train_loss": total_loss / n, "train_accuracy": correct / n}
        score = metrics["train_accuracy"]
        if x_val is not None:
            probs = _predict_probs(params, x_val, config.batch_size)
            metrics["val_loss"] = loss(probs, y_val)
            metrics["val_accuracy"] = float(np.mean(probs.argmax(axis=1) == y_val))
            score = metrics["val_accuracy"]
        result.history.append(metrics)
        if score > best_score:
            best_score = score
            result.params = copy.deepcopy(params)
            result.best_epoch = epoch + 1
    return result


def predict(params: Mapping[str, np.ndarray], patches: Sequence[Patch],
            config: ModelConfig = ModelConfig()) -> list[PredictionRecord]:
    if not patches:
        return []
    pixels = prepare_pixels(patches, config.input_size)
    probs = _predict_probs(params, pixels, config.batch_size)
    return [PredictionRecord.from_probs(p.source_image_id, p.anchor, p.augmentation, row)
            for p, row in zip(patches, probs)]


def accuracy_on(params, patches: Sequence[Patch], config: ModelConfig = ModelConfig()) -> float:
    records = predict(params, patches, config)
    return float(np.mean([r.label == p.label for r, p in zip(records, patches)]))


# -- serialization ----------------------------------------------------------
# header: magic (8 bytes), version u32, tensor count u32
# tensor: name length u32, utf-8 name, ndim u32, dims u32 * ndim, float64 LE data

def save_params(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC + struct.pack("<II", PARAMS_VERSION, len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            arr = np.asarray(value, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported parameter file version {version}")
    pos = 16
    params = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            params[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt parameter file ({exc})") from None
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in parameter file")
    return params


def config_for_params(params: Mapping[str, np.ndarray], **overrides) -> ModelConfig:
    """Rebuild the architecture fields of a ModelConfig from parameter shapes."""
    plan = _plan(params)
    widths = tuple(int(params["stem.w"].shape[0]) if s == 0 else int(params[f"stage{s}.down.w"].shape[0])
                   for s, _, _ in plan)
    blocks = plan[0][2] if plan else 0
    return ModelConfig(widths=widths, blocks_per_stage=blocks, **overrides)
