"""Image-to-embedding encoders with hand-written backprop.

Two variants:

* ``mlp``: standardize -> (affine -> ReLU -> inverted dropout)* -> affine.
* ``random_projection``: a fixed seeded Gaussian matrix applied to the raw
  flattened tensor. Not trainable; used as the baseline.

Inputs are images downsampled to ``DOWNSAMPLE`` x ``DOWNSAMPLE`` RGB and
scaled to [0, 1], flattened row-major (H, W, C).
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import normalize, resize_bilinear

DOWNSAMPLE = 32
STD_MEAN = 0.5
STD_SCALE = 2.0
CHECKPOINT_FORMAT = "protofundus-encoder"
CHECKPOINT_VERSION = 1

VARIANTS = ("mlp", "random_projection")


class EncoderError(ValueError):
    pass


@dataclass
class EncoderParams:
    variant: str
    input_dims: tuple[int, int, int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_prob: float = 0.1
    standardize: tuple[float, float] = (STD_MEAN, STD_SCALE)

    @property
    def input_size(self) -> int:
        w, h, c = self.input_dims
        return w * h * c

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def trainable(self) -> bool:
        return self.variant == "mlp"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise EncoderError(f"unknown encoder variant {self.variant!r}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise EncoderError(f"dropout_prob must lie in [0, 1), got {self.dropout_prob}")
        prev = self.input_size
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != prev or b.shape != (w.shape[1],):
                raise EncoderError(f"layer {i}: weight {w.shape} / bias {b.shape} do not chain from {prev}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise EncoderError(f"layer {i} has non-finite parameters")
            prev = w.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.variant, self.input_dims, [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.dropout_prob, self.standardize)

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in optimizer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each affine layer
    pre: list[np.ndarray] = field(default_factory=list)      # hidden pre-activations
    masks: list[np.ndarray] = field(default_factory=list)    # scaled dropout masks (0 or 1/(1-p))


def init_mlp(input_dims=(DOWNSAMPLE, DOWNSAMPLE, 3), hidden=(128,), embed_dim=64,
             dropout_prob=0.1, seed=0) -> EncoderParams:
    """He-uniform fan-in weights, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [int(np.prod(input_dims))] + list(hidden) + [embed_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    p = EncoderParams("mlp", tuple(input_dims), weights, biases, dropout_prob)
    p.validate()
    return p


def init_random_projection(input_dims=(DOWNSAMPLE, DOWNSAMPLE, 3), embed_dim=64, seed=0) -> EncoderParams:
    d = int(np.prod(input_dims))
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d, embed_dim)) / math.sqrt(d)
    p = EncoderParams("random_projection", tuple(input_dims), [w], [np.zeros(embed_dim)], 0.0)
    p.validate()
    return p


def prepare_input(img: np.ndarray, size: int = DOWNSAMPLE) -> np.ndarray:
    """Downsample an RGB raster to ``size`` x ``size`` and flatten to [0, 1] floats."""
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return normalize(resize_bilinear(img, size, size)).ravel()


def embed(params: EncoderParams, x: np.ndarray, mode: str = "infer", seed: int | None = None):
    """Embed a batch ``x`` of shape (B, input_size) or a single vector.

    Returns ``(embeddings, trace)``. ``mode="train"`` enables dropout driven
    by ``seed``.
    """
    single = x.ndim == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.input_size:
        raise EncoderError(f"input has {x.shape[1]} features, encoder expects {params.input_size}")
    if mode not in ("train", "infer"):
        raise EncoderError(f"mode must be 'train' or 'infer', got {mode!r}")
    for w, b in zip(params.weights, params.biases):
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise EncoderError("encoder has non-finite parameters")

    trace = ForwardTrace()
    if params.variant == "random_projection":
        trace.inputs.append(x)
        e = x @ params.weights[0] + params.biases[0]
        return (e[0] if single else e), trace

    mean, scale = params.standardize
    h = (x - mean) * scale
    p = params.dropout_prob
    rng = np.random.default_rng(seed) if (mode == "train" and p > 0) else None
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        trace.inputs.append(h)
        a = h @ w + b
        if i == last:
            h = a
            break
        trace.pre.append(a)
        r = np.maximum(a, 0.0)
        if rng is not None:
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
        else:
            mask = np.ones_like(a)
        trace.masks.append(mask)
        h = r * mask
    return (h[0] if single else h), trace


def backward(params: EncoderParams, trace: ForwardTrace, d_embed: np.ndarray):
    """Gradients ``(dW list, db list)`` of a scalar loss given dL/d(embeddings)."""
    if not params.trainable:
        return [], []
    d = np.atleast_2d(np.asarray(d_embed, dtype=np.float64))
    n = len(params.weights)
    if len(trace.inputs) != n or len(trace.pre) != n - 1 or len(trace.masks) != n - 1:
        raise EncoderError("trace does not match encoder layout")
    if d.shape != (trace.inputs[0].shape[0], params.embed_dim):
        raise EncoderError(f"d_embed shape {d.shape} does not match batch/embedding size")
    dws, dbs = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        dws[i] = trace.inputs[i].T @ d
        dbs[i] = d.sum(axis=0)
        if i == 0:
            break
        dh = d @ params.weights[i].T
        d = dh * trace.masks[i - 1] * (trace.pre[i - 1] > 0)
    return dws, dbs


# --- checkpoints --------------------------------------------------------------

def params_to_dict(params: EncoderParams, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": params.variant,
        "input_dims": list(params.input_dims),
        "layer_sizes": params.layer_sizes,
        "dropout_prob": params.dropout_prob,
        "preprocess": {
            "downsample": params.input_dims[0],
            "standardize_mean": params.standardize[0],
            "standardize_scale": params.standardize[1],
        },
        "weights": [w.ravel().tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "extra": extra or {},
    }


def params_from_dict(d: dict) -> EncoderParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise EncoderError("not an encoder checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise EncoderError(f"unsupported checkpoint version {d.get('version')}")
    sizes = d["layer_sizes"]
    weights = [np.asarray(w, dtype=np.float64).reshape(a, b)
               for w, a, b in zip(d["weights"], sizes[:-1], sizes[1:])]
    biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
    pre = d["preprocess"]
    p = EncoderParams(d["variant"], tuple(d["input_dims"]), weights, biases, float(d["dropout_prob"]),
                      (float(pre["standardize_mean"]), float(pre["standardize_scale"])))
    p.validate()
    return p


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params: EncoderParams, path, extra: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(params_to_dict(params, extra)))


def load_checkpoint(path) -> EncoderParams:
    path = Path(path)
    if not path.is_file():
        raise EncoderError(f"checkpoint not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EncoderError(f"{path}: not valid JSON ({exc})") from None
    return params_from_dict(d)
