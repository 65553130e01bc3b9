"""Episodic training: Adam with step-decayed learning rate and best-on-validation selection."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .encoder import EncoderParams, atomic_write_text, backward, embed, init_mlp, save_checkpoint
from .evaluation import run_episode
from .proto import episode_logits, episode_loss, loss_backward_to_embeddings, prototypes_from_labels
from .sampler import EpisodeSpec, EpisodeStream, episode_stream, split_mix

log = logging.getLogger(__name__)

# sub-stream tags under the run seed
SEED_INIT, SEED_TRAIN, SEED_VAL, SEED_TEST, SEED_DROPOUT = 0, 1, 2, 3, 4


class NumericError(ArithmeticError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    episodes_per_epoch: int = 1000
    val_episodes: int = 600
    spec: EpisodeSpec = EpisodeSpec()
    lr0: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    metric: str = "cosine"
    temperature: float = 10.0
    hidden: tuple[int, ...] = (128,)
    embed_dim: int = 64
    dropout_prob: float = 0.1
    resample_val: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        for name in ("epochs", "episodes_per_epoch", "val_episodes", "decay_every", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if self.metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new (params, state); inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


def episode_gradients(params: EncoderParams, x_support, y_support, x_query, y_query, n_way,
                      metric="cosine", temperature=10.0, mode="train", seed=None):
    """Loss and parameter gradients for one episode (support and query share one forward pass)."""
    x = np.concatenate([x_support, x_query])
    emb, trace = embed(params, x, mode, seed)
    ns = len(x_support)
    s_emb, q_emb = emb[:ns], emb[ns:]
    protos = prototypes_from_labels(s_emb, y_support, n_way)
    logits = episode_logits(q_emb, protos.prototypes, metric, temperature)
    loss, d_logits = episode_loss(logits, y_query)
    d_s, d_q = loss_backward_to_embeddings(s_emb, y_support, q_emb, protos, metric, temperature, d_logits)
    dws, dbs = backward(params, trace, np.concatenate([d_s, d_q]))
    grads = []
    for dw, db in zip(dws, dbs):
        grads += [dw, db]
    return loss, grads


def _rebuild(params: EncoderParams, arrays: list[np.ndarray]) -> EncoderParams:
    p = params.copy()
    p.weights = arrays[0::2]
    p.biases = arrays[1::2]
    return p


def validate(embed_fn: Callable, episodes: Iterable, metric="cosine", temperature=10.0) -> float:
    """Mean over episodes of the fraction of correctly classified queries."""
    accs = []
    for ep in episodes:
        logits, q_lab = run_episode(embed_fn, ep, metric, temperature)
        accs.append(float(np.mean(np.argmax(logits, axis=1) == q_lab)))
    return float(np.mean(accs)) if accs else 0.0


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainLog":
        return cls(**json.loads(text))


def train(cfg: TrainConfig, store, train_view, val_view, out_dir=None, init: EncoderParams | None = None,
          progress: Callable[[str], None] | None = None):
    """Run episodic training. Returns ``(log, best_params, last_params)``.

    ``store`` needs a ``batch(items)`` method returning encoder inputs. When
    ``out_dir`` is given, ``best.ckpt`` is rewritten whenever validation
    accuracy strictly improves; ``last.ckpt`` and ``train_log.json`` are
    written at the end.
    """
    if init is None:
        x_probe = store.batch([(next(iter(train_view.values()))[0], None)])
        side = int(round(math.sqrt(x_probe.shape[1] / 3)))
        init = init_mlp((side, side, 3), cfg.hidden, cfg.embed_dim, cfg.dropout_prob,
                        split_mix(cfg.seed, SEED_INIT))
    params = init.copy()
    arrays = params.arrays()
    state = AdamState.zeros_like(arrays)
    out = Path(out_dir) if out_dir is not None else None
    tlog = TrainLog()
    best_acc, best = -1.0, params.copy()
    val_master = split_mix(cfg.seed, SEED_VAL)
    n_way = cfg.spec.n_way

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        stream = EpisodeStream(cfg.spec, "train", split_mix(split_mix(cfg.seed, SEED_TRAIN), epoch),
                               cfg.episodes_per_epoch)
        losses = []
        for ep in episode_stream(train_view, stream):
            xs = store.batch([it for it, _ in ep.support])
            xq = store.batch([it for it, _ in ep.query])
            ys = np.array([lab for _, lab in ep.support])
            yq = np.array([lab for _, lab in ep.query])
            loss, grads = episode_gradients(params, xs, ys, xq, yq, n_way, cfg.metric, cfg.temperature,
                                            "train", split_mix(ep.seed, SEED_DROPOUT))
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss in epoch {epoch}")
            if cfg.grad_clip is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
                if norm > cfg.grad_clip:
                    grads = [g * (cfg.grad_clip / norm) for g in grads]
            try:
                arrays, state = adam_step(arrays, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from None
            params = _rebuild(params, arrays)
            losses.append(loss)

        vm = split_mix(val_master, epoch) if cfg.resample_val else val_master
        val_stream = EpisodeStream(cfg.spec, "val", vm, cfg.val_episodes)
        acc = validate(lambda items: embed(params, store.batch(items), "infer")[0],
                       episode_stream(val_view, val_stream), cfg.metric, cfg.temperature)
        tlog.train_loss.append(float(np.mean(losses)))
        tlog.val_accuracy.append(acc)
        tlog.lr.append(lr)
        if acc > best_acc:
            best_acc, best = acc, params.copy()
            tlog.best_epoch = epoch
            if out is not None:
                save_checkpoint(best, out / "best.ckpt", {"epoch": epoch, "val_accuracy": acc})
        msg = f"epoch {epoch + 1}/{cfg.epochs} lr={lr:.2e} loss={tlog.train_loss[-1]:.4f} val_acc={acc:.4f}"
        log.info(msg)
        if progress:
            progress(msg)

    if out is not None:
        save_checkpoint(params, out / "last.ckpt", {"epoch": cfg.epochs - 1})
        atomic_write_text(out / "train_log.json", tlog.to_json())
    return tlog, best, params
