"""Prototypes, similarity scoring and the prototypical softmax loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

METRICS = ("cosine", "euclidean")
DEFAULT_TEMPERATURE = 10.0


class ProtoError(ValueError):
    pass


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: np.ndarray          # (n_way, embed_dim)
    class_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.prototypes) != len(self.class_names):
            raise ProtoError("prototype count and class name count differ")
        if not np.isfinite(self.prototypes).all():
            raise ProtoError("non-finite prototype")


@dataclass(frozen=True)
class EpisodeLogits:
    matrix: np.ndarray              # (n_query_total, n_way)
    temperature: float
    metric: str = "cosine"


def compute_prototypes(support_embeddings: Sequence[np.ndarray], class_names=None) -> PrototypeSet:
    """Per-class arithmetic mean, summed in support order."""
    if class_names is None:
        class_names = tuple(str(i) for i in range(len(support_embeddings)))
    protos = []
    dim = None
    for name, group in zip(class_names, support_embeddings):
        group = np.atleast_2d(np.asarray(group, dtype=np.float64))
        if group.shape[0] == 0 or group.size == 0:
            raise ProtoError(f"class {name!r} has no support embeddings")
        if dim is None:
            dim = group.shape[1]
        elif group.shape[1] != dim:
            raise ProtoError(f"class {name!r} embeddings have dimension {group.shape[1]}, expected {dim}")
        acc = group[0].copy()
        for row in group[1:]:
            acc += row
        protos.append(acc / group.shape[0])
    return PrototypeSet(np.stack(protos), tuple(class_names))


def prototypes_from_labels(support: np.ndarray, labels: np.ndarray, n_way: int, class_names=None) -> PrototypeSet:
    labels = np.asarray(labels)
    return compute_prototypes([support[labels == c] for c in range(n_way)], class_names)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ProtoError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ProtoError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ProtoError(f"zero-norm {what} embedding; cosine similarity is undefined")
    return x / norms[:, None], norms


def similarity_matrix(queries: np.ndarray, protos: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Raw scores: cosine in [-1, 1], or negated squared Euclidean distance."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    protos = np.atleast_2d(np.asarray(protos, dtype=np.float64))
    if queries.shape[1] != protos.shape[1]:
        raise ProtoError(f"query dim {queries.shape[1]} != prototype dim {protos.shape[1]}")
    if metric == "cosine":
        qn, _ = _unit_rows(queries, "query")
        pn, _ = _unit_rows(protos, "prototype")
        return np.clip(qn @ pn.T, -1.0, 1.0)
    if metric == "euclidean":
        diff = queries[:, None, :] - protos[None, :, :]
        return -np.einsum("qpd,qpd->qp", diff, diff)
    raise ProtoError(f"unknown metric {metric!r}")


def episode_logits(queries, protos, metric="cosine", temperature=DEFAULT_TEMPERATURE) -> EpisodeLogits:
    """Temperature scales cosine scores only; Euclidean logits are -||q - p||^2."""
    if temperature <= 0:
        raise ProtoError("temperature must be positive")
    s = similarity_matrix(queries, protos, metric)
    if metric == "cosine":
        s = temperature * s
    return EpisodeLogits(s, float(temperature), metric)


def classify(query_embedding, protos: PrototypeSet, metric: str = "cosine"):
    """Return ``(local_label, scores)``; ties go to the lowest label."""
    scores = similarity_matrix(np.atleast_2d(query_embedding), protos.prototypes, metric)[0]
    return int(np.argmax(scores)), scores


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def episode_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    m = logits.matrix if isinstance(logits, EpisodeLogits) else np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n, c = m.shape
    if labels.shape != (n,):
        raise ProtoError(f"expected {n} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ProtoError(f"label out of range [0, {c})")
    z = m - m.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_z - z[np.arange(n), labels]))
    d = softmax(m)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def loss_backward_to_embeddings(support, support_labels, queries, protos, metric, temperature, d_logits):
    """Chain rule from dL/d(logits) back to support and query embeddings.

    ``protos`` must be the per-class means of ``support`` under
    ``support_labels``.
    """
    support = np.asarray(support, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    protos = np.asarray(protos.prototypes if isinstance(protos, PrototypeSet) else protos, dtype=np.float64)
    g = np.asarray(d_logits, dtype=np.float64)
    support_labels = np.asarray(support_labels, dtype=np.intp)

    if metric == "cosine":
        qn, qnorm = _unit_rows(queries, "query")
        pn, pnorm = _unit_rows(protos, "prototype")
        cos = qn @ pn.T
        gt = temperature * g
        # d cos(q,p)/dq = (p_hat - cos * q_hat) / |q|
        d_q = (gt @ pn - (gt * cos).sum(axis=1)[:, None] * qn) / qnorm[:, None]
        d_p = (gt.T @ qn - (gt * cos).sum(axis=0)[:, None] * pn) / pnorm[:, None]
    elif metric == "euclidean":
        diff = queries[:, None, :] - protos[None, :, :]
        d_q = -2.0 * np.einsum("qp,qpd->qd", g, diff)
        d_p = 2.0 * np.einsum("qp,qpd->pd", g, diff)
    else:
        raise ProtoError(f"unknown metric {metric!r}")

    counts = np.bincount(support_labels, minlength=len(protos)).astype(np.float64)
    if np.any(counts == 0):
        raise ProtoError("every class needs at least one support embedding")
    d_s = d_p[support_labels] / counts[support_labels][:, None]
    return d_s, d_q
