"""Prototypical classifier (class-mean embeddings + softmax over negative
squared distances) and source-domain episodic pretraining of two models."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from .errors import EpisodeError, NumericError, ShapeError
from .numerics import (AdamState, EncoderParams, ForwardCache, Gradients,
                       adam_step, encoder_backward, encoder_forward)

# Probabilities below this are clamped before log inside every CE evaluation;
# clamp activations are counted and surfaced in traces.
LOG_CLAMP = 1e-12


@dataclass
class Episode:
    """One N-way K-shot task: labeled support set plus a query set whose
    labels, when present, are reserved for evaluation."""

    n_way: int
    k_shot: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: Optional[np.ndarray] = None

    def __post_init__(self):
        self.support_x = np.asarray(self.support_x, dtype=np.float64)
        self.support_y = np.asarray(self.support_y, dtype=np.int64)
        self.query_x = np.asarray(self.query_x, dtype=np.float64)
        if self.query_y is not None:
            self.query_y = np.asarray(self.query_y, dtype=np.int64)
        if self.n_way < 2 or self.k_shot < 1:
            raise EpisodeError(f"need n_way >= 2 and k_shot >= 1, "
                               f"got {self.n_way}-way {self.k_shot}-shot")
        n_s = self.n_way * self.k_shot
        if self.support_x.ndim != 2 or self.support_x.shape[0] != n_s:
            raise EpisodeError(f"support features must be ({n_s}, d), "
                               f"got {self.support_x.shape}")
        if self.support_y.shape != (n_s,):
            raise EpisodeError("support labels do not match support size")
        counts = np.bincount(self.support_y, minlength=self.n_way) \
            if self.support_y.min(initial=0) >= 0 else None
        if (counts is None or len(counts) != self.n_way
                or not (counts == self.k_shot).all()):
            raise EpisodeError("support must hold exactly k_shot instances "
                               "of every class 0..n_way-1")
        if self.query_x.ndim != 2 or self.query_x.shape[0] == 0:
            raise EpisodeError("query set must be a non-empty (B, d) matrix")
        if self.query_x.shape[1] != self.support_x.shape[1]:
            raise EpisodeError("support and query feature dims differ")
        if self.query_y is not None:
            if self.query_y.shape != (self.query_x.shape[0],):
                raise EpisodeError("query labels do not match query size")
            if self.query_y.min() < 0 or self.query_y.max() >= self.n_way:
                raise EpisodeError("query labels out of range")
        if not (np.isfinite(self.support_x).all() and np.isfinite(self.query_x).all()):
            raise EpisodeError("episode features contain non-finite values")

    @property
    def n_support(self) -> int:
        return self.support_x.shape[0]

    @property
    def n_query(self) -> int:
        return self.query_x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.support_x.shape[1]

    def without_query_labels(self) -> "Episode":
        """View of this episode safe to hand to fine-tuning: query labels gone."""
        if self.query_y is None:
            return self
        return Episode(self.n_way, self.k_shot, self.support_x, self.support_y,
                       self.query_x, None)


@dataclass
class ProtoModel:
    """One of the two co-learned prototypical models: its encoder plus
    optimizer state. The two models never share parameters."""

    encoder: EncoderParams
    adam: AdamState
    model_id: int

    def __post_init__(self):
        if self.model_id not in (1, 2):
            raise ValueError(f"model_id must be 1 or 2, got {self.model_id}")

    def clone(self) -> "ProtoModel":
        return ProtoModel(self.encoder.clone(), self.adam.clone(), self.model_id)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared L2 distances between rows of a (B, d) and b (N, d)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("bnd,bnd->bn", diff, diff)


def prototypes_from_embeddings(embeddings: np.ndarray, labels: np.ndarray,
                               n_way: int, k_shot: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_way)
    if len(counts) != n_way or not (counts == k_shot).all():
        raise EpisodeError("every class needs exactly k_shot support embeddings")
    protos = np.zeros((n_way, embeddings.shape[1]))
    np.add.at(protos, labels, embeddings)
    return protos / k_shot


def compute_prototypes(model: ProtoModel, episode: Episode) -> np.ndarray:
    """Class prototypes: per-class mean of the encoded support instances."""
    emb, _ = encoder_forward(model.encoder, episode.support_x)
    return prototypes_from_embeddings(emb, episode.support_y,
                                      episode.n_way, episode.k_shot)


def distance_probs(embeddings: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Softmax over negative squared distances to the prototypes."""
    return softmax_rows(-squared_distances(embeddings, prototypes))


def predict_probs(model: ProtoModel, prototypes: np.ndarray,
                  features) -> np.ndarray:
    """Class probabilities for raw feature rows under the given prototypes."""
    protos = np.asarray(prototypes, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[1] != model.encoder.output_dim:
        raise ShapeError(f"prototypes {protos.shape} do not match embedding "
                         f"dim {model.encoder.output_dim}")
    emb, _ = encoder_forward(model.encoder, features)
    return distance_probs(emb, protos)


@dataclass
class CeLoss:
    """Cross-entropy over a batch, reported both as the raw sum and as the
    mean used for optimization; `clamped` counts log-clamp activations."""

    total: float
    mean: float
    clamped: int


def ce_loss(probs: np.ndarray, labels: np.ndarray) -> CeLoss:
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} disagree")
    p = probs[np.arange(probs.shape[0]), labels]
    clamped = int((p < LOG_CLAMP).sum())
    nll = -np.log(np.maximum(p, LOG_CLAMP))
    return CeLoss(float(nll.sum()), float(nll.mean()), clamped)


def weighted_ce_grad(probs: np.ndarray, labels: np.ndarray,
                     weights: np.ndarray) -> tuple:
    """Weight-normalized cross-entropy sum((w/W) * nll) and its gradient with
    respect to the logits that produced `probs` via softmax.

    Instances whose true-class probability fell below the log clamp
    contribute a constant loss term, so their logit gradient is zeroed.
    """
    b = probs.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if labels.shape != (b,) or w.shape != (b,):
        raise ShapeError("labels/weights do not match the batch size")
    total_w = float(w.sum())
    if total_w <= 0.0:
        raise ValueError("total weight must be positive")
    rows = np.arange(b)
    p = probs[rows, labels]
    clamp_mask = p < LOG_CLAMP
    loss = float((w * -np.log(np.maximum(p, LOG_CLAMP))).sum() / total_w)
    g = probs * (w / total_w)[:, None]
    g[rows, labels] -= w / total_w
    if clamp_mask.any():
        g[clamp_mask] = 0.0
    return loss, g, int(clamp_mask.sum())


def distance_logit_grads(g_logits: np.ndarray, embeddings: np.ndarray,
                         prototypes: np.ndarray) -> tuple:
    """Push d(loss)/d(logits) through logits = -||e_b - c_j||^2, returning
    (d_embeddings, d_prototypes)."""
    row = g_logits.sum(axis=1)
    col = g_logits.sum(axis=0)
    d_emb = -2.0 * (row[:, None] * embeddings - g_logits @ prototypes)
    d_protos = 2.0 * (g_logits.T @ embeddings - col[:, None] * prototypes)
    return d_emb, d_protos


def prototype_grads_to_support(d_protos: np.ndarray, support_y: np.ndarray,
                               k_shot: int) -> np.ndarray:
    """Spread prototype gradients onto the support embeddings they average."""
    return d_protos[support_y] / k_shot


@dataclass
class EncodedEpisode:
    """One forward pass over support+query with everything the loss side
    needs: embeddings, prototypes, and the backprop cache."""

    cache: ForwardCache
    support_emb: np.ndarray
    query_emb: np.ndarray
    prototypes: np.ndarray


def encode_episode(model: ProtoModel, episode: Episode) -> EncodedEpisode:
    x = np.vstack([episode.support_x, episode.query_x])
    emb, cache = encoder_forward(model.encoder, x)
    n_s = episode.n_support
    support_emb, query_emb = emb[:n_s], emb[n_s:]
    protos = prototypes_from_embeddings(support_emb, episode.support_y,
                                        episode.n_way, episode.k_shot)
    return EncodedEpisode(cache, support_emb, query_emb, protos)


def query_ce_grads(model: ProtoModel, episode: Episode, labels: np.ndarray,
                   weights=None) -> tuple:
    """Weighted CE on the query set with full gradients (through both the
    query embeddings and the prototypes). Returns (loss, Gradients, probs,
    clamp count). Unit weights give the plain mean CE used in pretraining."""
    enc = encode_episode(model, episode)
    probs = distance_probs(enc.query_emb, enc.prototypes)
    if weights is None:
        weights = np.ones(episode.n_query)
    loss, g_logits, clamped = weighted_ce_grad(probs, labels, weights)
    d_q, d_protos = distance_logit_grads(g_logits, enc.query_emb, enc.prototypes)
    d_s = prototype_grads_to_support(d_protos, episode.support_y, episode.k_shot)
    grads = encoder_backward(model.encoder, enc.cache, np.vstack([d_s, d_q]))
    return loss, grads, probs, clamped


@dataclass
class PretrainRecord:
    """Per-iteration pretraining trace entry (averages over the iteration's
    tasks; accuracy is measured before each task's update)."""

    iteration: int
    mean_loss: float
    sum_loss: float
    accuracy: float


def pretrain_source(model: ProtoModel, task_stream: Iterator[Episode],
                    iterations: int, tasks_per_iteration: int) -> tuple:
    """Episodic pretraining: per task, prototypes from support, CE on query,
    one Adam step. Returns (trained model, trace)."""
    if iterations < 0 or tasks_per_iteration < 1:
        raise ValueError("iterations must be >= 0 and tasks_per_iteration >= 1")
    current = model.clone()
    trace = []
    for it in range(iterations):
        means, sums, accs = [], [], []
        for _ in range(tasks_per_iteration):
            episode = next(task_stream)
            if episode.query_y is None:
                raise EpisodeError("pretraining episodes need query labels")
            loss, grads, probs, _ = query_ce_grads(current, episode,
                                                   episode.query_y)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite pretraining loss at iteration {it}")
            means.append(loss)
            sums.append(loss * episode.n_query)
            accs.append(float((probs.argmax(axis=1) == episode.query_y).mean()))
            params, adam = adam_step(current.encoder, grads, current.adam)
            current = replace(current, encoder=params, adam=adam)
        trace.append(PretrainRecord(it, float(np.mean(means)),
                                    float(np.mean(sums)), float(np.mean(accs))))
    return current, trace
