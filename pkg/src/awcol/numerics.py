"""Dense float64 numerics: a small tanh MLP with exact backprop, finite
differences, and an Adam optimizer.

Everything here is pure value semantics: operations return new objects and
never mutate their inputs, so models can be cloned and run in parallel
without locking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


@dataclass
class EncoderParams:
    """Feed-forward encoder f(x): tanh on hidden layers, identity on the
    output layer so embeddings are unconstrained."""

    weights: list  # layer i: (out_i, in_i)
    biases: list   # layer i: (out_i,)

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("encoder needs matching, non-empty weight/bias lists")
        self.weights = [_f64(w) for w in self.weights]
        self.biases = [_f64(b) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(
                    f"layer {i}: weight {w.shape} and bias {b.shape} do not agree"
                )
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} consumes {w.shape[1]} features but layer "
                    f"{i - 1} produces {self.weights[i - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"layer {i} has non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def layer_dims(self) -> tuple:
        return (self.input_dim,) + tuple(w.shape[0] for w in self.weights)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def clone(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases])


def init_encoder(layer_dims: Sequence[int], rng: np.random.Generator) -> EncoderParams:
    """Build an encoder with the given (input, hidden..., output) widths.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ShapeError(f"need at least (input, output) positive dims, got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights, biases)


@dataclass
class Gradients:
    """Per-parameter partials of a scalar loss, shape-congruent with an
    EncoderParams."""

    d_weights: list
    d_biases: list

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "Gradients":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases])

    def congruent_with(self, params: EncoderParams) -> bool:
        return (len(self.d_weights) == params.n_layers
                and all(dw.shape == w.shape for dw, w in zip(self.d_weights, params.weights))
                and all(db.shape == b.shape for db, b in zip(self.d_biases, params.biases)))

    def max_abs(self) -> float:
        return max(max(np.abs(dw).max() for dw in self.d_weights),
                   max(np.abs(db).max() for db in self.d_biases))


@dataclass
class ForwardCache:
    """Per-layer inputs recorded by encoder_forward; layer_inputs[i+1] is the
    tanh output of layer i, which is all the backward pass needs."""

    layer_inputs: list

    @property
    def batch(self) -> int:
        return self.layer_inputs[0].shape[0]


def encoder_forward(params: EncoderParams, inputs) -> tuple:
    """Run the encoder on a (B, d_in) batch; returns (embeddings, cache)."""
    x = _f64(inputs)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(
            f"inputs {x.shape} incompatible with encoder input dim {params.input_dim}"
        )
    last = params.n_layers - 1
    layer_inputs = []
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        z = h @ w.T + b
        h = z if i == last else np.tanh(z)
    if not np.isfinite(h).all():
        raise NumericError("encoder forward produced non-finite embeddings")
    return h, ForwardCache(layer_inputs)


def encoder_backward(params: EncoderParams, cache: ForwardCache,
                     d_embeddings) -> Gradients:
    """Exact reverse pass: upstream d(loss)/d(embeddings) to d(loss)/d(params)."""
    d = _f64(d_embeddings)
    n = params.n_layers
    if len(cache.layer_inputs) != n:
        raise ShapeError("cache depth does not match encoder depth")
    batch = cache.batch
    if d.shape != (batch, params.output_dim):
        raise ShapeError(
            f"d_embeddings {d.shape} does not match ({batch}, {params.output_dim})"
        )
    d_weights = [None] * n
    d_biases = [None] * n
    dz = d
    for i in reversed(range(n)):
        x = cache.layer_inputs[i]
        if x.shape != (batch, params.weights[i].shape[1]):
            raise ShapeError(f"stale or mismatched cache at layer {i}")
        d_weights[i] = dz.T @ x
        d_biases[i] = dz.sum(axis=0)
        if i > 0:
            # x is the tanh output of layer i-1, so tanh' = 1 - x^2
            dz = (dz @ params.weights[i]) * (1.0 - x * x)
    return Gradients(d_weights, d_biases)


def finite_diff_gradient(loss_fn: Callable[[EncoderParams], float],
                         params: EncoderParams, h: float) -> Gradients:
    """Central-difference gradient estimate, one probe pair per parameter.

    loss_fn must be deterministic; it is called on a scratch copy of params
    that is perturbed in place.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    work = params.clone()

    def probe(arr: np.ndarray, idx) -> float:
        orig = arr[idx]
        arr[idx] = orig + h
        up = float(loss_fn(work))
        arr[idx] = orig - h
        down = float(loss_fn(work))
        arr[idx] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"loss is non-finite near parameter index {idx}")
        return (up - down) / (2.0 * h)

    d_weights, d_biases = [], []
    for w in work.weights:
        dw = np.empty_like(w)
        for idx in np.ndindex(w.shape):
            dw[idx] = probe(w, idx)
        d_weights.append(dw)
    for b in work.biases:
        db = np.empty_like(b)
        for idx in np.ndindex(b.shape):
            db[idx] = probe(b, idx)
        d_biases.append(db)
    return Gradients(d_weights, d_biases)


@dataclass
class AdamState:
    """Adam moment accumulators for one encoder."""

    step: int
    m_weights: list
    m_biases: list
    v_weights: list
    v_biases: list
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.step < 0:
            raise ValueError(f"step must be >= 0, got {self.step}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie strictly in (0, 1)")

    @classmethod
    def fresh(cls, params: EncoderParams, learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> "AdamState":
        return cls(0,
                   [np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases],
                   [np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases],
                   learning_rate, beta1, beta2, epsilon)

    def clone(self) -> "AdamState":
        return AdamState(self.step,
                         [m.copy() for m in self.m_weights],
                         [m.copy() for m in self.m_biases],
                         [v.copy() for v in self.v_weights],
                         [v.copy() for v in self.v_biases],
                         self.learning_rate, self.beta1, self.beta2, self.epsilon)


def adam_step(params: EncoderParams, grads: Gradients,
              state: AdamState) -> tuple:
    """One bias-corrected Adam update; returns (new params, new state)."""
    if not grads.congruent_with(params):
        raise ShapeError("gradients are not shape-congruent with parameters")
    for g in (*grads.d_weights, *grads.d_biases):
        if not np.isfinite(g).all():
            raise NumericError("gradients contain non-finite entries")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    lr, eps = state.learning_rate, state.epsilon

    def update(p, g, m, v):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        p_new = p - lr * (m_new / corr1) / (np.sqrt(v_new / corr2) + eps)
        return p_new, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for p, g, m, v in zip(params.weights, grads.d_weights,
                          state.m_weights, state.v_weights):
        pn, mn, vn = update(p, g, m, v)
        new_w.append(pn); new_mw.append(mn); new_vw.append(vn)
    new_b, new_mb, new_vb = [], [], []
    for p, g, m, v in zip(params.biases, grads.d_biases,
                          state.m_biases, state.v_biases):
        pn, mn, vn = update(p, g, m, v)
        new_b.append(pn); new_mb.append(mn); new_vb.append(vn)

    return (EncoderParams(new_w, new_b),
            AdamState(t, new_mw, new_mb, new_vw, new_vb,
                      lr, state.beta1, state.beta2, eps))
