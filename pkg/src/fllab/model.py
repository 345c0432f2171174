"""Multilayer perceptron with frozen base weights and trainable update deltas.

Each layer carries a base weight matrix that local SGD never touches, a
densely trained bias, and optionally a compressed update; the weight used in
the forward pass is always ``base + materialize(update)``.  Backpropagation
is written out by hand: the dense weight gradient of each layer is computed
as usual and then routed into the update's factor gradients.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import decomp, linalg
from .rng import Rng, derive_seed, STREAM_MODEL, STREAM_UPDATE_INIT


@dataclass
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"  # "relu" | "none"; the final layer emits logits
    scheme: str | None = None  # None = weight entirely frozen, bias only
    ratio: float = 1.0
    init_bound: float = 0.1

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be positive")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.scheme is not None and self.scheme not in decomp.SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")


def _solve_shape(spec: LayerSpec):
    """Shape object init_update expects for this layer's scheme."""
    m, n = spec.out_dim, spec.in_dim
    if spec.scheme == "dense_update":
        return (m, n)
    if spec.scheme in ("lowrank", "lowrank_aad"):
        return decomp.LowRankShape(m, n, decomp.rank_for_ratio(m, n, spec.ratio))
    if spec.scheme == "frozen_lowrank":
        r = decomp.rank_for_ratio(m, n, spec.ratio)
        return decomp.LowRankShape(m, n, decomp.frozen_rank_for_budget(m, n, r))
    if spec.scheme in ("bkd", "bkd_aad"):
        return decomp.blocks_for_ratio(m, n, spec.ratio)
    return None


@dataclass
class Layer:
    spec: LayerSpec
    base: np.ndarray  # (out_dim, in_dim), frozen during local training
    bias: np.ndarray  # (out_dim,), trained densely
    update: decomp.UpdateParam | None

    def effective_weight(self) -> np.ndarray:
        if self.update is None:
            return self.base
        return self.base + decomp.materialize(self.update)


@dataclass
class LayerGrads:
    bias: np.ndarray
    update: dict[str, np.ndarray] | None


@dataclass
class Model:
    layers: list[Layer]

    # -- inference -----------------------------------------------------

    def forward(self, batch: np.ndarray):
        """Returns (logits, cache); cache holds per-layer inputs and
        pre-activations for the backward pass."""
        if batch.ndim != 2 or batch.shape[1] != self.layers[0].spec.in_dim:
            raise ValueError(
                f"batch shape {batch.shape} incompatible with input dim "
                f"{self.layers[0].spec.in_dim}"
            )
        x = batch
        cache = []
        for layer in self.layers:
            z = x @ layer.effective_weight().T + layer.bias
            cache.append((x, z))
            x = np.maximum(z, 0.0) if layer.spec.activation == "relu" else z
        return x, cache

    def loss_and_backward(self, batch: np.ndarray, labels: np.ndarray):
        """Mean softmax cross-entropy and gradients for every trainable
        parameter (biases and update factors); frozen bases get none."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        logits, cache = self.forward(batch)
        n_classes = logits.shape[1]
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ValueError("labels out of range")
        loss, dlogits = _cross_entropy(logits, labels)

        grads: list[LayerGrads] = [None] * len(self.layers)
        dz = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            x, z = cache[i]
            if layer.spec.activation == "relu":
                dz = dz * (z > 0.0)
            d_weight = dz.T @ x
            d_bias = dz.sum(axis=0)
            d_update = (
                decomp.grad(layer.update, d_weight) if layer.update is not None else None
            )
            grads[i] = LayerGrads(bias=d_bias, update=d_update)
            if i > 0:
                dz = dz @ layer.effective_weight()
        return loss, grads

    # -- training ------------------------------------------------------

    def sgd_step(self, grads: list[LayerGrads], lr: float) -> None:
        for layer, g in zip(self.layers, grads):
            layer.bias -= lr * g.bias
            if layer.update is not None:
                decomp.apply_grad(layer.update, g.update, lr)

    def merge_updates(self, fresh_seed: int) -> None:
        """Fold every materialized update into its frozen base and replace
        it with a freshly initialized (zero-start) update drawn from
        ``fresh_seed``.  Effective weights are unchanged by construction."""
        rng = Rng(fresh_seed)
        for layer in self.layers:
            if layer.update is None:
                continue
            layer.base = layer.base + decomp.materialize(layer.update)
            layer.update = decomp.init_update(
                layer.spec.scheme, _solve_shape(layer.spec), layer.spec.init_bound, rng
            )

    # -- accounting helpers ---------------------------------------------

    def base_digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(layer.base.tobytes())
        return h.hexdigest()

    def trainable_weight_params(self) -> int:
        return sum(
            decomp.param_count(l.update) for l in self.layers if l.update is not None
        )

    def bias_params(self) -> int:
        return sum(l.bias.size for l in self.layers)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    n = len(labels)
    loss = -float(log_probs[np.arange(n), labels].mean())
    dlogits = exp / total
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def build_model(
    specs: list[LayerSpec], seed: int, zero_compressed_base: bool = False,
    random_v: bool = False,
) -> Model:
    """Construct a model from layer specs.

    Base weights are uniform on (-1/sqrt(in_dim), 1/sqrt(in_dim)) from the
    model stream of ``seed``; biases start at zero; updates come from the
    separate update-init stream so every client can regenerate them from
    the seed alone.  ``zero_compressed_base`` zeroes the base weight of
    layers that carry an update (after drawing it, to keep stream
    consumption independent of the flag); ``random_v`` randomizes the
    zero-start factor as well (the pre-decomposed-model start).
    """
    base_rng = Rng(derive_seed(seed, STREAM_MODEL))
    update_rng = Rng(derive_seed(seed, STREAM_UPDATE_INIT))
    layers = []
    for spec in specs:
        bound = 1.0 / np.sqrt(spec.in_dim)
        base = linalg.fill_uniform(spec.out_dim, spec.in_dim, bound, base_rng)
        update = None
        if spec.scheme is not None:
            if zero_compressed_base and spec.scheme != "dense_update":
                base = np.zeros_like(base)
            update = decomp.init_update(
                spec.scheme,
                _solve_shape(spec),
                spec.init_bound,
                update_rng,
                random_v=random_v and spec.scheme in ("lowrank", "bkd"),
            )
        layers.append(Layer(spec=spec, base=base, bias=np.zeros(spec.out_dim), update=update))
    return Model(layers)
