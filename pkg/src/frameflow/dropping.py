"""Learned per-layer dropping of visual tokens, plus the FLOPs accountant.

At each routed layer a per-layer weight vector scores every token by a dot
product. Within each visual group (the 10 tokens of one frame, or one
template section) only the top k = ceil((1 - beta) * group_size) scores pass
through the layer's attention and FFN; everything else skips the layer via
the residual identity, bit for bit. Text and control tokens are never
droppable: they carry an infinite sentinel score.

Selection is per-group by default, which keeps streaming inference causal.
A sequence-global percentile mode mirrors the batch-style thresholding used
during training-parity experiments; it is rejected by the incremental
decoder. A seeded random-dropping baseline with identical retained counts
backs the ablation harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng, tensor as T
from .errors import ConfigError, PolicyError, RoutingError, ThresholdError
from .tensor import Tensor

POLICIES = ("all", "deep", "interleaved", "interleaved_and_deep", "none")
SELECTIONS = ("per_frame", "global_percentile")
_KEY_DROP_WEIGHTS = 301
_KEY_RANDOM_MASK = 302


def retained_count(group_size: int, beta: float) -> int:
    """k = ceil((1 - beta) * group_size), computed without float overshoot."""
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"dropping ratio must lie in [0, 1), got {beta}")
    return group_size - math.floor(beta * group_size + 1e-9)


def select_retained(weights: np.ndarray, beta: float) -> np.ndarray:
    """Top-k mask over one frame's scores; ties keep the lower index."""
    weights = np.asarray(weights, dtype=np.float64)
    k = retained_count(weights.shape[0], beta)
    order = np.argsort(-weights, kind="stable")
    mask = np.zeros(weights.shape[0], dtype=bool)
    mask[order[:k]] = True
    return mask


def percentile_threshold(weights: np.ndarray, beta: float) -> float:
    """Linear-interpolated beta-th percentile of a weight set."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise ThresholdError("percentile of an empty weight set")
    return float(np.percentile(weights, beta * 100.0, method="linear"))


def placement_layers(n_layers: int, policy: str) -> set[int]:
    if policy not in POLICIES:
        raise PolicyError(f"unknown placement policy {policy!r}")
    if n_layers < 1:
        raise PolicyError(f"model needs at least one layer, got {n_layers}")
    if policy == "none":
        return set()
    if policy in ("deep", "interleaved_and_deep") and n_layers < 3:
        raise PolicyError(f"policy {policy!r} needs at least 3 layers, got {n_layers}")
    every = set(range(n_layers))
    interleaved = set(range(1, n_layers, 2))
    deep = set(range(n_layers - math.ceil(2 * n_layers / 3), n_layers))
    return {"all": every, "interleaved": interleaved, "deep": deep,
            "interleaved_and_deep": interleaved & deep}[policy]


def apply_routed_layer(x: Tensor, mask: np.ndarray,
                       layer_fn: Callable[[Tensor, np.ndarray], Tensor],
                       scale: Tensor | None) -> Tensor:
    """Residual update restricted to masked-in rows.

    `layer_fn(sub, positions)` returns the layer's delta for the surviving
    rows, given their original sequence positions. Rows outside the mask are
    returned untouched (same bytes). With `scale` given, each surviving row's
    delta is multiplied by its scale entry before the residual add.
    """
    if mask.shape[0] != x.shape[0]:
        raise RoutingError(
            f"mask length {mask.shape[0]} does not match sequence length {x.shape[0]}")
    if mask.all():
        delta = layer_fn(x, np.arange(x.shape[0]))
        if scale is not None:
            delta = T.mul(scale, delta)
        return T.add(x, delta)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return x
    sub = T.take_rows(x, idx)
    delta = layer_fn(sub, idx)
    if scale is not None:
        delta = T.mul(T.take_rows(scale, idx), delta)
    return T.place_rows(x, T.add(sub, delta), idx)


class DropRouter:
    """Owns the per-layer score vectors and the retention decisions."""

    def __init__(self, d_model: int, n_layers: int, beta: float = 0.0,
                 policy: str = "none", selection: str = "per_frame",
                 scale_by_r: bool = True, random_dropping: bool = False,
                 seed: int = 0):
        if selection not in SELECTIONS:
            raise ConfigError(f"unknown dropping selection {selection!r}")
        if not 0.0 <= beta < 1.0:
            raise ConfigError(f"dropping ratio must lie in [0, 1), got {beta}")
        self.beta = beta
        self.policy = policy
        self.selection = selection
        self.scale_by_r = scale_by_r
        self.random_dropping = random_dropping
        self.seed = seed
        self.routed_layers = placement_layers(n_layers, policy)
        self.weights = {
            layer: T.uniform_init(rng.generator(seed, _KEY_DROP_WEIGHTS, layer),
                                  (d_model, 1), fan_in=d_model)
            for layer in sorted(self.routed_layers)}

    def params(self) -> dict[str, Tensor]:
        return {f"drop.w{layer:02d}": w for layer, w in self.weights.items()}

    def layer_scores(self, layer: int, x: Tensor) -> Tensor:
        """Differentiable routing scalars, one per row, shape (N, 1)."""
        if layer not in self.weights:
            raise RoutingError(f"layer {layer} has no dropping router")
        return T.matmul(x, self.weights[layer])

    def retained_mask(self, layer: int, scores: np.ndarray, visual: np.ndarray,
                      group_ids: np.ndarray, salt: int = 0) -> np.ndarray:
        """Boolean keep-mask over the sequence; non-visual rows always True.

        `salt` only affects the random-dropping baseline: it keys the draw
        per episode so the baseline cannot settle into one reusable pattern.
        """
        n = scores.shape[0]
        if visual.shape[0] != n or group_ids.shape[0] != n:
            raise RoutingError("scores/visual/group arrays must share one length")
        mask = np.ones(n, dtype=bool)
        if self.beta == 0.0:
            return mask
        if self.selection == "global_percentile" and not self.random_dropping:
            vis_scores = scores[visual]
            threshold = percentile_threshold(vis_scores, self.beta)
            mask[visual] = vis_scores >= threshold
            return mask
        for g in np.unique(group_ids[visual]):
            members = np.flatnonzero(visual & (group_ids == g))
            if self.random_dropping:
                k = retained_count(members.size, self.beta)
                gen = rng.generator(self.seed, _KEY_RANDOM_MASK, salt, layer,
                                    int(g))
                keep_local = gen.choice(members.size, size=k, replace=False)
                local = np.zeros(members.size, dtype=bool)
                local[keep_local] = True
            else:
                local = select_retained(scores[members], self.beta)
            mask[members] = local
        return mask


@dataclass
class FlopsBreakdown:
    total: int
    per_layer: list[dict]

    def to_json(self) -> dict:
        return {"total": self.total, "per_layer": self.per_layer}


def _layer_cost(m: int, d_model: int, d_ff: int) -> tuple[int, int]:
    # attention: per token, QKVO projections plus one score row and one value
    # mix over its causal context; ffn: up and down projections
    attention = m * 4 * d_model * d_model + d_model * m * (m + 1)
    ffn = m * 2 * d_model * d_ff
    return attention, ffn


def flops_estimate(n_layers: int, d_model: int, d_ff: int,
                   visual: np.ndarray, group_ids: np.ndarray, beta: float,
                   policy: str) -> FlopsBreakdown:
    """Analytic multiply-accumulate count for one sequence profile.

    Counts attention and FFN work only; the router's own score product is
    bookkeeping noise at these widths and is excluded so that beta = 0
    reproduces the unrouted count exactly.
    """
    visual = np.asarray(visual, dtype=bool)
    group_ids = np.asarray(group_ids)
    routed = placement_layers(n_layers, policy)
    n_total = visual.shape[0]
    n_text = int((~visual).sum())
    kept_visual = sum(
        retained_count(int(np.sum(visual & (group_ids == g))), beta)
        for g in np.unique(group_ids[visual]))
    per_layer = []
    total = 0
    for layer in range(n_layers):
        is_routed = layer in routed and beta > 0.0
        m = kept_visual + n_text if is_routed else n_total
        attention, ffn = _layer_cost(m, d_model, d_ff)
        per_layer.append({"layer": layer, "tokens": m, "routed": is_routed,
                          "attention": attention, "ffn": ffn})
        total += attention + ffn
    return FlopsBreakdown(total=total, per_layer=per_layer)
