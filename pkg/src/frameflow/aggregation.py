"""Fusing the two per-frame token streams into one.

The trained variant is a gated router: the general encoder's CLS token (the
frame's visual guidance) passes through a small two-layer network whose
output, reshaped to one weight pair per token position and softmax-normalized
across the pair, convexly blends the general and egocentric streams. Three
untrained baselines (concatenation, addition, free learnable weights) exist
for ablation comparisons.
"""

from __future__ import annotations

import numpy as np

from . import rng, tensor as T
from .errors import StrategyError
from .tensor import Tensor

VARIANTS = ("concat", "addition", "learnable_weighting", "adaptive_routing")
_KEY_GATE = 201
_STREAMS = 2


class AggregationGate:
    """Two-layer gate: d_model -> d_hidden -> (tokens_per_frame x 2) weights."""

    def __init__(self, d_model: int, tokens_per_frame: int = 10,
                 d_hidden: int | None = None, seed: int = 0,
                 nonlinearity: str = "sigmoid", per_frame_scalar: bool = False):
        if nonlinearity not in ("sigmoid", "relu"):
            raise StrategyError(f"unsupported gate nonlinearity {nonlinearity!r}")
        d_hidden = d_model if d_hidden is None else d_hidden
        self.tokens_per_frame = tokens_per_frame
        self.nonlinearity = nonlinearity
        self.per_frame_scalar = per_frame_scalar
        out_dim = _STREAMS if per_frame_scalar else tokens_per_frame * _STREAMS
        gen = rng.generator(seed, _KEY_GATE)
        self.w1 = T.uniform_init(gen, (d_model, d_hidden), fan_in=d_model)
        self.b1 = T.zeros_param((d_hidden,))
        self.w2 = T.uniform_init(gen, (d_hidden, out_dim), fan_in=d_hidden)
        self.b2 = T.zeros_param((out_dim,))

    def params(self) -> dict[str, Tensor]:
        return {"gate.w1": self.w1, "gate.b1": self.b1,
                "gate.w2": self.w2, "gate.b2": self.b2}

    def route_weights(self, vg: Tensor) -> Tensor:
        """Weight matrix (tokens_per_frame, 2); each row sums to 1."""
        h = T.add(T.matmul(vg, self.w1), self.b1)
        h = T.sigmoid(h) if self.nonlinearity == "sigmoid" else T.relu(h)
        logits = T.add(T.matmul(h, self.w2), self.b2)
        if self.per_frame_scalar:
            # one shared pair for the whole frame, repeated per position
            logits = T.concat_rows([T.reshape(logits, (1, _STREAMS))]
                                   * self.tokens_per_frame)
        else:
            logits = T.reshape(logits, (self.tokens_per_frame, _STREAMS))
        return T.softmax(logits, axis=1)


def aggregate_adaptive(frm_s: Tensor, frm_t: Tensor, weights: Tensor) -> Tensor:
    """Position-wise convex combination of two equal-length streams."""
    if frm_s.shape != frm_t.shape:
        raise StrategyError(
            f"adaptive aggregation needs matching streams, got {frm_s.shape} "
            f"vs {frm_t.shape}")
    if weights.shape != (frm_s.shape[0], _STREAMS):
        raise StrategyError(
            f"weight matrix {weights.shape} does not match {frm_s.shape[0]} positions")
    w_s = T.slice_cols(weights, 0, 1)
    w_t = T.slice_cols(weights, 1, 2)
    return T.add(T.mul(w_s, frm_s), T.mul(w_t, frm_t))


def aggregate_concat(frm_s: Tensor, frm_t: Tensor) -> Tensor:
    if frm_s.shape[0] == 0 or frm_t.shape[0] == 0:
        raise StrategyError("concat aggregation requires two non-empty streams")
    return T.concat_rows([frm_s, frm_t])


def aggregate_addition(frm_s: Tensor, frm_t: Tensor) -> Tensor:
    """Position-wise sum; a 1-token stream contributes only to the CLS slot."""
    n_s, n_t = frm_s.shape[0], frm_t.shape[0]
    if n_s == n_t and n_s > 1:
        return T.add(frm_s, frm_t)
    if {n_s, n_t} == {1, 10} or (n_s != n_t and 1 in (n_s, n_t)):
        full, cls = (frm_s, frm_t) if n_s > n_t else (frm_t, frm_s)
        fused_cls = T.add(T.take_rows(full, np.array([0])), cls)
        return T.place_rows(full, fused_cls, np.array([0]))
    raise StrategyError(f"addition undefined for mode pair ({n_s}, {n_t})")


def aggregate_learnable(frm_s: Tensor, frm_t: Tensor, logits: Tensor) -> Tensor:
    """Adaptive combination rule with input-independent trainable weights."""
    return aggregate_adaptive(frm_s, frm_t, T.softmax(logits, axis=1))


class Aggregator:
    """Config-selected fusion strategy bound to a mode pair."""

    def __init__(self, variant: str, modes: tuple[int, int], d_model: int,
                 tokens_per_frame: int = 10, d_hidden: int | None = None,
                 seed: int = 0, nonlinearity: str = "sigmoid",
                 per_frame_scalar: bool = False):
        if variant not in VARIANTS:
            raise StrategyError(f"unknown aggregation variant {variant!r}")
        modes = (int(modes[0]), int(modes[1]))
        for m in modes:
            if m not in (1, tokens_per_frame):
                raise StrategyError(f"stream mode must be 1 or {tokens_per_frame}, got {m}")
        if variant in ("adaptive_routing", "learnable_weighting"):
            if modes != (tokens_per_frame, tokens_per_frame):
                raise StrategyError(f"{variant} requires both streams in "
                                    f"{tokens_per_frame}-token mode, got {modes}")
        if variant == "addition" and modes == (1, 1):
            raise StrategyError("addition undefined for mode pair (1, 1)")
        self.variant = variant
        self.modes = modes
        self.tokens_per_frame = tokens_per_frame
        self.gate: AggregationGate | None = None
        self.learnable_logits: Tensor | None = None
        if variant == "adaptive_routing":
            self.gate = AggregationGate(d_model, tokens_per_frame, d_hidden,
                                        seed, nonlinearity, per_frame_scalar)
        elif variant == "learnable_weighting":
            self.learnable_logits = T.zeros_param((tokens_per_frame, _STREAMS))

    def params(self) -> dict[str, Tensor]:
        if self.gate is not None:
            return self.gate.params()
        if self.learnable_logits is not None:
            return {"gate.learnable_logits": self.learnable_logits}
        return {}

    @property
    def fused_count(self) -> int:
        if self.variant == "concat":
            return self.modes[0] + self.modes[1]
        return max(self.modes)

    def fuse(self, frm_s: Tensor, frm_t: Tensor) -> Tensor:
        if frm_s.shape[0] != self.modes[0] or frm_t.shape[0] != self.modes[1]:
            raise StrategyError(
                f"stream counts ({frm_s.shape[0]}, {frm_t.shape[0]}) do not match "
                f"configured modes {self.modes}")
        if self.variant == "concat":
            return aggregate_concat(frm_s, frm_t)
        if self.variant == "addition":
            return aggregate_addition(frm_s, frm_t)
        if self.variant == "learnable_weighting":
            return aggregate_learnable(frm_s, frm_t, self.learnable_logits)
        vg = T.take_rows(frm_s, np.array([0]))  # general CLS guides the gate
        return aggregate_adaptive(frm_s, frm_t, self.gate.route_weights(vg))
