"""Toy decoder-only LM over interleaved vision-text sequences.

Two forward implementations share one parameter set. The taped path
(`forward_full`) runs the whole sequence through the autodiff engine and
backs the training loss. The incremental path (`EpisodeCache` +
`forward_incremental`) is plain numpy with per-layer key/value caches and
serves streaming inference; it must agree with the taped path to 1e-9, which
the test suite checks directly.

Every block computes a residual delta (attention output plus the FFN applied
after it) and hands it to the dropping router's apply step, so routed and
unrouted layers share one code path and the beta = 0 equivalence is exact.
Dropped tokens keep their original rotary positions at later layers.
"""

from __future__ import annotations

import math
from typing import Sequence as TySequence

import numpy as np

from . import rng, tensor as T
from .aggregation import Aggregator
from .dropping import DropRouter, apply_routed_layer
from .encoders import FrameBundle
from .errors import CacheError, ConfigError, ShapeError, SupervisionError
from .sequence import (FusedFrameSegment, GeneralVecSegment, InterleavedSequence,
                       TextSegment, Vocab)
from .tensor import Tensor

_KEY_MODEL = 401
_NEG_INF = -1e30


def _np_layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray,
                   eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc * (1.0 / np.sqrt(var + eps))) * g + b


def _np_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_GELU_C = math.sqrt(2.0 / math.pi)


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _np_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    x1, x2 = x[:, :half], x[:, half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)


class ToyLM:
    def __init__(self, vocab: Vocab, aggregator: Aggregator,
                 drop_router: DropRouter, d_model: int = 64, n_layers: int = 6,
                 n_heads: int = 4, d_ff: int | None = None,
                 enc_width: int = 64, rope_base: float = 10000.0, seed: int = 0):
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} must split across {n_heads} heads")
        if (d_model // n_heads) % 2 != 0:
            raise ConfigError("head width must be even for the rotary pairing")
        self.vocab = vocab
        self.aggregator = aggregator
        self.router = drop_router
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.d_ff = 4 * d_model if d_ff is None else d_ff
        self.enc_width = enc_width
        self.rope_base = rope_base

        gen = rng.generator(seed, _KEY_MODEL)
        p: dict[str, Tensor] = {}
        p["embed"] = T.uniform_init(gen, (vocab.size, d_model), fan_in=d_model)
        for tag in ("proj_gen", "proj_ego"):
            p[f"{tag}.w"] = T.uniform_init(gen, (enc_width, d_model), fan_in=enc_width)
            p[f"{tag}.b"] = T.zeros_param((d_model,))
        for i in range(n_layers):
            pre = f"layer{i:02d}"
            p[f"{pre}.ln1.g"] = T.parameter(np.ones(d_model))
            p[f"{pre}.ln1.b"] = T.zeros_param((d_model,))
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.attn.{name}"] = T.uniform_init(gen, (d_model, d_model),
                                                         fan_in=d_model)
            p[f"{pre}.ln2.g"] = T.parameter(np.ones(d_model))
            p[f"{pre}.ln2.b"] = T.zeros_param((d_model,))
            p[f"{pre}.ffn.w_up"] = T.uniform_init(gen, (d_model, self.d_ff),
                                                  fan_in=d_model)
            p[f"{pre}.ffn.b_up"] = T.zeros_param((self.d_ff,))
            p[f"{pre}.ffn.w_down"] = T.uniform_init(gen, (self.d_ff, d_model),
                                                    fan_in=self.d_ff)
            p[f"{pre}.ffn.b_down"] = T.zeros_param((d_model,))
        p["final_ln.g"] = T.parameter(np.ones(d_model))
        p["final_ln.b"] = T.zeros_param((d_model,))
        p["head.w"] = T.uniform_init(gen, (d_model, vocab.size), fan_in=d_model)
        self._p = p

    def params(self) -> dict[str, Tensor]:
        merged = dict(self._p)
        merged.update(self.aggregator.params())
        merged.update(self.router.params())
        return merged

    # ---------------- taped full-sequence path ----------------

    def _fuse_frame(self, bundle: FrameBundle) -> Tensor:
        g = T.add(T.matmul(T.constant(bundle.general_tokens), self._p["proj_gen.w"]),
                  self._p["proj_gen.b"])
        e = T.add(T.matmul(T.constant(bundle.ego_tokens), self._p["proj_ego.w"]),
                  self._p["proj_ego.b"])
        return self.aggregator.fuse(g, e)

    def embed_sequence(self, seq: InterleavedSequence,
                       bundles: TySequence[FrameBundle]) -> Tensor:
        parts = []
        for seg in seq.segments:
            if isinstance(seg, FusedFrameSegment):
                fused = self._fuse_frame(bundles[seg.frame_idx])
                if fused.shape[0] != seg.n_tokens:
                    raise ShapeError(
                        f"frame {seg.frame_idx} fused into {fused.shape[0]} tokens, "
                        f"sequence expects {seg.n_tokens}")
                parts.append(fused)
            elif isinstance(seg, GeneralVecSegment):
                parts.append(T.add(T.matmul(T.constant(seg.vectors),
                                            self._p["proj_gen.w"]),
                                   self._p["proj_gen.b"]))
            elif isinstance(seg, TextSegment):
                parts.append(T.embed(self._p["embed"], np.array(seg.token_ids)))
            else:
                raise ShapeError(f"unknown segment type {type(seg).__name__}")
        return T.concat_rows(parts)

    def _rope_tables(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        half = self.d_head // 2
        inv_freq = self.rope_base ** (-np.arange(half) * 2.0 / self.d_head)
        angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
        return np.cos(angles), np.sin(angles)

    def _block_delta(self, layer: int, sub: Tensor, positions: np.ndarray) -> Tensor:
        p = self._p
        pre = f"layer{layer:02d}"
        n = sub.shape[0]
        h = T.layer_norm(sub, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = T.matmul(h, p[f"{pre}.attn.wq"])
        k = T.matmul(h, p[f"{pre}.attn.wk"])
        v = T.matmul(h, p[f"{pre}.attn.wv"])
        cos, sin = self._rope_tables(positions)
        causal = np.triu(np.full((n, n), _NEG_INF), k=1)
        heads = []
        for head in range(self.n_heads):
            lo, hi = head * self.d_head, (head + 1) * self.d_head
            qh = T.rope(T.slice_cols(q, lo, hi), cos, sin)
            kh = T.rope(T.slice_cols(k, lo, hi), cos, sin)
            vh = T.slice_cols(v, lo, hi)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(self.d_head))
            attn = T.softmax(T.add(scores, T.constant(causal)), axis=-1)
            heads.append(T.matmul(attn, vh))
        a = T.matmul(T.concat_cols(heads), p[f"{pre}.attn.wo"])
        h2 = T.layer_norm(T.add(sub, a), p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        up = T.gelu(T.add(T.matmul(h2, p[f"{pre}.ffn.w_up"]), p[f"{pre}.ffn.b_up"]))
        f = T.add(T.matmul(up, p[f"{pre}.ffn.w_down"]), p[f"{pre}.ffn.b_down"])
        return T.add(a, f)

    def forward_full(self, seq: InterleavedSequence,
                     bundles: TySequence[FrameBundle],
                     trace: list | None = None) -> Tensor:
        """Logits (N, vocab) for every position, through the routed layers.

        When ``trace`` is a list, each routed layer appends a record with the
        retained mask and the hidden states before/after the layer so tests
        can check that skipped rows pass through untouched.
        """
        x = self.embed_sequence(seq, bundles)
        n = x.shape[0]
        all_rows = np.ones(n, dtype=bool)
        for layer in range(self.n_layers):
            def layer_fn(sub, positions, _layer=layer):
                return self._block_delta(_layer, sub, positions)

            if layer in self.router.routed_layers:
                need_scores = self.router.beta > 0.0 or self.router.scale_by_r
                if need_scores:
                    r = self.router.layer_scores(layer, x)
                    scores = r.data[:, 0]
                else:
                    scores = np.zeros(n)
                mask = self.router.retained_mask(layer, scores, seq.visual,
                                                 seq.group_ids, seq.drop_salt)
                scale = None
                if self.router.scale_by_r:
                    vcol = seq.visual.astype(np.float64)[:, None]
                    scale = T.add(T.mul(r, T.constant(vcol)), T.constant(1.0 - vcol))
                before = x.data.copy() if trace is not None else None
                x = apply_routed_layer(x, mask, layer_fn, scale)
                if trace is not None:
                    trace.append({"layer": layer, "mask": mask.copy(),
                                  "before": before, "after": x.data.copy()})
            else:
                x = apply_routed_layer(x, all_rows, layer_fn, None)
        x = T.layer_norm(x, self._p["final_ln.g"], self._p["final_ln.b"])
        return T.matmul(x, self._p["head.w"])

    def loss(self, seq: InterleavedSequence, bundles: TySequence[FrameBundle],
             stream_weight: float = 1.0) -> tuple[Tensor, dict]:
        logits = self.forward_full(seq, bundles)
        return streaming_lm_loss(logits, seq, stream_weight)

    # ---------------- numpy incremental path ----------------

    def start_episode(self, drop_salt: int = 0) -> "EpisodeCache":
        return EpisodeCache(self, drop_salt)

    def forward_incremental(self, cache: "EpisodeCache", segments: list,
                            bundles: TySequence[FrameBundle]) -> np.ndarray:
        return cache.extend(segments, bundles)


class EpisodeCache:
    """Append-only per-layer KV store for the numpy streaming forward.

    Chunks are segment-atomic: a frame's visual group arrives whole, so the
    per-frame retention decision never sees a partial group. Only rows
    retained at a layer are cached there; their original positions ride along
    for the rotary phases and causal ordering.
    """

    def __init__(self, model: ToyLM, drop_salt: int = 0):
        if model.router.selection == "global_percentile" and model.router.beta > 0:
            raise ConfigError(
                "sequence-global percentile selection is not causal; "
                "incremental decoding requires per_frame selection")
        self.model = model
        self.drop_salt = drop_salt
        self.n_positions = 0
        self.keys: list[np.ndarray] = [np.zeros((0, model.d_model))
                                       for _ in range(model.n_layers)]
        self.values: list[np.ndarray] = [np.zeros((0, model.d_model))
                                         for _ in range(model.n_layers)]
        self.last_logits: np.ndarray | None = None

    def _np(self, name: str) -> np.ndarray:
        return self.model._p[name].data

    def _embed_chunk(self, segments: list, bundles) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = self.model
        parts, visual, groups = [], [], []
        for seg in segments:
            if isinstance(seg, FusedFrameSegment):
                parts.append(self._np_fuse(bundles[seg.frame_idx]))
                visual.extend([True] * seg.n_tokens)
                groups.extend([seg.group_id] * seg.n_tokens)
            elif isinstance(seg, GeneralVecSegment):
                parts.append(seg.vectors @ self._np("proj_gen.w") + self._np("proj_gen.b"))
                visual.extend([True] * seg.vectors.shape[0])
                groups.extend([seg.group_id] * seg.vectors.shape[0])
            elif isinstance(seg, TextSegment):
                parts.append(self._np("embed")[np.array(seg.token_ids)])
                visual.extend([False] * len(seg.token_ids))
                groups.extend([-1] * len(seg.token_ids))
            else:
                raise CacheError(f"unknown segment type {type(seg).__name__}")
        x = np.concatenate(parts, axis=0)
        return x, np.array(visual, dtype=bool), np.array(groups, dtype=np.int64)

    def _np_fuse(self, bundle: FrameBundle) -> np.ndarray:
        m = self.model
        g = bundle.general_tokens @ self._np("proj_gen.w") + self._np("proj_gen.b")
        e = bundle.ego_tokens @ self._np("proj_ego.w") + self._np("proj_ego.b")
        agg = m.aggregator
        if agg.variant == "concat":
            return np.concatenate([g, e], axis=0)
        if agg.variant == "addition":
            if g.shape[0] == e.shape[0]:
                return g + e
            full, cls = (g, e) if g.shape[0] > e.shape[0] else (e, g)
            out = full.copy()
            out[0] = full[0] + cls[0]
            return out
        if agg.variant == "learnable_weighting":
            w = _np_softmax_rows(agg.learnable_logits.data)
        else:
            gate = agg.gate
            vg = g[0:1]
            h = vg @ gate.w1.data + gate.b1.data
            h = _np_sigmoid(h) if gate.nonlinearity == "sigmoid" else np.maximum(h, 0.0)
            logits = h @ gate.w2.data + gate.b2.data
            if gate.per_frame_scalar:
                logits = np.tile(logits.reshape(1, 2), (gate.tokens_per_frame, 1))
            else:
                logits = logits.reshape(gate.tokens_per_frame, 2)
            w = _np_softmax_rows(logits)
        return w[:, 0:1] * g + w[:, 1:2] * e

    def extend(self, segments: list, bundles) -> np.ndarray:
        """Run new segments through every layer; returns their logits."""
        if not segments:
            return np.zeros((0, self.model.vocab.size))
        m = self.model
        x, visual, groups = self._embed_chunk(segments, bundles)
        c = x.shape[0]
        positions = np.arange(self.n_positions, self.n_positions + c)
        for layer in range(m.n_layers):
            if layer in m.router.routed_layers and m.router.beta > 0.0:
                scores = (x @ m.router.weights[layer].data)[:, 0]
                mask = m.router.retained_mask(layer, scores, visual, groups,
                                              self.drop_salt)
            else:
                mask = np.ones(c, dtype=bool)
            idx = np.flatnonzero(mask)
            if idx.size == 0:
                continue
            sub = x[idx]
            pos_sub = positions[idx]
            delta = self._np_block_delta(layer, sub, pos_sub)
            if (layer in m.router.routed_layers and m.router.scale_by_r):
                r_sub = (sub @ m.router.weights[layer].data)[:, 0]
                scale = np.where(visual[idx], r_sub, 1.0)[:, None]
                delta = scale * delta
            x[idx] = sub + delta
        x = _np_layer_norm(x, self._np("final_ln.g"), self._np("final_ln.b"))
        logits = x @ self._np("head.w")
        self.n_positions += c
        self.last_logits = logits[-1]
        return logits

    def _np_block_delta(self, layer: int, sub: np.ndarray,
                        pos_sub: np.ndarray) -> np.ndarray:
        m = self.model
        pre = f"layer{layer:02d}"
        h = _np_layer_norm(sub, self._np(f"{pre}.ln1.g"), self._np(f"{pre}.ln1.b"))
        q = h @ self._np(f"{pre}.attn.wq")
        k = h @ self._np(f"{pre}.attn.wk")
        v = h @ self._np(f"{pre}.attn.wv")
        half = m.d_head // 2
        inv_freq = m.rope_base ** (-np.arange(half) * 2.0 / m.d_head)
        angles = pos_sub[:, None].astype(np.float64) * inv_freq[None, :]
        cos, sin = np.cos(angles), np.sin(angles)
        k_cache, v_cache = self.keys[layer], self.values[layer]
        n_old = k_cache.shape[0]
        n_new = sub.shape[0]
        heads = []
        k_rot_full = np.zeros_like(k)
        for head in range(m.n_heads):
            lo, hi = head * m.d_head, (head + 1) * m.d_head
            qh = _np_rope(q[:, lo:hi], cos, sin)
            kh = _np_rope(k[:, lo:hi], cos, sin)
            k_rot_full[:, lo:hi] = kh
            k_all = np.concatenate([k_cache[:, lo:hi], kh], axis=0)
            v_all = np.concatenate([v_cache[:, lo:hi], v[:, lo:hi]], axis=0)
            scores = (qh @ k_all.T) * (1.0 / math.sqrt(m.d_head))
            intra = np.triu(np.full((n_new, n_new), _NEG_INF), k=1)
            scores[:, n_old:] += intra
            attn = _np_softmax_rows(scores)
            heads.append(attn @ v_all)
        a = np.concatenate(heads, axis=1) @ self._np(f"{pre}.attn.wo")
        h2 = _np_layer_norm(sub + a, self._np(f"{pre}.ln2.g"), self._np(f"{pre}.ln2.b"))
        up = _np_gelu(h2 @ self._np(f"{pre}.ffn.w_up") + self._np(f"{pre}.ffn.b_up"))
        f = up @ self._np(f"{pre}.ffn.w_down") + self._np(f"{pre}.ffn.b_down")
        self.keys[layer] = np.concatenate([k_cache, k_rot_full], axis=0)
        self.values[layer] = np.concatenate([v_cache, v], axis=0)
        return a + f


def streaming_lm_loss(logits: Tensor, seq: InterleavedSequence,
                      stream_weight: float = 1.0) -> tuple[Tensor, dict]:
    """Mean over all positions of the two masked NLL channels.

    Streaming positions push the silence/respond decision; language positions
    push the next response token. The returned parts dictionary reports each
    channel's contribution on the same 1/N scale as the total.
    """
    n = len(seq)
    if logits.shape[0] != n:
        raise SupervisionError(
            f"got logits for {logits.shape[0]} positions, sequence has {n}")
    lp = T.log_softmax(logits)
    pieces = []
    parts = {"n_positions": n, "n_stream": 0, "n_lm": 0,
             "streaming": 0.0, "lm": 0.0}
    s_idx = np.flatnonzero(seq.stream_mask)
    if s_idx.size:
        nll = T.scale(T.pick(T.take_rows(lp, s_idx), seq.stream_targets[s_idx]).sum(),
                      -stream_weight / n)
        parts["n_stream"] = int(s_idx.size)
        parts["streaming"] = nll.item()
        pieces.append(nll)
    l_idx = np.flatnonzero(seq.lm_mask)
    if l_idx.size:
        nll = T.scale(T.pick(T.take_rows(lp, l_idx), seq.lm_targets[l_idx]).sum(),
                      -1.0 / n)
        parts["n_lm"] = int(l_idx.size)
        parts["lm"] = nll.item()
        pieces.append(nll)
    if not pieces:
        raise SupervisionError("sequence has no supervised positions")
    total = T.add_all(pieces)
    parts["total"] = total.item()
    return total, parts


def determine(logits_row: np.ndarray, vocab: Vocab) -> bool:
    """True iff the respond logit strictly beats the silence logit."""
    return bool(logits_row[vocab.respond] > logits_row[vocab.silence])


def generate_greedy(cache: EpisodeCache, bundles, max_len: int = 32
                    ) -> tuple[list[int], bool]:
    """Greedy decode from the cache's last logits until TURN_END or the cap.

    Emitted tokens (and the closing TURN_END) are fed back into the cache so
    the episode context matches what a training sequence would contain.
    Returns (response tokens, truncated flag).
    """
    vocab = cache.model.vocab
    if cache.last_logits is None:
        raise CacheError("generation requires at least one decoded position")
    tokens: list[int] = []
    logits = cache.last_logits
    while True:
        nxt = int(np.argmax(logits))
        if nxt == vocab.turn_end:
            cache.extend([TextSegment([vocab.turn_end])], bundles)
            return tokens, False
        if len(tokens) >= max_len:
            return tokens, True
        tokens.append(nxt)
        logits = cache.extend([TextSegment([nxt])], bundles)[-1]
