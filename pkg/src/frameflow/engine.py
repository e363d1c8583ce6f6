"""The online loop: frame ingestion, respond/silent decisions, responses.

Every fourth ingested frame closes a half-second window: pending user
queries bind first, then the window's fused tokens and a frame separator
enter the episode, the separator's logits decide silent versus respond, and
a respond decision triggers the keyframe augmentation block plus greedy
generation. The builder records exactly what the incremental cache consumed,
so replaying the built sequence in one pass reproduces every decision.

The same element layout, with ground-truth targets instead of live
decisions, builds the supervised training sequences from dataset samples.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import StreamSample, next_boundary
from .encoders import (FRAMES_PER_GROUP, TICK, EgocentricEncoder, FrameBundle,
                       GeneralEncoder, SyntheticFrame, bundle_group)
from .errors import ConfigError, ParseError, StreamError
from .model import EpisodeCache, ToyLM, determine, generate_greedy
from .sequence import InterleavedSequence, SequenceBuilder, TextSegment, Vocab
from .slowpath import (assemble_thinking_template, detect_boxes_synthetic,
                       make_box_tokens, make_fine_grained_tokens,
                       make_grid_tokens)


@dataclass
class EngineSettings:
    use_slow_path: bool = True
    fine_grained: bool = False  # 1x6x6 grid ablation instead of 4x3x3
    use_box: bool = True
    box_jitter: bool = False
    jitter_seed: int = 0
    max_response_len: int = 32


@dataclass
class Decision:
    t: float
    decision: str  # "respond" | "silent"
    logit_gap: float


@dataclass
class ResponseTurn:
    t: float
    tokens: list[int]
    truncated: bool


@dataclass
class EpisodeResult:
    n_frames: int
    decisions: list[Decision]
    responses: list[ResponseTurn]
    meta: dict


class EpisodeState:
    def __init__(self, cache: EpisodeCache, vocab: Vocab):
        self.cache = cache
        self.builder = SequenceBuilder(vocab)
        self.bundles: list[FrameBundle] = []
        self.buffer: list[SyntheticFrame] = []
        self.n_frames = 0
        self.decisions: list[Decision] = []
        self.responses: list[ResponseTurn] = []
        self.sep_positions: list[int] = []
        self.pending_queries: deque = deque()

    @property
    def current_time(self) -> float:
        return self.n_frames * TICK

    def result(self, meta: dict | None = None) -> EpisodeResult:
        return EpisodeResult(n_frames=self.n_frames, decisions=self.decisions,
                             responses=self.responses, meta=meta or {})


class DialogueEngine:
    def __init__(self, model: ToyLM, general: GeneralEncoder,
                 ego: EgocentricEncoder, settings: EngineSettings | None = None):
        self.model = model
        self.vocab = model.vocab
        self.general = general
        self.ego = ego
        self.settings = settings or EngineSettings()
        self.mode_general, self.mode_ego = model.aggregator.modes
        if self.settings.use_slow_path and self.mode_general != 10:
            raise ConfigError(
                "keyframe augmentation needs the general stream in 10-token mode")

    def start_episode(self, drop_salt: int = 0) -> EpisodeState:
        state = EpisodeState(self.model.start_episode(drop_salt), self.vocab)
        state.builder.drop_salt = drop_salt
        return state

    # -- element feeding keeps builder and cache in lockstep --

    def _feed_tokens(self, state: EpisodeState, token_ids: list[int],
                     kinds: list[str | None]) -> np.ndarray:
        for tid, kind in zip(token_ids, kinds):
            state.builder.add_token(tid, kind=kind)
        return state.cache.extend([TextSegment(list(token_ids))], state.bundles)

    def _feed_template(self, state: EpisodeState, bundle: FrameBundle) -> None:
        boxes = list(bundle.boxes) if (bundle.boxes and self.settings.use_box) else []
        if self.settings.fine_grained:
            grid = make_fine_grained_tokens(bundle.patch_grid)
        else:
            grid = make_grid_tokens(bundle.patch_grid)
        box = make_box_tokens(bundle.patch_grid, boxes)
        elements = assemble_thinking_template(bundle.general_tokens, grid, box,
                                              self.vocab)
        for kind, payload in elements:
            if kind == "token":
                self._feed_tokens(state, [payload], [None])
            else:
                state.builder.add_general_vectors(payload)
                state.cache.extend([state.builder.segments[-1]], state.bundles)

    def _box_fn(self):
        if not (self.settings.use_slow_path and self.settings.use_box):
            return None
        return lambda frame: detect_boxes_synthetic(
            frame, jitter=self.settings.box_jitter, seed=self.settings.jitter_seed)

    # -- the loop --

    def ingest_frame(self, state: EpisodeState,
                     frame: SyntheticFrame) -> Decision | None:
        expected = state.current_time
        if abs(frame.timestamp - expected) > 1e-9:
            raise StreamError(
                f"frame at t={frame.timestamp} arrived out of order; "
                f"expected the {expected:.3f} s tick")
        state.n_frames += 1
        state.buffer.append(frame)
        if len(state.buffer) < FRAMES_PER_GROUP:
            return None
        group, state.buffer = state.buffer, []
        return self._step(state, group)

    def inject_user_query(self, state: EpisodeState, tokens: list[int],
                          time: float) -> None:
        """Queue a query; it binds at the next half-second boundary."""
        decided = (state.n_frames // FRAMES_PER_GROUP) * (FRAMES_PER_GROUP * TICK)
        if next_boundary(time) <= decided + 1e-9:
            raise StreamError(
                f"query at t={time} would bind at {next_boundary(time):.1f} s, "
                f"already determined (stream is at {state.current_time:.3f} s)")
        state.pending_queries.append(list(tokens))

    def _step(self, state: EpisodeState, group: list[SyntheticFrame]) -> Decision:
        while state.pending_queries:  # FIFO, bound at this window boundary
            tokens = state.pending_queries.popleft()
            state.builder.add_user_query(tokens)
            state.cache.extend(
                [TextSegment([self.vocab.user_tag] + list(tokens))], state.bundles)

        bundle = bundle_group(group, self.general, self.ego, self.mode_general,
                              self.mode_ego, self._box_fn())
        state.bundles.append(bundle)
        state.builder.add_fused_frame(len(state.bundles) - 1,
                                      self.model.aggregator.fused_count)
        state.cache.extend([state.builder.segments[-1]], state.bundles)

        state.builder.add_frame_sep(None)
        logits = state.cache.extend([TextSegment([self.vocab.frame_sep])],
                                    state.bundles)
        state.sep_positions.append(len(state.builder.kinds) - 1)
        gap = float(logits[-1, self.vocab.respond] - logits[-1, self.vocab.silence])
        respond = determine(logits[-1], self.vocab)
        decision = Decision(t=bundle.timestamp,
                            decision="respond" if respond else "silent",
                            logit_gap=gap)
        state.decisions.append(decision)
        if respond:
            if self.settings.use_slow_path:
                self._feed_template(state, bundle)
            else:
                self._feed_tokens(state, [self.vocab.respond], ["respond_trigger"])
            tokens, truncated = generate_greedy(state.cache, state.bundles,
                                                self.settings.max_response_len)
            state.builder.add_response(tokens, supervised=False,
                                       truncated=truncated)
            state.responses.append(ResponseTurn(t=bundle.timestamp,
                                                tokens=tokens,
                                                truncated=truncated))
        return decision

    def run_stream(self, frames: list[SyntheticFrame],
                   queries: list[tuple[float, list[int]]] | None = None,
                   meta: dict | None = None,
                   drop_salt: int = 0) -> tuple[EpisodeResult, EpisodeState]:
        """Feeds a whole stream; queries are (time, tokens) pairs."""
        state = self.start_episode(drop_salt)
        pending = sorted(queries or [], key=lambda q: q[0])
        qi = 0
        for frame in frames:
            # deliver a query before the ingest whose clock advance passes it
            while (qi < len(pending)
                   and pending[qi][0] < frame.timestamp + TICK - 1e-9):
                self.inject_user_query(state, pending[qi][1], pending[qi][0])
                qi += 1
            self.ingest_frame(state, frame)
        return state.result(meta), state

    def replay_logit_gaps(self, state: EpisodeState) -> list[float]:
        """One-pass replay of the built episode; per-decision logit gaps."""
        seq = state.builder.build()
        cache = self.model.start_episode(seq.drop_salt)
        logits = cache.extend(list(seq.segments), state.bundles)
        return [float(logits[p, self.vocab.respond] - logits[p, self.vocab.silence])
                for p in state.sep_positions]


# ---------------- supervised episodes from dataset ground truth ----------------

def build_training_episode(sample: StreamSample, model: ToyLM,
                           general: GeneralEncoder, ego: EgocentricEncoder,
                           settings: EngineSettings | None = None
                           ) -> tuple[InterleavedSequence, list[FrameBundle], dict]:
    """Teacher-forced sequence with ground-truth supervision targets.

    Mirrors the online element layout exactly: queries bind before the
    window they precede, respond windows carry the augmentation block and
    the expected response tokens. Returns (sequence, bundles, info) where
    info records per-turn language positions and corrupted-turn flags.
    """
    settings = settings or EngineSettings()
    vocab = model.vocab
    engine = DialogueEngine(model, general, ego, settings)
    builder = SequenceBuilder(vocab)
    builder.drop_salt = sample.episode_id
    bundles: list[FrameBundle] = []
    by_time = {t.response_time: t for t in sample.turns}
    queries = sorted((t.query_time, i) for i, t in enumerate(sample.turns)
                     if t.query_time is not None)
    qi = 0
    info = {"sep_positions": [], "turn_lm_positions": [],
            "turn_corrupted": [], "turn_times": []}
    n_groups = len(sample.frames) // FRAMES_PER_GROUP
    for g in range(n_groups):
        group = sample.frames[g * FRAMES_PER_GROUP:(g + 1) * FRAMES_PER_GROUP]
        boundary = group[-1].timestamp + TICK
        while qi < len(queries) and next_boundary(queries[qi][0]) <= boundary + 1e-9:
            turn = sample.turns[queries[qi][1]]
            builder.add_user_query(turn.query_tokens)
            qi += 1
        bundle = bundle_group(group, general, ego, engine.mode_general,
                              engine.mode_ego, engine._box_fn())
        bundles.append(bundle)
        builder.add_fused_frame(len(bundles) - 1, model.aggregator.fused_count)
        turn = by_time.get(boundary)
        builder.add_frame_sep(vocab.respond if turn else vocab.silence)
        if turn is None:
            continue
        if settings.use_slow_path:
            boxes = list(bundle.boxes) if (bundle.boxes and settings.use_box) else []
            if settings.fine_grained:
                grid = make_fine_grained_tokens(bundle.patch_grid)
            else:
                grid = make_grid_tokens(bundle.patch_grid)
            box = make_box_tokens(bundle.patch_grid, boxes)
            for kind, payload in assemble_thinking_template(
                    bundle.general_tokens, grid, box, vocab):
                if kind == "token":
                    builder.add_token(payload)
                else:
                    builder.add_general_vectors(payload)
        else:
            builder.add_token(vocab.respond, kind="respond_trigger")
        start = len(builder.kinds)
        builder.add_response(turn.response_tokens, supervised=True)
        info["turn_lm_positions"].append(
            list(range(start - 1, start + len(turn.response_tokens))))
        info["turn_corrupted"].append(turn.corrupted)
        info["turn_times"].append(turn.response_time)
    seq = builder.build()
    info["sep_positions"] = list(np.flatnonzero(seq.stream_mask))
    return seq, bundles, info


# ---------------- episode persistence ----------------

def save_episode(path: str | Path, result: EpisodeResult) -> None:
    """Header line, then one line per decision and per response turn."""
    lines = [json.dumps({"kind": "episode_header", "n_frames": result.n_frames,
                         **result.meta}, sort_keys=True, separators=(",", ":"))]
    by_time: dict[float, ResponseTurn] = {r.t: r for r in result.responses}
    for d in result.decisions:
        lines.append(json.dumps({"t": d.t, "decision": d.decision,
                                 "logit_gap": d.logit_gap},
                                sort_keys=True, separators=(",", ":")))
        r = by_time.get(d.t)
        if r is not None:
            lines.append(json.dumps({"t": r.t, "tokens": r.tokens,
                                     "truncated": r.truncated},
                                    sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_episode(path: str | Path) -> EpisodeResult:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError("episode file is empty", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in header: {e}", line=1) from e
    if header.get("kind") != "episode_header":
        raise ParseError("first line must be the episode header", line=1)
    meta = {k: v for k, v in header.items() if k not in ("kind", "n_frames")}
    decisions, responses = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON in episode record: {e}",
                             line=lineno) from e
        if "decision" in rec:
            for key in ("t", "logit_gap"):
                if key not in rec:
                    raise ParseError(f"decision record missing field {key!r}",
                                     line=lineno)
            decisions.append(Decision(t=rec["t"], decision=rec["decision"],
                                      logit_gap=rec["logit_gap"]))
        elif "tokens" in rec:
            for key in ("t", "truncated"):
                if key not in rec:
                    raise ParseError(f"turn record missing field {key!r}",
                                     line=lineno)
            responses.append(ResponseTurn(t=rec["t"], tokens=list(rec["tokens"]),
                                          truncated=rec["truncated"]))
        else:
            raise ParseError("record is neither a decision nor a turn",
                             line=lineno)
    if "n_frames" not in header:
        raise ParseError("header missing field 'n_frames'", line=1)
    return EpisodeResult(n_frames=header["n_frames"], decisions=decisions,
                         responses=responses, meta=meta)
