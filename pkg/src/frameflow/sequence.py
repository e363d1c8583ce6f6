"""Interleaved vision-text sequences and their supervision flags.

A sequence is an ordered list of segments: a frame's fused visual tokens, a
run of general-encoder vectors (keyframe grid/box tokens), or a run of text
ids. Flat per-position arrays carry what the model and routers need: which
rows are visual, which drop group each row belongs to, and the two masked
supervision channels. Position j's streaming flag supervises the next-token
distribution at j toward the silence/respond pair; its language flag
supervises it toward the actually-following text token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence as TySequence

import numpy as np

from .errors import ConfigError, SupervisionError

N_SPECIALS = 7


@dataclass(frozen=True)
class Vocab:
    """Token id space: text ids first, seven control ids at the top."""
    size: int = 64

    def __post_init__(self):
        if self.size < N_SPECIALS + 1:
            raise ConfigError(f"vocab size {self.size} cannot hold the control ids")

    @property
    def n_text(self) -> int:
        return self.size - N_SPECIALS

    @property
    def silence(self) -> int:
        return self.size - 7

    @property
    def respond(self) -> int:
        return self.size - 6

    @property
    def stream_tag(self) -> int:
        return self.size - 5

    @property
    def user_tag(self) -> int:
        return self.size - 4

    @property
    def focus_phrase(self) -> int:
        return self.size - 3

    @property
    def frame_sep(self) -> int:
        return self.size - 2

    @property
    def turn_end(self) -> int:
        return self.size - 1

    def name(self, token_id: int) -> str:
        names = {self.silence: "SILENCE", self.respond: "RESPOND",
                 self.stream_tag: "STREAM_TAG", self.user_tag: "USER_TAG",
                 self.focus_phrase: "FOCUS_PHRASE", self.frame_sep: "FRAME_SEP",
                 self.turn_end: "TURN_END"}
        return names.get(token_id, f"txt{token_id}")


@dataclass
class FusedFrameSegment:
    """The fused tokens of one frame; resolved against bundles at forward time."""
    frame_idx: int
    n_tokens: int
    group_id: int


@dataclass
class GeneralVecSegment:
    """Visual vectors at encoder width (grid/box tokens), one drop group."""
    vectors: np.ndarray  # (k, enc_width)
    group_id: int


@dataclass
class TextSegment:
    token_ids: list[int]


@dataclass
class InterleavedSequence:
    segments: list
    kinds: list[str]  # per-position element kind, for audits
    visual: np.ndarray  # (N,) bool
    group_ids: np.ndarray  # (N,) int, -1 for non-visual
    token_ids: np.ndarray  # (N,) int, 0 at visual positions
    stream_mask: np.ndarray  # (N,) bool
    stream_targets: np.ndarray  # (N,) int
    lm_mask: np.ndarray
    lm_targets: np.ndarray
    lm_is_text: np.ndarray  # lm-supervised positions whose target is a text token
    # keys the random-dropping baseline's masks, so different episodes draw
    # different retained sets; irrelevant to learned routing
    drop_salt: int = 0

    def __len__(self) -> int:
        return self.visual.shape[0]


class SequenceBuilder:
    """Appends elements in episode order and tracks supervision in place."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self.drop_salt = 0
        self.segments: list = []
        self.kinds: list[str] = []
        self._visual: list[bool] = []
        self._groups: list[int] = []
        self._tokens: list[int] = []
        self._s_mask: list[bool] = []
        self._s_tgt: list[int] = []
        self._l_mask: list[bool] = []
        self._l_tgt: list[int] = []
        self._l_text: list[bool] = []
        self._next_group = 0

    def _fresh_group(self) -> int:
        g = self._next_group
        self._next_group += 1
        return g

    def _push(self, kind: str, visual: bool, group: int, token_id: int) -> None:
        self.kinds.append(kind)
        self._visual.append(visual)
        self._groups.append(group)
        self._tokens.append(token_id)
        self._s_mask.append(False)
        self._s_tgt.append(0)
        self._l_mask.append(False)
        self._l_tgt.append(0)
        self._l_text.append(False)

    def _append_text_segment(self, token_ids: list[int]) -> None:
        # merge adjacent text segments so the model embeds them in one gather
        if self.segments and isinstance(self.segments[-1], TextSegment):
            self.segments[-1].token_ids.extend(token_ids)
        else:
            self.segments.append(TextSegment(token_ids=list(token_ids)))

    def add_token(self, token_id: int, kind: str | None = None) -> None:
        self._append_text_segment([token_id])
        self._push(kind or self.vocab.name(token_id), False, -1, token_id)

    def add_fused_frame(self, frame_idx: int, n_tokens: int) -> None:
        group = self._fresh_group()
        self.segments.append(FusedFrameSegment(frame_idx=frame_idx,
                                               n_tokens=n_tokens, group_id=group))
        for _ in range(n_tokens):
            self._push("visual", True, group, 0)

    def add_general_vectors(self, vectors: np.ndarray) -> None:
        group = self._fresh_group()
        self.segments.append(GeneralVecSegment(
            vectors=np.asarray(vectors, dtype=np.float64), group_id=group))
        for _ in range(vectors.shape[0]):
            self._push("visual", True, group, 0)

    def add_frame_sep(self, stream_target: int | None) -> None:
        """Frame-final separator; optionally the streaming supervision site."""
        self.add_token(self.vocab.frame_sep)
        if stream_target is not None:
            if stream_target not in (self.vocab.silence, self.vocab.respond):
                raise SupervisionError(
                    f"streaming target must be the silence/respond pair, got {stream_target}")
            self._s_mask[-1] = True
            self._s_tgt[-1] = stream_target

    def _supervise_next(self, target: int, is_text: bool) -> None:
        if not self.kinds:
            raise SupervisionError("language supervision needs a preceding position")
        if self._s_mask[-1]:
            raise SupervisionError(
                "a position cannot carry both streaming and language supervision")
        self._l_mask[-1] = True
        self._l_tgt[-1] = target
        self._l_text[-1] = is_text

    def add_response(self, token_ids: TySequence[int], supervised: bool = True,
                     truncated: bool = False) -> None:
        """Response text after the respond trigger, closed by TURN_END.

        Each emitted token supervises the position before it. A truncated
        generation (hit the length cap) has no TURN_END to learn from.
        """
        for t in token_ids:
            if supervised:
                self._supervise_next(t, is_text=True)
            self.add_token(t, kind="response_text")
        if not truncated:
            if supervised:
                self._supervise_next(self.vocab.turn_end, is_text=False)
            self.add_token(self.vocab.turn_end)

    def add_user_query(self, token_ids: TySequence[int]) -> None:
        self.add_token(self.vocab.user_tag)
        for t in token_ids:
            self.add_token(t, kind="query_text")

    def build(self) -> InterleavedSequence:
        s_mask = np.array(self._s_mask, dtype=bool)
        l_mask = np.array(self._l_mask, dtype=bool)
        if (s_mask & l_mask).any():
            raise SupervisionError("supervision flags overlap")
        return InterleavedSequence(
            segments=self.segments,
            kinds=self.kinds,
            visual=np.array(self._visual, dtype=bool),
            group_ids=np.array(self._groups, dtype=np.int64),
            token_ids=np.array(self._tokens, dtype=np.int64),
            stream_mask=s_mask,
            stream_targets=np.array(self._s_tgt, dtype=np.int64),
            lm_mask=l_mask,
            lm_targets=np.array(self._l_tgt, dtype=np.int64),
            lm_is_text=np.array(self._l_text, dtype=bool),
            drop_salt=self.drop_salt)
