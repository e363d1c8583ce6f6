"""Dual-rate synthetic visual encoders and stream alignment.

Two frozen seeded encoders stand in for pretrained vision towers. The
general-view encoder samples one frame per half second (2 FPS) and emits a
CLS token plus nine 3x3 mean-pooled tokens over 8x8 patch blocks. The
egocentric encoder consumes every frame (8 FPS) in groups of four, pooling
the temporal-mean field the same way and mixing in a temporal-difference
channel that reacts to motion the sparse sampler cannot see.

Both encoders are pure functions of (seed, input): no trainable state here.
Width adaptation into the language model is a trainable projection owned by
the model, not the encoders.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng
from .errors import (ConfigError, EmptyStreamError, GenerationError,
                     GroupingError, ParseError, ShapeError, StreamError)

FPS = 8
FRAMES_PER_GROUP = 4
TICK = 1.0 / FPS
FIELD_SIDE = 24
POOL_BLOCK = 8  # 24/8 = 3x3 pooled tokens
TOKENS_PER_FRAME = 10

# stream keys for deriving independent frozen-weight generators
_KEY_GENERAL = 101
_KEY_EGO = 102
_KEY_BACKGROUND = 103


@dataclass
class ScenePrimitive:
    """A placed rectangle in one frame: ground truth for box detection."""
    kind: str  # hand_left | hand_right | object
    center: tuple[float, float]  # (row, col), post-clamping
    extent: tuple[int, int]  # (height, width) in cells
    intensity: float


@dataclass
class SyntheticFrame:
    timestamp: float
    field: np.ndarray  # (side, side) scalar image, one value per patch
    scene_spec: list[ScenePrimitive] = dc_field(default_factory=list)


@dataclass
class FrameBundle:
    """One 0.5 s segment: both token streams plus the raw patch grid.

    `timestamp` is the end of the half-second window, i.e. the moment the
    bundle becomes available for a determination.
    """
    timestamp: float
    general_tokens: np.ndarray  # (1 or 10, width), row 0 is CLS
    ego_tokens: np.ndarray  # (1 or 10, width)
    patch_grid: np.ndarray  # (side*side, width)
    boxes: list | None = None


def primitive_bounds(center: tuple[float, float], extent: tuple[int, int],
                     side: int = FIELD_SIDE) -> tuple[int, int, int, int]:
    """Inclusive (r0, c0, r1, c1) cell rectangle, clamped inside the field."""
    h, w = int(extent[0]), int(extent[1])
    if not (1 <= h <= side and 1 <= w <= side):
        raise GenerationError(f"primitive extent {extent} does not fit a {side}-cell field")
    r0 = int(round(center[0] - (h - 1) / 2.0))
    c0 = int(round(center[1] - (w - 1) / 2.0))
    r0 = min(max(r0, 0), side - h)
    c0 = min(max(c0, 0), side - w)
    return r0, c0, r0 + h - 1, c0 + w - 1


def _check_mode(mode: int) -> None:
    if mode not in (1, TOKENS_PER_FRAME):
        raise ConfigError(f"token mode must be 1 or {TOKENS_PER_FRAME}, got {mode}")


def _block_means(field: np.ndarray, side: int, block: int) -> np.ndarray:
    per_axis = side // block
    return field.reshape(per_axis, block, per_axis, block).mean(axis=(1, 3)).reshape(-1)


class GeneralEncoder:
    """Frozen 2 FPS frame encoder: shared per-cell embedding, block pooling, CLS."""

    def __init__(self, width: int = 64, seed: int = 0, side: int = FIELD_SIDE):
        if side % POOL_BLOCK != 0:
            raise ConfigError(f"field side {side} must be divisible by {POOL_BLOCK}")
        self.width = width
        self.side = side
        gen = rng.generator(seed, _KEY_GENERAL)
        # one shared embedding direction per cell value: block shuffles of the
        # field then permute the pooled tokens exactly
        self.cell_weight = gen.uniform(-1.0, 1.0, size=width)
        self.cls_matrix = gen.uniform(-1.0, 1.0, size=(width, width)) / np.sqrt(width)
        self.cls_bias = gen.uniform(-0.5, 0.5, size=width)

    def _validate(self, field: np.ndarray) -> np.ndarray:
        field = np.asarray(field, dtype=np.float64)
        if field.shape != (self.side, self.side):
            raise ShapeError(f"expected {self.side}x{self.side} field, got {field.shape}")
        return field

    def _cls(self, mean_embedding: np.ndarray) -> np.ndarray:
        return self.cls_matrix @ mean_embedding + self.cls_bias

    def encode(self, frame: SyntheticFrame, mode: int = TOKENS_PER_FRAME
               ) -> tuple[np.ndarray, np.ndarray]:
        """Returns (tokens, patch_grid); tokens row 0 is always CLS."""
        _check_mode(mode)
        field = self._validate(frame.field)
        patch_grid = field.reshape(-1, 1) * self.cell_weight[None, :]
        cls = self._cls(field.mean() * self.cell_weight)
        if mode == 1:
            return cls[None, :], patch_grid
        pooled = _block_means(field, self.side, POOL_BLOCK)[:, None] * self.cell_weight
        return np.vstack([cls[None, :], pooled]), patch_grid


class EgocentricEncoder:
    """Frozen 8 FPS grouped encoder: temporal mean + motion difference channel."""

    def __init__(self, width: int = 64, seed: int = 0, side: int = FIELD_SIDE):
        if side % POOL_BLOCK != 0:
            raise ConfigError(f"field side {side} must be divisible by {POOL_BLOCK}")
        self.width = width
        self.side = side
        gen = rng.generator(seed, _KEY_EGO)
        self.static_weight = gen.uniform(-1.0, 1.0, size=width)
        # bias-free mixing: a zero difference channel must contribute nothing
        self.motion_weight = gen.uniform(-1.0, 1.0, size=width)
        self.cls_matrix = gen.uniform(-1.0, 1.0, size=(width, width)) / np.sqrt(width)
        self.cls_bias = gen.uniform(-0.5, 0.5, size=width)

    def _tokens(self, static: np.ndarray, diff: np.ndarray | None, mode: int) -> np.ndarray:
        static_mean_vec = static.mean() * self.static_weight
        if diff is not None:
            motion_mean_vec = diff.mean() * self.motion_weight
            cls = self.cls_matrix @ (static_mean_vec + motion_mean_vec) + self.cls_bias
        else:
            cls = self.cls_matrix @ static_mean_vec + self.cls_bias
        if mode == 1:
            return cls[None, :]
        pooled = _block_means(static, self.side, POOL_BLOCK)[:, None] * self.static_weight
        if diff is not None:
            pooled = pooled + _block_means(diff, self.side, POOL_BLOCK)[:, None] * self.motion_weight
        return np.vstack([cls[None, :], pooled])

    def encode_static(self, field: np.ndarray, mode: int = TOKENS_PER_FRAME) -> np.ndarray:
        """Encoding a motionless scene: the zero-difference reference point."""
        _check_mode(mode)
        field = np.asarray(field, dtype=np.float64)
        if field.shape != (self.side, self.side):
            raise ShapeError(f"expected {self.side}x{self.side} field, got {field.shape}")
        return self._tokens(field, None, mode)

    def encode_group(self, frames: Sequence[SyntheticFrame],
                     mode: int = TOKENS_PER_FRAME) -> np.ndarray:
        _check_mode(mode)
        if len(frames) != FRAMES_PER_GROUP:
            raise GroupingError(f"expected {FRAMES_PER_GROUP} frames per group, got {len(frames)}")
        times = [f.timestamp for f in frames]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise GroupingError(f"group timestamps must ascend, got {times}")
        stack = np.stack([np.asarray(f.field, dtype=np.float64) for f in frames])
        if stack.shape[1:] != (self.side, self.side):
            raise ShapeError(f"expected {self.side}x{self.side} fields, got {stack.shape[1:]}")
        mean_field = stack.mean(axis=0)
        diff = np.diff(stack, axis=0).mean(axis=0)
        if not diff.any():
            diff = None  # static group: reproduce the static encoding bit for bit
        return self._tokens(mean_field, diff, mode)


def align_streams(frames: Sequence[SyntheticFrame], general: GeneralEncoder,
                  ego: EgocentricEncoder, mode_general: int = TOKENS_PER_FRAME,
                  mode_ego: int = TOKENS_PER_FRAME,
                  box_fn: Callable[[SyntheticFrame], list] | None = None
                  ) -> list[FrameBundle]:
    """Bundle an 8 FPS stream into one FrameBundle per 0.5 s window.

    Trailing frames beyond the last whole second are discarded. The general
    encoder sees the last frame of each 4-frame window, keeping every token
    causal with respect to the window it summarizes.
    """
    if len(frames) < 2 * FRAMES_PER_GROUP:
        raise EmptyStreamError(
            f"stream of {len(frames)} frames is under one second; nothing to bundle")
    times = np.array([f.timestamp for f in frames])
    dts = np.diff(times)
    if not np.all(np.abs(dts - TICK) < 1e-9):
        raise StreamError("frame timestamps must advance uniformly at 8 FPS ticks")
    usable = (len(frames) // (2 * FRAMES_PER_GROUP)) * 2 * FRAMES_PER_GROUP
    return [bundle_group(frames[g * FRAMES_PER_GROUP:(g + 1) * FRAMES_PER_GROUP],
                         general, ego, mode_general, mode_ego, box_fn)
            for g in range(usable // FRAMES_PER_GROUP)]


def bundle_group(group: Sequence[SyntheticFrame], general: GeneralEncoder,
                 ego: EgocentricEncoder, mode_general: int = TOKENS_PER_FRAME,
                 mode_ego: int = TOKENS_PER_FRAME,
                 box_fn: Callable[[SyntheticFrame], list] | None = None
                 ) -> FrameBundle:
    """One 4-frame window into a bundle; shared by batch and online paths."""
    last = group[-1]
    general_tokens, patch_grid = general.encode(last, mode_general)
    ego_tokens = ego.encode_group(group, mode_ego)
    return FrameBundle(
        timestamp=last.timestamp + TICK,
        general_tokens=general_tokens,
        ego_tokens=ego_tokens,
        patch_grid=patch_grid,
        boxes=box_fn(last) if box_fn is not None else None)


@dataclass
class PrimitiveTrack:
    """A moving rectangle within one event."""
    kind: str
    start: tuple[float, float]  # (row, col) center at event onset
    velocity: tuple[float, float]  # cells per second
    extent: tuple[int, int]
    intensity: float


@dataclass
class Event:
    onset: float
    duration: float = 1.0
    primitives: list[PrimitiveTrack] = dc_field(default_factory=list)


def synth_video(seed: int, duration_s: float, events: Sequence[Event],
                side: int = FIELD_SIDE) -> list[SyntheticFrame]:
    """Deterministic 8 FPS stream: static seeded background plus event bumps.

    Events must start at least one second apart so their activity windows
    never overlap and ground-truth turn boundaries stay unambiguous.
    """
    ordered = sorted(events, key=lambda e: e.onset)
    for prev, nxt in zip(ordered, ordered[1:]):
        if nxt.onset - prev.onset < 1.0 - 1e-9:
            raise GenerationError(
                f"events at t={prev.onset} and t={nxt.onset} are under 1 s apart")
    coarse = rng.generator(seed, _KEY_BACKGROUND).uniform(-0.15, 0.15, size=(side // 4, side // 4))
    background = np.kron(coarse, np.ones((4, 4)))
    n_frames = int(round(duration_s * FPS))
    frames = []
    for i in range(n_frames):
        t = i * TICK
        field = background.copy()
        spec: list[ScenePrimitive] = []
        for ev in ordered:
            if not (ev.onset <= t < ev.onset + ev.duration):
                continue
            dt = t - ev.onset
            for track in ev.primitives:
                center = (track.start[0] + track.velocity[0] * dt,
                          track.start[1] + track.velocity[1] * dt)
                r0, c0, r1, c1 = primitive_bounds(center, track.extent, side)
                field[r0:r1 + 1, c0:c1 + 1] += track.intensity
                spec.append(ScenePrimitive(
                    kind=track.kind,
                    center=((r0 + r1) / 2.0, (c0 + c1) / 2.0),
                    extent=track.extent,
                    intensity=track.intensity))
        frames.append(SyntheticFrame(timestamp=t, field=field, scene_spec=spec))
    return frames


def save_stream(path: str | Path, frames: Sequence[SyntheticFrame]) -> None:
    """One frame per JSON line: {t, field row-major, scene}."""
    lines = []
    for f in frames:
        record = {
            "t": f.timestamp,
            "field": np.asarray(f.field, dtype=np.float64).reshape(-1).tolist(),
            "scene": [{"kind": p.kind, "center": list(p.center),
                       "extent": list(p.extent), "intensity": p.intensity}
                      for p in f.scene_spec],
        }
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_stream(path: str | Path, side: int = FIELD_SIDE) -> list[SyntheticFrame]:
    frames = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON in stream file: {e}", line=lineno) from e
        for key in ("t", "field"):
            if key not in record:
                raise ParseError(f"stream record missing field {key!r}", line=lineno)
        values = np.asarray(record["field"], dtype=np.float64)
        if values.size != side * side:
            raise ParseError(
                f"field holds {values.size} cells, expected {side * side}", line=lineno)
        spec = [ScenePrimitive(kind=s["kind"], center=tuple(s["center"]),
                               extent=tuple(s["extent"]), intensity=s["intensity"])
                for s in record.get("scene", [])]
        frames.append(SyntheticFrame(timestamp=record["t"],
                                     field=values.reshape(side, side),
                                     scene_spec=spec))
    return frames
