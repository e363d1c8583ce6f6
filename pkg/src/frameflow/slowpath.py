"""Training-free keyframe augmentation: grid, box, and template assembly.

When a frame is judged worth answering, its retained full patch grid is
re-pooled at finer granularity (four quadrant sub-frames of 3x3 tokens, or a
single 6x6 layout for the ablation), interaction regions are pooled into
up to three box tokens, and everything is stitched into a fixed prompt-like
element block that replaces the bare respond trigger. No parameters are
involved anywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .encoders import FIELD_SIDE, SyntheticFrame, primitive_bounds
from .errors import BoxError, ShapeError, TemplateError
from .sequence import Vocab

BOX_KIND_ORDER = ("hand_left", "hand_right", "object")
_KEY_JITTER = 601


@dataclass(frozen=True)
class Box:
    """Inclusive patch-coordinate rectangle tied to an interaction kind."""
    kind: str
    r0: int
    c0: int
    r1: int
    c1: int

    def __post_init__(self):
        if self.kind not in BOX_KIND_ORDER:
            raise BoxError(f"unknown box kind {self.kind!r}")
        for lo, hi in ((self.r0, self.r1), (self.c0, self.c1)):
            if not (0 <= lo <= hi < FIELD_SIDE):
                raise BoxError(
                    f"box ({self.r0}, {self.c0}, {self.r1}, {self.c1}) does not "
                    f"fit a {FIELD_SIDE}x{FIELD_SIDE} patch grid")


def boxes_from_json(records: list[dict]) -> list[Box]:
    boxes = []
    for rec in records:
        try:
            boxes.append(Box(kind=rec["kind"], r0=int(rec["r0"]), c0=int(rec["c0"]),
                             r1=int(rec["r1"]), c1=int(rec["c1"])))
        except KeyError as e:
            raise BoxError(f"box record missing field {e.args[0]!r}") from e
    return boxes


@dataclass
class GridTokens:
    """Four 3x3 sub-frames in reading order: TL, TR, BL, BR."""
    sub_frames: list[np.ndarray]

    @property
    def all_tokens(self) -> np.ndarray:
        return np.concatenate(self.sub_frames, axis=0)


@dataclass
class BoxTokens:
    tokens: np.ndarray  # (3, width), rows follow BOX_KIND_ORDER
    sources: list[str]  # per row: "box" or "fallback"


def _as_grid3d(patch_grid: np.ndarray) -> np.ndarray:
    a = np.asarray(patch_grid, dtype=np.float64)
    if a.ndim == 2 and a.shape[0] == FIELD_SIDE * FIELD_SIDE:
        return a.reshape(FIELD_SIDE, FIELD_SIDE, a.shape[1])
    if a.ndim == 3 and a.shape[0] == a.shape[1] == FIELD_SIDE:
        return a
    raise ShapeError(
        f"patch grid must be ({FIELD_SIDE}, {FIELD_SIDE}, width) or "
        f"({FIELD_SIDE * FIELD_SIDE}, width), got {a.shape}")


def _pool_blocks(region: np.ndarray, block: int) -> np.ndarray:
    """Mean over non-overlapping block x block tiles, flattened row-major."""
    h, w, d = region.shape
    tiled = region.reshape(h // block, block, w // block, block, d)
    return tiled.mean(axis=(1, 3)).reshape(-1, d)


def make_grid_tokens(patch_grid: np.ndarray) -> GridTokens:
    """Quadrant-wise 3x3 pooling of the keyframe's full patch grid."""
    grid = _as_grid3d(patch_grid)
    half = FIELD_SIDE // 2
    subs = []
    for qr in (0, half):
        for qc in (0, half):
            subs.append(_pool_blocks(grid[qr:qr + half, qc:qc + half], half // 3))
    return GridTokens(sub_frames=subs)


def make_fine_grained_tokens(patch_grid: np.ndarray) -> np.ndarray:
    """Single 6x6 pooling over the whole grid; ablation layout, no separators."""
    grid = _as_grid3d(patch_grid)
    return _pool_blocks(grid, FIELD_SIDE // 6)


def make_box_tokens(patch_grid: np.ndarray, boxes: list[Box]) -> BoxTokens:
    """One token per interaction kind; absent kinds take the global mean."""
    grid = _as_grid3d(patch_grid)
    if len(boxes) > len(BOX_KIND_ORDER):
        raise BoxError(f"at most {len(BOX_KIND_ORDER)} boxes per frame, got {len(boxes)}")
    by_kind: dict[str, Box] = {}
    for box in boxes:
        if box.kind in by_kind:
            raise BoxError(f"duplicate box kind {box.kind!r}")
        by_kind[box.kind] = box
    fallback = grid.reshape(-1, grid.shape[-1]).mean(axis=0)
    tokens = []
    sources = []
    for kind in BOX_KIND_ORDER:
        box = by_kind.get(kind)
        if box is None:
            tokens.append(fallback)
            sources.append("fallback")
        else:
            patch = grid[box.r0:box.r1 + 1, box.c0:box.c1 + 1]
            tokens.append(patch.reshape(-1, grid.shape[-1]).mean(axis=0))
            sources.append("box")
    return BoxTokens(tokens=np.stack(tokens), sources=sources)


def detect_boxes_synthetic(frame: SyntheticFrame, jitter: bool = False,
                           seed: int = 0) -> list[Box]:
    """Oracle detector: boxes come straight from the frame's scene record.

    The first primitive of each interaction kind wins. Jitter mode shifts
    every edge by a seeded offset in {-1, 0, 1}, clamped back into the grid,
    keyed on the frame's tick so replays agree.
    """
    found: dict[str, Box] = {}
    tick = int(round(frame.timestamp * 8))
    for prim in frame.scene_spec:
        if prim.kind not in BOX_KIND_ORDER or prim.kind in found:
            continue
        r0, c0, r1, c1 = primitive_bounds(prim.center, prim.extent)
        if jitter:
            slot = BOX_KIND_ORDER.index(prim.kind)
            d = rng.generator(seed, _KEY_JITTER, tick, slot).integers(-1, 2, size=4)
            r0 = int(np.clip(r0 + d[0], 0, FIELD_SIDE - 1))
            c0 = int(np.clip(c0 + d[1], 0, FIELD_SIDE - 1))
            r1 = int(np.clip(r1 + d[2], 0, FIELD_SIDE - 1))
            c1 = int(np.clip(c1 + d[3], 0, FIELD_SIDE - 1))
            r0, r1 = min(r0, r1), max(r0, r1)
            c0, c1 = min(c0, c1), max(c0, c1)
        found[prim.kind] = Box(prim.kind, r0, c0, r1, c1)
    return [found[k] for k in BOX_KIND_ORDER if k in found]


def assemble_thinking_template(frame_tokens: np.ndarray,
                               grid: "GridTokens | np.ndarray | None",
                               box: BoxTokens | None, vocab: Vocab) -> list[tuple]:
    """Element block emitted after a respond decision, trigger included.

    Returns ("token", id) and ("visual", array) pairs in episode order:
    stream tag, the frame's ten tokens again, the pooled grid (four separated
    sub-frames, or one unseparated run when given the fine-grained ablation's
    plain token array), the user focus phrase, the three box tokens, and the
    respond trigger. Each visual run is its own drop group when fed to a
    sequence builder.
    """
    if grid is None or box is None:
        raise TemplateError("template assembly needs both grid and box tokens")
    frame_tokens = np.asarray(frame_tokens, dtype=np.float64)
    if frame_tokens.ndim != 2 or frame_tokens.shape[0] != 10:
        raise TemplateError(
            f"template expects the frame's 10 tokens, got shape {frame_tokens.shape}")
    elements: list[tuple] = [("token", vocab.stream_tag), ("visual", frame_tokens)]
    if isinstance(grid, GridTokens):
        for sub in grid.sub_frames:
            elements.append(("visual", sub))
            elements.append(("token", vocab.frame_sep))
    else:
        elements.append(("visual", np.asarray(grid, dtype=np.float64)))
    elements.append(("token", vocab.user_tag))
    elements.append(("token", vocab.focus_phrase))
    elements.append(("visual", box.tokens))
    elements.append(("token", vocab.respond))
    return elements
