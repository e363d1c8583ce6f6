"""Synthetic dialogue corpora: event-driven streams with exact ground truth.

An episode is an 8 FPS synthetic stream plus a turn list. Each planted scene
event carries a fixed narration (token ids keyed to the event kind), expected
at the first half-second decision boundary after its onset; optional user
queries expect a kind-specific answer at the boundary after the query. Saved
datasets store the generation recipe, not the pixels: frames rebuild bit
identically from the per-episode stream seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .encoders import Event, PrimitiveTrack, SyntheticFrame, synth_video
from .errors import ConfigError, GenerationError, ParseError
from .sequence import Vocab

_KEY_EVENTS = 701
_KEY_QUERIES = 702
_KEY_CORRUPT = 703
_KEY_JITTER = 704
_KEY_DROP = 705

BOUNDARY_S = 0.5  # one determination per half second of stream


@dataclass(frozen=True)
class EventKind:
    name: str
    narration: tuple[int, ...]
    question: tuple[int, ...]
    primitives: tuple[tuple[str, tuple[int, int], float, tuple[float, float]], ...]
    # each primitive: (kind, extent, intensity, velocity)


EVENT_KINDS: dict[str, EventKind] = {
    "reach": EventKind(
        name="reach", narration=(1, 2, 3), question=(20, 13),
        primitives=(("hand_left", (3, 3), 0.6, (0.0, 2.0)),
                    ("object", (4, 4), 0.9, (0.0, 0.0)))),
    "grasp": EventKind(
        name="grasp", narration=(4, 5, 6, 7), question=(21, 13),
        primitives=(("hand_right", (3, 3), 0.7, (0.0, -2.0)),
                    ("object", (4, 4), 1.1, (0.0, 0.0)))),
    "lift": EventKind(
        name="lift", narration=(8, 9), question=(22, 13),
        primitives=(("hand_left", (3, 3), 0.8, (-2.0, 0.0)),
                    ("hand_right", (3, 3), 0.8, (-2.0, 0.0)),
                    ("object", (4, 4), 1.4, (-2.0, 0.0)))),
    "wave": EventKind(
        name="wave", narration=(10, 11, 12), question=(23, 13),
        primitives=(("hand_right", (3, 3), 0.5, (0.0, 3.0)),)),
}


@dataclass
class DialogueTurn:
    """Ground truth for one expected assistant response."""
    response_tokens: list[int]
    response_time: float
    query_tokens: list[int] = field(default_factory=list)
    query_time: float | None = None
    corrupted: bool = False

    def to_json(self) -> dict:
        return {"response_tokens": self.response_tokens,
                "response_time": self.response_time,
                "query_tokens": self.query_tokens,
                "query_time": self.query_time,
                "corrupted": self.corrupted}

    @classmethod
    def from_json(cls, rec: dict) -> "DialogueTurn":
        return cls(response_tokens=list(rec["response_tokens"]),
                   response_time=float(rec["response_time"]),
                   query_tokens=list(rec.get("query_tokens", [])),
                   query_time=rec.get("query_time"),
                   corrupted=bool(rec.get("corrupted", False)))


@dataclass
class StreamSample:
    episode_id: int
    stream_seed: int
    duration_s: float
    events: list[Event]
    turns: list[DialogueTurn]
    frames: list[SyntheticFrame]

    def respond_times(self) -> set[float]:
        return {t.response_time for t in self.turns}


@dataclass
class DataSettings:
    duration_s: float = 10.0
    events_per_episode: int = 2
    queries_per_episode: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.duration_s < 1.0:
            raise ConfigError(f"episode duration {self.duration_s} is under 1 s")
        if self.events_per_episode < 0 or self.queries_per_episode < 0:
            raise ConfigError("event and query counts cannot be negative")


def next_boundary(t: float) -> float:
    """First half-second decision boundary strictly after time t."""
    return (np.floor(t / BOUNDARY_S + 1e-9) + 1.0) * BOUNDARY_S


def _plan_events(gen, settings: DataSettings) -> list[tuple[float, EventKind]]:
    n = settings.events_per_episode
    if n == 0:
        return []
    # integer-second onsets keep the >= 1 s spacing the stream generator needs
    last_slot = int(np.floor(settings.duration_s - 1.0 + 1e-9)) - 1
    slots = np.arange(0, last_slot + 1)
    if n > slots.size:
        raise GenerationError(
            f"{n} events do not fit in {settings.duration_s} s at 1 s spacing")
    onsets = np.sort(gen.choice(slots, size=n, replace=False)).astype(np.float64)
    kinds = list(EVENT_KINDS.values())
    picks = gen.integers(0, len(kinds), size=n)
    return [(float(t), kinds[int(k)]) for t, k in zip(onsets, picks)]


def _materialize_event(gen, onset: float, kind: EventKind) -> Event:
    tracks = []
    for prim_kind, extent, intensity, velocity in kind.primitives:
        start = (float(gen.uniform(4.0, 20.0)), float(gen.uniform(4.0, 20.0)))
        tracks.append(PrimitiveTrack(kind=prim_kind, start=start,
                                     velocity=velocity, extent=extent,
                                     intensity=intensity))
    return Event(onset=onset, duration=1.0, primitives=tracks)


def generate_episode(settings: DataSettings, seed: int,
                     episode_id: int) -> StreamSample:
    gen = rng.generator(seed, _KEY_EVENTS, episode_id)
    planned = _plan_events(gen, settings)
    events = [_materialize_event(gen, onset, kind) for onset, kind in planned]
    turns = [DialogueTurn(response_tokens=list(kind.narration),
                          response_time=next_boundary(onset))
             for onset, kind in planned]

    taken = {t.response_time for t in turns}
    qgen = rng.generator(seed, _KEY_QUERIES, episode_id)
    for _ in range(settings.queries_per_episode):
        kind = list(EVENT_KINDS.values())[int(qgen.integers(0, len(EVENT_KINDS)))]
        placed = False
        for _ in range(64):  # find a free decision boundary, deterministically
            tick = int(qgen.integers(0, int(settings.duration_s * 8) - 8))
            q_time = tick / 8.0
            r_time = next_boundary(q_time)
            if r_time <= settings.duration_s - 1e-9 and r_time not in taken:
                taken.add(r_time)
                turns.append(DialogueTurn(
                    response_tokens=list(kind.narration),
                    response_time=r_time,
                    query_tokens=list(kind.question), query_time=q_time))
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place {settings.queries_per_episode} queries in "
                f"{settings.duration_s} s episode {episode_id}")
    turns.sort(key=lambda t: t.response_time)

    stream_seed = rng.derive_key(seed, _KEY_EVENTS, episode_id, 0xF)
    frames = synth_video(stream_seed, settings.duration_s, events)
    return StreamSample(episode_id=episode_id, stream_seed=stream_seed,
                        duration_s=settings.duration_s, events=events,
                        turns=turns, frames=frames)


def generate_dataset(settings: DataSettings, n_episodes: int,
                     seed: int | None = None) -> list[StreamSample]:
    seed = settings.seed if seed is None else seed
    return [generate_episode(settings, seed, i) for i in range(n_episodes)]


# ---------------- augmentation ----------------

STRATEGIES = ("corrupt_message", "temporal_jitter", "drop_message")


def _clone(sample: StreamSample) -> StreamSample:
    return StreamSample(
        episode_id=sample.episode_id, stream_seed=sample.stream_seed,
        duration_s=sample.duration_s, events=list(sample.events),
        turns=[DialogueTurn(**t.to_json()) for t in sample.turns],
        frames=list(sample.frames))


def augment_dialogue(sample: StreamSample, strategy: str, seed: int,
                     vocab: Vocab) -> StreamSample:
    """Deterministic robustness perturbation of one episode.

    corrupt_message rewrites one turn's tokens (marked, frames untouched);
    temporal_jitter duplicates one 4-frame group, shifting later ground truth
    by the half-second it adds; drop_message removes one turn outright.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown augmentation strategy {strategy!r}")
    out = _clone(sample)
    if not out.turns and strategy != "temporal_jitter":
        return out

    if strategy == "corrupt_message":
        gen = rng.generator(seed, _KEY_CORRUPT, sample.episode_id)
        i = int(gen.integers(0, len(out.turns)))
        turn = out.turns[i]
        wrong = gen.integers(0, vocab.n_text, size=len(turn.response_tokens))
        if list(wrong) == list(turn.response_tokens):
            wrong = (wrong + 1) % vocab.n_text
        turn.response_tokens = [int(t) for t in wrong]
        turn.corrupted = True
        return out

    if strategy == "drop_message":
        gen = rng.generator(seed, _KEY_DROP, sample.episode_id)
        i = int(gen.integers(0, len(out.turns)))
        del out.turns[i]
        return out

    # temporal jitter: replay one frame group, re-tick timestamps uniformly
    gen = rng.generator(seed, _KEY_JITTER, sample.episode_id)
    n_groups = len(out.frames) // 4
    g = int(gen.integers(0, n_groups))
    cut = 4 * (g + 1)
    inserted = [SyntheticFrame(timestamp=0.0, field=f.field.copy(),
                               scene_spec=list(f.scene_spec))
                for f in out.frames[cut - 4:cut]]
    frames = out.frames[:cut] + inserted + out.frames[cut:]
    out.frames = [SyntheticFrame(timestamp=i / 8.0, field=f.field,
                                 scene_spec=f.scene_spec)
                  for i, f in enumerate(frames)]
    shift_from = cut / 8.0
    for turn in out.turns:
        if turn.response_time > shift_from + 1e-9:
            turn.response_time += 0.5
        if turn.query_time is not None and turn.query_time >= shift_from - 1e-9:
            turn.query_time += 0.5
    out.duration_s += 0.5
    return out


# ---------------- persistence ----------------

def _event_to_json(ev: Event) -> dict:
    return {"onset": ev.onset, "duration": ev.duration,
            "primitives": [{"kind": p.kind, "start": list(p.start),
                            "velocity": list(p.velocity),
                            "extent": list(p.extent), "intensity": p.intensity}
                           for p in ev.primitives]}


def _event_from_json(rec: dict) -> Event:
    return Event(onset=rec["onset"], duration=rec["duration"],
                 primitives=[PrimitiveTrack(kind=p["kind"],
                                            start=tuple(p["start"]),
                                            velocity=tuple(p["velocity"]),
                                            extent=tuple(p["extent"]),
                                            intensity=p["intensity"])
                             for p in rec["primitives"]])


def save_dataset(path: str | Path, samples: list[StreamSample],
                 manifest_extra: dict | None = None) -> None:
    """Recipe JSONL: manifest line first, then one episode per line."""
    manifest = {"kind": "manifest", "n_episodes": len(samples)}
    manifest.update(manifest_extra or {})
    lines = [json.dumps(manifest, sort_keys=True, separators=(",", ":"))]
    for s in samples:
        rec = {"episode_id": s.episode_id, "stream_seed": s.stream_seed,
               "duration_s": s.duration_s,
               "events": [_event_to_json(e) for e in s.events],
               "turns": [t.to_json() for t in s.turns]}
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> tuple[list[StreamSample], dict]:
    """Rebuilds every episode's frames from its stored recipe."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise ParseError("dataset file is empty", line=1)
    try:
        manifest = json.loads(text[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in manifest: {e}", line=1) from e
    if manifest.get("kind") != "manifest":
        raise ParseError("first line must be the dataset manifest", line=1)
    samples = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON in episode record: {e}",
                             line=lineno) from e
        for key in ("episode_id", "stream_seed", "duration_s", "events", "turns"):
            if key not in rec:
                raise ParseError(f"episode record missing field {key!r}",
                                 line=lineno)
        events = [_event_from_json(e) for e in rec["events"]]
        frames = synth_video(rec["stream_seed"], rec["duration_s"], events)
        samples.append(StreamSample(
            episode_id=rec["episode_id"], stream_seed=rec["stream_seed"],
            duration_s=rec["duration_s"], events=events,
            turns=[DialogueTurn.from_json(t) for t in rec["turns"]],
            frames=frames))
    if len(samples) != manifest["n_episodes"]:
        raise ParseError(
            f"manifest promises {manifest['n_episodes']} episodes, "
            f"file holds {len(samples)}", line=1)
    return samples, manifest
