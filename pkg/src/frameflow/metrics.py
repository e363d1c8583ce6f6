"""Evaluation: perplexity, correctness, fluency, and response timing.

All language-side metrics are teacher-forced: one plain-numpy pass over the
ground-truth episode yields next-token logits, and each metric reads the
positions it supervises. Timing compares the live engine's respond decisions
against the expected response times by greedy nearest-in-time matching.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import StreamSample
from .dropping import flops_estimate
from .engine import DialogueEngine, EngineSettings, build_training_episode
from .errors import MetricError
from .model import ToyLM
from .sequence import InterleavedSequence, Vocab


@dataclass
class MetricsSettings:
    include_corrupted: bool = False  # count corrupted turns in correctness
    lm_only_ppl: bool = False  # restrict perplexity to language positions


def episode_logits(model: ToyLM, seq: InterleavedSequence,
                   bundles: list) -> np.ndarray:
    """Teacher-forced logits for every position, tape-free."""
    cache = model.start_episode(seq.drop_salt)
    return cache.extend(list(seq.segments), bundles)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shift = z - z.max(axis=1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))


def excluded_positions(info: dict, settings: MetricsSettings) -> frozenset[int]:
    """Language positions belonging to corrupted turns, when excluded."""
    if settings.include_corrupted:
        return frozenset()
    out: set[int] = set()
    for positions, corrupted in zip(info["turn_lm_positions"],
                                    info["turn_corrupted"]):
        if corrupted:
            out.update(int(p) for p in positions)
    return frozenset(out)


def supervised_nll(logits: np.ndarray, seq: InterleavedSequence,
                   lm_only: bool = False) -> np.ndarray:
    """Per-position negative log-likelihood at the supervised positions."""
    if lm_only:
        mask = seq.lm_mask
        targets = seq.lm_targets
    else:
        mask = seq.stream_mask | seq.lm_mask
        targets = np.where(seq.stream_mask, seq.stream_targets, seq.lm_targets)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise MetricError("perplexity undefined: no supervised positions")
    lp = _log_softmax_rows(logits[idx])
    return -lp[np.arange(idx.size), targets[idx]]


def lm_ppl(logits: np.ndarray, seq: InterleavedSequence,
           lm_only: bool = False) -> float:
    return float(np.exp(supervised_nll(logits, seq, lm_only).mean()))


def _stream_counts(logits: np.ndarray, seq: InterleavedSequence,
                   vocab: Vocab) -> tuple[int, int]:
    """Two-way silence/respond determinations that match the target."""
    idx = np.flatnonzero(seq.stream_mask)
    gaps = logits[idx, vocab.respond] - logits[idx, vocab.silence]
    want_respond = seq.stream_targets[idx] == vocab.respond
    return int(((gaps > 0) == want_respond).sum()), int(idx.size)


def _text_counts(logits: np.ndarray, seq: InterleavedSequence,
                 exclude: frozenset[int] = frozenset()) -> tuple[int, int]:
    """Greedy next-token matches at text-targeted language positions."""
    idx = [int(p) for p in np.flatnonzero(seq.lm_mask & seq.lm_is_text)
           if int(p) not in exclude]
    if not idx:
        return 0, 0
    pred = logits[idx].argmax(axis=1)
    return int((pred == seq.lm_targets[idx]).sum()), len(idx)


def determination_accuracy(logits: np.ndarray, seq: InterleavedSequence,
                           vocab: Vocab) -> float:
    hit, n = _stream_counts(logits, seq, vocab)
    if n == 0:
        raise MetricError("determination accuracy undefined: no stream positions")
    return hit / n


def lm_correctness(logits: np.ndarray, seq: InterleavedSequence,
                   exclude: frozenset[int] = frozenset()) -> float:
    hit, n = _text_counts(logits, seq, exclude)
    if n == 0:
        raise MetricError("correctness undefined: no counted text positions")
    return hit / n


def fluency(logits: np.ndarray, seq: InterleavedSequence, vocab: Vocab,
            exclude: frozenset[int] = frozenset()) -> float:
    """Match fraction over streaming decisions and response text jointly."""
    s_hit, s_n = _stream_counts(logits, seq, vocab)
    t_hit, t_n = _text_counts(logits, seq, exclude)
    if s_n + t_n == 0:
        raise MetricError("fluency undefined: nothing supervised")
    return (s_hit + t_hit) / (s_n + t_n)


def match_respond_times(pred: list[float], expected: list[float],
                        stream_end: float) -> list[float]:
    """Greedy nearest-in-time matching; one absolute gap per expected time.

    Each predicted respond may serve at most one expected response and vice
    versa; closest pairs bind first. An expected response nobody answered
    scores its distance to the end of the stream, as the latest moment an
    answer could still have arrived.
    """
    gaps = sorted((abs(p - t), t, p) for t in expected for p in pred)
    used_p: set[float] = set()
    matched: dict[float, float] = {}
    for gap, t, p in gaps:
        if t in matched or p in used_p:
            continue
        matched[t] = gap
        used_p.add(p)
    return [matched.get(t, stream_end - t) for t in expected]


def time_diff(pred: list[float], expected: list[float],
              stream_end: float) -> tuple[float, bool]:
    """(mean gap, empty flag); 0.0 with a warning when nothing was expected."""
    if not expected:
        return 0.0, True
    gaps = match_respond_times(pred, expected, stream_end)
    return float(np.mean(gaps)), False


# ---------------- whole-corpus evaluation ----------------

@dataclass
class EvalReport:
    n_episodes: int
    lm_ppl: float
    lm_correctness: float
    determination_accuracy: float
    fluency: float
    time_diff: float
    n_expected_responses: int
    n_live_responses: int
    episodes_without_responses: int
    flops_total: int
    flops_per_layer: list[dict]
    config_hash: str
    seed: int
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lm_ppl", "lm_correctness", "determination_accuracy",
                     "fluency", "time_diff"):
            if not np.isfinite(getattr(self, name)):
                raise MetricError(f"{name}={getattr(self, name)} is not finite")
        for name in ("lm_correctness", "determination_accuracy", "fluency"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")
        if self.lm_ppl < 1.0:
            raise MetricError(f"perplexity {self.lm_ppl} below 1")
        if self.time_diff < 0.0:
            raise MetricError(f"mean time gap {self.time_diff} negative")

    def to_json(self) -> dict:
        return {"n_episodes": self.n_episodes, "lm_ppl": self.lm_ppl,
                "lm_correctness": self.lm_correctness,
                "determination_accuracy": self.determination_accuracy,
                "fluency": self.fluency, "time_diff": self.time_diff,
                "n_expected_responses": self.n_expected_responses,
                "n_live_responses": self.n_live_responses,
                "episodes_without_responses": self.episodes_without_responses,
                "flops_total": self.flops_total,
                "flops_per_layer": self.flops_per_layer,
                "config_hash": self.config_hash, "seed": self.seed,
                "extras": self.extras}


def evaluate_model(model: ToyLM, samples: list[StreamSample],
                   general, ego, engine_settings: EngineSettings | None = None,
                   metrics: MetricsSettings | None = None,
                   config_hash: str = "", seed: int = 0,
                   extras: dict | None = None) -> EvalReport:
    """Pooled metrics over a corpus: counts add up across episodes, so long
    episodes weigh more than short ones."""
    if not samples:
        raise MetricError("evaluation needs at least one episode")
    metrics = metrics or MetricsSettings()
    engine_settings = engine_settings or EngineSettings()
    engine = DialogueEngine(model, general, ego, engine_settings)
    nll_sum, nll_n = 0.0, 0
    s_hit = s_n = t_hit = t_n = 0
    gap_sum, gap_n = 0.0, 0
    n_live = 0
    empty = 0
    flops = None
    for sample in samples:
        seq, bundles, info = build_training_episode(
            sample, model, general, ego, engine_settings)
        logits = episode_logits(model, seq, bundles)
        exclude = excluded_positions(info, metrics)
        nll = supervised_nll(logits, seq, lm_only=metrics.lm_only_ppl)
        nll_sum += float(nll.sum())
        nll_n += int(nll.size)
        hit, n = _stream_counts(logits, seq, model.vocab)
        s_hit, s_n = s_hit + hit, s_n + n
        hit, n = _text_counts(logits, seq, exclude)
        t_hit, t_n = t_hit + hit, t_n + n
        if flops is None:
            breakdown = flops_estimate(model.n_layers, model.d_model,
                                       model.d_ff, seq.visual, seq.group_ids,
                                       model.router.beta, model.router.policy)
            flops = breakdown
        queries = [(t.query_time, t.query_tokens) for t in sample.turns
                   if t.query_time is not None]
        result, _ = engine.run_stream(sample.frames, queries=queries,
                                      drop_salt=sample.episode_id)
        pred = [d.t for d in result.decisions if d.decision == "respond"]
        n_live += len(pred)
        expected = sorted(sample.respond_times())
        if not expected:
            empty += 1
        else:
            gaps = match_respond_times(pred, expected, sample.duration_s)
            gap_sum += float(sum(gaps))
            gap_n += len(gaps)
    if nll_n == 0 or s_n == 0:
        raise MetricError("corpus carries no supervision to evaluate")
    return EvalReport(
        n_episodes=len(samples),
        lm_ppl=float(np.exp(nll_sum / nll_n)),
        lm_correctness=(t_hit / t_n) if t_n else 0.0,
        determination_accuracy=s_hit / s_n,
        fluency=(s_hit + t_hit) / (s_n + t_n),
        time_diff=(gap_sum / gap_n) if gap_n else 0.0,
        n_expected_responses=gap_n,
        n_live_responses=n_live,
        episodes_without_responses=empty,
        flops_total=flops.total,
        flops_per_layer=flops.per_layer,
        config_hash=config_hash,
        seed=seed,
        extras=extras or {})


def reports_to_csv(reports: list[EvalReport]) -> str:
    """Flat CSV for sweep comparisons, one row per report."""
    if not reports:
        raise MetricError("no reports to tabulate")
    base = ["n_episodes", "lm_ppl", "lm_correctness", "determination_accuracy",
            "fluency", "time_diff", "n_expected_responses", "n_live_responses",
            "flops_total", "config_hash", "seed"]
    extra_keys = sorted({k for r in reports for k in r.extras})
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(base + extra_keys)
    for r in reports:
        row = [getattr(r, k) for k in base]
        row += [r.extras.get(k, "") for k in extra_keys]
        writer.writerow(row)
    return out.getvalue()


def save_report(path, report: EvalReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, sort_keys=True, indent=2)
        fh.write("\n")
