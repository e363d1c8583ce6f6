"""Metric oracles: every number here is derivable by hand counting."""

import math

import numpy as np
import pytest

from frameflow.data import DataSettings, generate_dataset
from frameflow.encoders import EgocentricEncoder, GeneralEncoder
from frameflow.engine import EngineSettings, build_training_episode
from frameflow.errors import MetricError
from frameflow.metrics import (EvalReport, MetricsSettings, episode_logits,
                               determination_accuracy, evaluate_model,
                               excluded_positions, fluency, lm_correctness,
                               lm_ppl, match_respond_times, reports_to_csv,
                               supervised_nll, time_diff)
from frameflow.model import streaming_lm_loss
from frameflow.sequence import SequenceBuilder, Vocab
from frameflow.tensor import parameter
from test_model import _model

ENC = 16


# ---------------- perplexity ----------------

def test_uniform_logits_give_vocab_size_perplexity():
    v = Vocab(8)
    b = SequenceBuilder(v)
    b.add_frame_sep(v.silence)
    b.add_token(v.respond, kind="respond_trigger")
    b.add_response([0])
    seq = b.build()
    logits = np.zeros((len(seq), 8))
    assert lm_ppl(logits, seq) == pytest.approx(8.0, rel=1e-12)
    assert lm_ppl(logits, seq, lm_only=True) == pytest.approx(8.0, rel=1e-12)


def test_perplexity_agrees_with_the_training_loss():
    # exp of the combined loss rescaled from per-row to per-supervised-position
    v = Vocab(32)
    gen = np.random.Generator(np.random.Philox(key=3))
    b = SequenceBuilder(v)
    b.add_frame_sep(v.silence)
    b.add_frame_sep(v.respond)
    b.add_token(v.respond, kind="respond_trigger")
    b.add_response([4, 2, 7])
    seq = b.build()
    logits = gen.normal(size=(len(seq), 32))
    total, parts = streaming_lm_loss(parameter(logits.copy()), seq,
                                     stream_weight=1.0)
    n_sup = parts["n_stream"] + parts["n_lm"]
    expected = math.exp(total.item() * len(seq) / n_sup)
    assert lm_ppl(logits, seq) == pytest.approx(expected, rel=1e-9)


def test_lm_only_perplexity_ignores_streaming_positions():
    v = Vocab(32)
    b = SequenceBuilder(v)
    b.add_frame_sep(v.silence)
    b.add_token(v.respond, kind="respond_trigger")
    b.add_response([4])
    seq = b.build()
    logits = np.zeros((len(seq), 32))
    logits[np.flatnonzero(seq.stream_mask), v.silence] = 50.0  # free stream wins
    assert lm_ppl(logits, seq, lm_only=True) == pytest.approx(32.0, rel=1e-12)
    assert lm_ppl(logits, seq) < 32.0


def test_perplexity_needs_supervision():
    v = Vocab(32)
    b = SequenceBuilder(v)
    b.add_token(3)
    seq = b.build()
    with pytest.raises(MetricError):
        supervised_nll(np.zeros((1, 32)), seq)


# ---------------- counting oracles ----------------

def _correctness_fixture():
    """10 supervised text tokens; logits make exactly 7 of them argmax-right."""
    v = Vocab(32)
    b = SequenceBuilder(v)
    b.add_token(v.respond, kind="respond_trigger")
    tokens = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3]
    b.add_response(tokens)
    seq = b.build()
    logits = np.zeros((len(seq), 32))
    text_pos = np.flatnonzero(seq.lm_mask & seq.lm_is_text)
    assert text_pos.size == 10
    for i, p in enumerate(text_pos):
        tgt = seq.lm_targets[p]
        logits[p, tgt if i < 7 else (tgt + 1) % v.n_text] = 5.0
    return logits, seq, v


def test_seven_of_ten_tokens_is_point_seven():
    logits, seq, _ = _correctness_fixture()
    assert lm_correctness(logits, seq) == pytest.approx(0.7)


def test_corrupted_turn_exclusion_changes_the_count():
    logits, seq, _ = _correctness_fixture()
    text_pos = [int(p) for p in np.flatnonzero(seq.lm_mask & seq.lm_is_text)]
    info = {"turn_lm_positions": [text_pos[:4], text_pos[4:]],
            "turn_corrupted": [True, False]}
    keep_all = excluded_positions(info, MetricsSettings(include_corrupted=True))
    assert keep_all == frozenset()
    drop = excluded_positions(info, MetricsSettings(include_corrupted=False))
    assert drop == frozenset(text_pos[:4])
    # first four were all argmax-correct, so the rate drops to 3/6
    assert lm_correctness(logits, seq, drop) == pytest.approx(0.5)


def _fluency_fixture():
    """20 streaming decisions (12 right) + 10 text tokens (6 right)."""
    v = Vocab(32)
    b = SequenceBuilder(v)
    targets = [v.silence, v.respond] * 10
    for t in targets:
        b.add_frame_sep(t)
    b.add_token(v.respond, kind="respond_trigger")
    b.add_response([3, 1, 4, 1, 5, 9, 2, 6, 5, 3])
    seq = b.build()
    logits = np.zeros((len(seq), 32))
    s_pos = np.flatnonzero(seq.stream_mask)
    for i, p in enumerate(s_pos):
        right = i < 12
        want = seq.stream_targets[p]
        pick = want if right else (v.respond if want == v.silence else v.silence)
        logits[p, pick] = 1.0
    t_pos = np.flatnonzero(seq.lm_mask & seq.lm_is_text)
    for i, p in enumerate(t_pos):
        tgt = seq.lm_targets[p]
        logits[p, tgt if i < 6 else (tgt + 1) % v.n_text] = 5.0
    return logits, seq, v


def test_fluency_pools_decisions_and_tokens():
    logits, seq, v = _fluency_fixture()
    assert determination_accuracy(logits, seq, v) == pytest.approx(12 / 20)
    assert lm_correctness(logits, seq) == pytest.approx(6 / 10)
    assert fluency(logits, seq, v) == pytest.approx(18 / 30)


def test_fluency_decomposes_by_position_counts():
    logits, seq, v = _fluency_fixture()
    s_n, t_n = 20, 10
    mix = (s_n * determination_accuracy(logits, seq, v)
           + t_n * lm_correctness(logits, seq)) / (s_n + t_n)
    assert fluency(logits, seq, v) == pytest.approx(mix, abs=1e-15)


def test_stream_determination_is_two_way_not_argmax():
    # a third token can dominate the row without spoiling the determination
    v = Vocab(32)
    b = SequenceBuilder(v)
    b.add_frame_sep(v.respond)
    seq = b.build()
    logits = np.zeros((1, 32))
    logits[0, v.turn_end] = 99.0
    logits[0, v.respond] = 2.0
    logits[0, v.silence] = 1.0
    assert determination_accuracy(logits, seq, v) == 1.0


# ---------------- response timing ----------------

def test_half_second_late_answer_scores_half_a_second():
    assert match_respond_times([3.5], [3.0], 10.0) == [0.5]
    assert time_diff([3.5], [3.0], 10.0) == (0.5, False)


def test_exact_answers_score_zero_and_extras_are_free():
    assert match_respond_times([1.0, 5.0], [1.0], 10.0) == [0.0]


def test_unanswered_response_scores_distance_to_stream_end():
    val, empty = time_diff([], [9.0], 10.0)
    assert val == pytest.approx(1.0)
    assert not empty


def test_each_prediction_serves_at_most_one_expectation():
    gaps = match_respond_times([2.0], [1.9, 2.1], 10.0)
    assert gaps[0] == pytest.approx(0.1)
    assert gaps[1] == pytest.approx(10.0 - 2.1)


def test_timing_is_translation_invariant():
    pred, true = [0.5, 4.0, 7.5], [1.0, 4.0]
    a, _ = time_diff(pred, true, 10.0)
    b, _ = time_diff([p + 100 for p in pred], [t + 100 for t in true], 110.0)
    assert a == pytest.approx(b, abs=1e-12)


def test_no_expected_responses_flags_a_warning():
    assert time_diff([1.0], [], 10.0) == (0.0, True)


# ---------------- report assembly ----------------

def _report_kwargs(**over):
    base = dict(n_episodes=1, lm_ppl=4.0, lm_correctness=0.5,
                determination_accuracy=0.5, fluency=0.5, time_diff=0.2,
                n_expected_responses=2, n_live_responses=2,
                episodes_without_responses=0, flops_total=100,
                flops_per_layer=[], config_hash="h", seed=0)
    base.update(over)
    return base


@pytest.mark.parametrize("bad", [
    {"fluency": 1.2}, {"lm_correctness": -0.1}, {"lm_ppl": 0.9},
    {"time_diff": -0.5},
])
def test_report_rejects_out_of_range_values(bad):
    with pytest.raises(MetricError):
        EvalReport(**_report_kwargs(**bad))


def _tiny_eval(seed=0):
    settings = DataSettings(duration_s=4.0, events_per_episode=1,
                            queries_per_episode=0, seed=seed)
    samples = generate_dataset(settings, n_episodes=2)
    v = Vocab(32)
    model = _model(v, seed=seed, n_layers=2)
    general = GeneralEncoder(width=ENC, seed=3)
    ego = EgocentricEncoder(width=ENC, seed=4)
    return model, samples, general, ego


def test_corpus_report_is_deterministic_and_tagged():
    model, samples, general, ego = _tiny_eval()
    kw = dict(config_hash="cfg123", seed=7, extras={"beta": 0.0})
    r1 = evaluate_model(model, samples, general, ego, **kw)
    r2 = evaluate_model(model, samples, general, ego, **kw)
    assert r1.to_json() == r2.to_json()
    assert r1.config_hash == "cfg123" and r1.seed == 7
    assert r1.n_episodes == 2
    assert r1.n_expected_responses == 2  # one event per episode
    assert r1.flops_total > 0 and len(r1.flops_per_layer) == model.n_layers
    assert 0.0 <= r1.fluency <= 1.0 and r1.lm_ppl >= 1.0


def test_corpus_perplexity_matches_a_manual_pass():
    model, samples, general, ego = _tiny_eval(seed=1)
    report = evaluate_model(model, samples, general, ego)
    nll_sum, n = 0.0, 0
    for sample in samples:
        seq, bundles, _ = build_training_episode(sample, model, general, ego,
                                                 EngineSettings())
        nll = supervised_nll(episode_logits(model, seq, bundles), seq)
        nll_sum += float(nll.sum())
        n += nll.size
    assert report.lm_ppl == pytest.approx(math.exp(nll_sum / n), rel=1e-12)


def test_csv_export_lists_every_report_and_extra():
    r1 = EvalReport(**_report_kwargs(extras={"beta": 0.2}))
    r2 = EvalReport(**_report_kwargs(extras={"beta": 0.5}))
    text = reports_to_csv([r1, r2])
    lines = text.strip().splitlines()
    assert len(lines) == 3
    assert lines[0].split(",")[-1] == "beta"
    assert lines[1].endswith("0.2") and lines[2].endswith("0.5")
    with pytest.raises(MetricError):
        reports_to_csv([])
