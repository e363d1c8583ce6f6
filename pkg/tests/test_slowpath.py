"""Keyframe augmentation: quadrant pooling, box pooling, template layout."""

import numpy as np
import pytest

from frameflow.checkpoint import parameter_checksum
from frameflow.encoders import Event, PrimitiveTrack, primitive_bounds, synth_video
from frameflow.errors import BoxError, ShapeError, TemplateError
from frameflow.sequence import Vocab
from frameflow.slowpath import (Box, BoxTokens, GridTokens,
                                assemble_thinking_template, boxes_from_json,
                                detect_boxes_synthetic, make_box_tokens,
                                make_fine_grained_tokens, make_grid_tokens)

from test_model import _episode, _model

WIDTH = 5


def _random_grid(seed=0, width=WIDTH):
    gen = np.random.Generator(np.random.Philox(key=seed))
    return gen.normal(size=(24, 24, width))


def _brute_block_mean(grid, r0, c0, size=4):
    acc = np.zeros(grid.shape[-1])
    for r in range(r0, r0 + size):
        for c in range(c0, c0 + size):
            acc += grid[r, c]
    return acc / (size * size)


# ---------------- grid tokens ----------------

def test_constant_grid_pools_to_identical_tokens():
    grid = np.ones((24, 24, WIDTH)) * 2.5
    out = make_grid_tokens(grid)
    assert isinstance(out, GridTokens)
    assert len(out.sub_frames) == 4
    stacked = out.all_tokens
    assert stacked.shape == (36, WIDTH)
    assert np.allclose(stacked, 2.5, atol=0)


def test_quadrant_constant_values_map_to_sub_frames_in_reading_order():
    grid = np.zeros((24, 24, 1))
    for value, (r, c) in zip([1.0, 2.0, 3.0, 4.0],
                             [(0, 0), (0, 12), (12, 0), (12, 12)]):
        grid[r:r + 12, c:c + 12] = value
    out = make_grid_tokens(grid)
    for value, sub in zip([1.0, 2.0, 3.0, 4.0], out.sub_frames):
        assert sub.shape == (9, 1)
        assert np.all(sub == value)


def test_grid_tokens_match_the_loop_oracle():
    grid = _random_grid(seed=3)
    out = make_grid_tokens(grid)
    # sub-frame order: top-left, top-right, bottom-left, bottom-right
    for q, (qr, qc) in enumerate([(0, 0), (0, 12), (12, 0), (12, 12)]):
        for i in range(3):
            for j in range(3):
                want = _brute_block_mean(grid, qr + 4 * i, qc + 4 * j)
                assert np.allclose(out.sub_frames[q][3 * i + j], want, atol=1e-12)


def test_fine_grained_tokens_match_the_loop_oracle():
    grid = _random_grid(seed=4)
    out = make_fine_grained_tokens(grid)
    assert out.shape == (36, WIDTH)
    for i in range(6):
        for j in range(6):
            want = _brute_block_mean(grid, 4 * i, 4 * j)
            assert np.allclose(out[6 * i + j], want, atol=1e-12)


def test_grid_and_fine_grained_pool_the_same_blocks_in_different_orders():
    grid = _random_grid(seed=5)
    a = np.array(sorted(make_grid_tokens(grid).all_tokens.tolist()))
    b = np.array(sorted(make_fine_grained_tokens(grid).tolist()))
    assert np.allclose(a, b, atol=1e-12)


def test_grid_token_mean_equals_full_patch_mean():
    grid = _random_grid(seed=6)
    tokens = make_grid_tokens(grid).all_tokens
    assert np.allclose(tokens.mean(axis=0), grid.reshape(-1, WIDTH).mean(axis=0),
                       atol=1e-12)


def test_flat_patch_grid_input_is_accepted():
    grid = _random_grid(seed=7)
    flat = grid.reshape(576, WIDTH)
    assert np.array_equal(make_grid_tokens(flat).all_tokens,
                          make_grid_tokens(grid).all_tokens)


@pytest.mark.parametrize("shape", [(20, 20, 3), (575, 3), (24, 23, 3), (24, 24)])
def test_wrong_grid_shape_rejected(shape):
    with pytest.raises(ShapeError):
        make_grid_tokens(np.zeros(shape))
    with pytest.raises(ShapeError):
        make_fine_grained_tokens(np.zeros(shape))


# ---------------- box tokens ----------------

def test_single_patch_box_returns_that_patch_exactly():
    grid = _random_grid(seed=8)
    out = make_box_tokens(grid, [Box("object", 5, 7, 5, 7)])
    assert out.tokens[2].tobytes() == grid[5, 7].tobytes()
    assert out.sources == ["fallback", "fallback", "box"]


def test_two_by_two_box_is_the_arithmetic_mean():
    grid = np.zeros((24, 24, 1))
    grid[0, 0] = 1.0
    grid[0, 1] = 2.0
    grid[1, 0] = 3.0
    grid[1, 1] = 4.0
    out = make_box_tokens(grid, [Box("hand_left", 0, 0, 1, 1)])
    assert out.tokens[0, 0] == pytest.approx(2.5, abs=1e-15)


def test_zero_boxes_fall_back_to_three_global_means():
    grid = _random_grid(seed=9)
    out = make_box_tokens(grid, [])
    want = grid.reshape(-1, WIDTH).mean(axis=0)
    assert out.tokens.shape == (3, WIDTH)
    for row in out.tokens:
        assert row.tobytes() == want.tobytes()
    assert out.sources == ["fallback"] * 3


def test_full_frame_box_equals_the_fallback_bitwise():
    grid = _random_grid(seed=10)
    fallback = make_box_tokens(grid, []).tokens[0]
    full = make_box_tokens(grid, [Box("hand_right", 0, 0, 23, 23)]).tokens[1]
    assert full.tobytes() == fallback.tobytes()


def test_box_slots_follow_the_fixed_kind_order():
    grid = _random_grid(seed=11)
    boxes = [Box("object", 0, 0, 3, 3), Box("hand_left", 10, 10, 12, 12)]
    out = make_box_tokens(grid, boxes)
    assert out.sources == ["box", "fallback", "box"]
    assert np.allclose(out.tokens[0],
                       grid[10:13, 10:13].reshape(-1, WIDTH).mean(axis=0))
    assert np.allclose(out.tokens[2], grid[0:4, 0:4].reshape(-1, WIDTH).mean(axis=0))


def test_malformed_boxes_are_rejected():
    with pytest.raises(BoxError):
        Box("object", 5, 5, 4, 5)  # r1 < r0
    with pytest.raises(BoxError):
        Box("object", 0, 0, 0, 24)  # col out of range
    with pytest.raises(BoxError):
        Box("thumb", 0, 0, 1, 1)  # unknown kind
    grid = _random_grid(seed=12)
    with pytest.raises(BoxError):
        make_box_tokens(grid, [Box("object", 0, 0, 1, 1)] * 2)  # duplicate kind
    with pytest.raises(BoxError):
        make_box_tokens(grid, [Box("object", 0, 0, 1, 1),
                               Box("hand_left", 0, 0, 1, 1),
                               Box("hand_right", 0, 0, 1, 1),
                               Box("object", 2, 2, 3, 3)])


def test_boxes_parse_from_json_records():
    recs = [{"kind": "hand_left", "r0": 1, "c0": 2, "r1": 3, "c1": 4}]
    (box,) = boxes_from_json(recs)
    assert box == Box("hand_left", 1, 2, 3, 4)
    with pytest.raises(BoxError):
        boxes_from_json([{"kind": "hand_left", "r0": 1}])


# ---------------- synthetic detector ----------------

def _event_with_three_primitives(onset=1.0):
    return Event(onset=onset, duration=1.0, primitives=[
        PrimitiveTrack(kind="hand_left", start=(4.0, 4.0), velocity=(0.0, 0.0),
                       extent=(3, 3), intensity=0.5),
        PrimitiveTrack(kind="hand_right", start=(4.0, 18.0), velocity=(0.0, 0.0),
                       extent=(3, 3), intensity=0.5),
        PrimitiveTrack(kind="object", start=(16.0, 12.0), velocity=(1.0, 0.0),
                       extent=(4, 4), intensity=0.8),
    ])


def test_detector_reads_boxes_straight_from_the_scene():
    frames = synth_video(seed=0, duration_s=3.0, events=[_event_with_three_primitives()])
    frame = frames[12]  # t = 1.5, inside the event window
    boxes = detect_boxes_synthetic(frame)
    assert [b.kind for b in boxes] == ["hand_left", "hand_right", "object"]
    want = primitive_bounds((4.0, 4.0), (3, 3))
    assert (boxes[0].r0, boxes[0].c0, boxes[0].r1, boxes[0].c1) == want
    assert detect_boxes_synthetic(frames[0]) == []  # before onset: empty scene


def test_jittered_detection_is_seeded_and_stays_in_bounds():
    frames = synth_video(seed=0, duration_s=3.0, events=[_event_with_three_primitives()])
    frame = frames[12]
    a = detect_boxes_synthetic(frame, jitter=True, seed=5)
    b = detect_boxes_synthetic(frame, jitter=True, seed=5)
    c = detect_boxes_synthetic(frame, jitter=True, seed=6)
    assert a == b
    assert a != c
    clean = detect_boxes_synthetic(frame)
    for jit, ref in zip(a, clean):
        for got, want in [(jit.r0, ref.r0), (jit.c0, ref.c0),
                          (jit.r1, ref.r1), (jit.c1, ref.c1)]:
            assert abs(got - want) <= 1


# ---------------- thinking template ----------------

def _template_parts(seed=20):
    grid = _random_grid(seed=seed)
    frame_tokens = np.arange(10 * WIDTH, dtype=np.float64).reshape(10, WIDTH)
    return (frame_tokens, make_grid_tokens(grid),
            make_box_tokens(grid, [Box("object", 0, 0, 3, 3)]))


def test_template_element_kind_sequence():
    v = Vocab(64)
    frame_tokens, grid, box = _template_parts()
    elements = assemble_thinking_template(frame_tokens, grid, box, v)
    kinds = []
    for kind, payload in elements:
        if kind == "token":
            kinds.append(v.name(payload))
        else:
            kinds.extend(["visual"] * payload.shape[0])
    want = (["STREAM_TAG"] + ["visual"] * 10
            + (["visual"] * 9 + ["FRAME_SEP"]) * 4
            + ["USER_TAG", "FOCUS_PHRASE"] + ["visual"] * 3 + ["RESPOND"])
    assert kinds == want
    n_visual = sum(p.shape[0] for k, p in elements if k == "visual")
    assert n_visual == 10 + 36 + 3


def test_template_visual_runs_are_separate_drop_groups():
    frame_tokens, grid, box = _template_parts()
    elements = assemble_thinking_template(frame_tokens, grid, box, Vocab(64))
    runs = [p.shape[0] for k, p in elements if k == "visual"]
    assert runs == [10, 9, 9, 9, 9, 3]


def test_fine_grained_template_has_one_unseparated_grid_run():
    frame_tokens, _, box = _template_parts()
    fine = make_fine_grained_tokens(_random_grid(seed=20))
    v = Vocab(64)
    elements = assemble_thinking_template(frame_tokens, fine, box, v)
    runs = [p.shape[0] for k, p in elements if k == "visual"]
    assert runs == [10, 36, 3]
    seps = [p for k, p in elements if k == "token" and p == v.frame_sep]
    assert seps == []


def test_template_requires_both_grid_and_box_inputs():
    frame_tokens, grid, box = _template_parts()
    with pytest.raises(TemplateError):
        assemble_thinking_template(frame_tokens, None, box, Vocab(64))
    with pytest.raises(TemplateError):
        assemble_thinking_template(frame_tokens, grid, None, Vocab(64))
    with pytest.raises(TemplateError):
        assemble_thinking_template(frame_tokens[:4], grid, box, Vocab(64))


def test_template_assembly_is_training_free():
    v, seq, bundles = _episode(seed=1)
    model = _model(v, seed=2)
    params = {k: p.data for k, p in model.params().items()}
    before = parameter_checksum(params)
    frame_tokens, grid, box = _template_parts()
    assemble_thinking_template(frame_tokens, grid, box, Vocab(64))
    assert parameter_checksum(params) == before
