import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from adversa import text as grammar
from adversa.errors import ConfigurationError, DegenerateSegmentError, DomainError
from adversa.scenario import (
    CLIP_LEN,
    DEFAULT_NEGATIVE_MAP,
    GROUPS,
    GeneratorConfig,
    TemporalAnnotation,
    box_iou,
    box_pixel_bounds,
    build_interaction_groups,
    check_invariants,
    corpus_seeds,
    generate_scenario,
    object_mask,
    partition_segments,
    positive_text_field,
    reverse_clip,
    sample_clip,
)


@pytest.fixture(scope="module")
def corpus():
    return [generate_scenario(s) for s in range(1, 65)]


def test_seed_zero_has_ordered_annotation_and_tracks():
    s = generate_scenario(0)
    a = s.annotation
    assert a.t_ai < a.t_co < a.t_ae
    assert len(s.tracks) >= 2
    assert s.pixels.shape == (120, 64, 64, 3)
    assert s.frames.dtype == np.float32 and s.frames.min() >= 0 and s.frames.max() <= 1


def test_same_seed_is_byte_identical():
    a, b = generate_scenario(7), generate_scenario(7)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.texts == b.texts and a.annotation == b.annotation
    for ta, tb in zip(a.tracks, b.tracks):
        np.testing.assert_array_equal(ta.boxes, tb.boxes)


def test_invariant_sweep_over_64_seeds(corpus):
    for s in corpus:
        check_invariants(s)
        a = s.annotation
        assert 0 <= a.t_ai <= a.t_co <= a.t_ae <= s.T
        # collision frame has an overlapping pair, nothing overlaps before onset
        boxes_co = [tr.boxes[a.t_co] for tr in s.tracks if tr.present[a.t_co]]
        assert any(box_iou(p, q) > 0 for i, p in enumerate(boxes_co) for q in boxes_co[i + 1 :])
        for t in range(a.t_ai):
            bt = [tr.boxes[t] for tr in s.tracks if tr.present[t]]
            assert not any(box_iou(p, q) > 0 for i, p in enumerate(bt) for q in bt[i + 1 :])


def test_corpus_is_pure_function_of_master_seed():
    assert corpus_seeds(3, 10) == corpus_seeds(3, 10)
    assert corpus_seeds(3, 10) != corpus_seeds(4, 10)
    assert corpus_seeds(3, 10)[:5] == corpus_seeds(3, 5)


@pytest.mark.parametrize("kw", [{"T": 50}, {"H": 16}, {"C": 1}, {"max_retries": 0}])
def test_invalid_generator_config(kw):
    with pytest.raises(ConfigurationError):
        generate_scenario(0, GeneratorConfig(**kw))


def test_texts_follow_grammar(corpus):
    for s in corpus:
        a, n = list(s.texts.t_a), list(s.texts.t_a_neg)
        assert len(n) == len(a) + 1
        # exactly one inserted negation token
        i = n.index(grammar.tokenize(grammar.NEGATION)[0])
        assert n[:i] + n[i + 1 :] == a
        for k in ("t_r", "t_p", "t_a", "t_a_neg"):
            assert 0 < len(s.texts.get(k)) <= grammar.MAX_TOKENS


def test_tokenize_round_trip_and_length_limit():
    sentence = grammar.reason_text("cyclist", 1, "rural")
    assert grammar.detokenize(grammar.tokenize(sentence)) == sentence
    with pytest.raises(DomainError):
        grammar.tokenize(" ".join(["car"] * 78))


def test_partition_example():
    v_o, v_r, v_a = partition_segments(TemporalAnnotation(60, 70, 100))
    assert (v_o, v_r, v_a) == (range(0, 20), range(20, 60), range(60, 101))


def test_partition_degenerate():
    with pytest.raises(DegenerateSegmentError):
        partition_segments(TemporalAnnotation(40, 50, 100))


@settings(max_examples=200, deadline=None)
@given(t_ai=st.integers(56, 200), co=st.integers(0, 30), ae=st.integers(15, 60))
def test_partition_ranges_disjoint_and_cover(t_ai, co, ae):
    ann = TemporalAnnotation(t_ai, t_ai + co, t_ai + co + ae)
    v_o, v_r, v_a = partition_segments(ann)
    covered = list(v_o) + list(v_r) + list(v_a)
    assert covered == list(range(0, ann.t_ae + 1))
    assert len(v_r) == min(40, t_ai)
    assert v_r.start == ann.near_start


def test_sample_clip_unique_start():
    clip = sample_clip(None, range(0, 16), np.random.default_rng(0))
    np.testing.assert_array_equal(clip.indices, np.arange(16))


def test_sample_clip_too_short():
    with pytest.raises(DegenerateSegmentError):
        sample_clip(None, range(0, 15), np.random.default_rng(0))


def test_sample_clip_start_is_uniform():
    rng = np.random.default_rng(11)
    starts = [sample_clip(None, range(0, 20), rng).indices[0] for _ in range(5000)]
    counts = np.bincount(starts, minlength=5)
    assert set(starts) == {0, 1, 2, 3, 4}
    assert stats.chisquare(counts).pvalue > 1e-3


def test_sample_clip_is_contiguous_frames_of_source():
    s = generate_scenario(2)
    clip = sample_clip(s, range(10, 40), np.random.default_rng(1))
    assert len(clip) == CLIP_LEN
    np.testing.assert_array_equal(np.diff(clip.indices), 1)
    np.testing.assert_array_equal(clip.frames, s.frames[clip.indices])


def test_reverse_clip():
    x = np.arange(3)[:, None, None, None] * np.ones((3, 2, 2, 3))
    np.testing.assert_array_equal(reverse_clip(x)[:, 0, 0, 0], [2, 1, 0])
    same = np.ones((4, 2, 2, 3))
    np.testing.assert_array_equal(reverse_clip(same), same)
    r = np.random.default_rng(0).random((16, 4, 4, 3))
    np.testing.assert_array_equal(reverse_clip(reverse_clip(r)), r)


def test_interaction_groups_structure(corpus):
    pool = [s.texts for s in corpus[:8]]
    s = corpus[10]
    groups = build_interaction_groups(s, pool, np.random.default_rng(0))
    pairs = [c for g in GROUPS for c in groups[g]]
    assert len(pairs) == 12
    for g in GROUPS:
        pos, n1, n2 = groups[g]
        assert pos.polarity == "positive" and pos.text == s.texts.get(positive_text_field(g))
        assert len(pos.clip) == CLIP_LEN
        assert n1.text == s.texts.get(DEFAULT_NEGATIVE_MAP[g][0])
        assert n2.text == s.texts.get(DEFAULT_NEGATIVE_MAP[g][1])
    assert groups["p"][0].reversed and not groups["r"][0].reversed


def test_group_p_is_reversed_r_for_same_window():
    s = generate_scenario(5)
    pool = [generate_scenario(6).texts]
    # same rng state -> group r and the unreversed group p sample the same window
    ga = build_interaction_groups(s, pool, np.random.default_rng(3))
    _, v_r, _ = partition_segments(s)
    rng = np.random.default_rng(3)
    sample_clip(s, partition_segments(s)[0], rng)
    r_clip = sample_clip(s, v_r, rng)
    np.testing.assert_array_equal(ga["r"][0].clip.indices, r_clip.indices)
    p_clip = ga["p"][0].clip
    np.testing.assert_array_equal(reverse_clip(p_clip).frames, s.frames[reverse_clip(p_clip).indices])
    assert np.all(np.diff(p_clip.indices) == -1)


def test_negatives_never_equal_positive(corpus):
    pool = [s.texts for s in corpus]
    rng = np.random.default_rng(0)
    for s in corpus:
        groups = build_interaction_groups(s, pool, rng, with_frames=False)
        for g in GROUPS:
            pos, n1, n2 = groups[g]
            assert n1.text != pos.text and n2.text != pos.text


def test_empty_pool_rejected():
    with pytest.raises(DomainError):
        build_interaction_groups(generate_scenario(0), [], np.random.default_rng(0))


def test_mask_exactness(corpus):
    """Nothing is drawn outside the boxes and the rasterized union matches a point-in-box loop."""
    for s in corpus[:16]:
        a = s.annotation
        frames = [0, a.t_ai, a.t_co, a.t_ae]
        masks = object_mask(s.tracks, frames, 64, 64)
        for i, ti in enumerate(frames):
            for j, tj in enumerate(frames[i + 1 :], i + 1):
                free = ~masks[i] & ~masks[j]
                np.testing.assert_array_equal(s.pixels[ti][free], s.pixels[tj][free])
        # the actor is drawn on top as one solid rectangle
        r0, r1, c0, c1 = box_pixel_bounds(s.tracks[0].boxes[a.t_co], 64, 64)
        patch = s.pixels[a.t_co, r0:r1, c0:c1].reshape(-1, 3)
        assert (patch == patch[0]).all()
        t = a.t_co
        brute = np.zeros((64, 64), bool)
        for tr in s.tracks:
            if not tr.present[t]:
                continue
            x0, y0, x1, y1 = tr.boxes[t]
            for r in range(64):
                for c in range(64):
                    if x0 <= (c + 0.5) / 64 < x1 and y0 <= (r + 0.5) / 64 < y1:
                        brute[r, c] = True
        np.testing.assert_array_equal(masks[2], brute)


def test_boxes_are_normalized(corpus):
    for s in corpus:
        for tr in s.tracks:
            b = tr.boxes[tr.present]
            assert np.all(b[:, 0] >= 0) and np.all(b[:, 2] <= 1) and np.all(b[:, 0] < b[:, 2])
            assert np.all(b[:, 1] >= 0) and np.all(b[:, 3] <= 1) and np.all(b[:, 1] < b[:, 3])
            assert np.all(np.isnan(tr.boxes[~tr.present]))
