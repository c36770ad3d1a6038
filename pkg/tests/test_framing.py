import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mimoaudio import framing
from mimoaudio.framing import EMPTY, DelayConfig, Patch, Text

E = EMPTY


def delay_oracle(frames, delays):
    """Direct transcription of the piecewise rule with 1-based slot and frame indices."""
    g, r = frames.shape
    out = np.full((g + max(delays), r), EMPTY)
    for i in range(1, g + max(delays) + 1):
        for col in range(r):
            if 1 <= i - delays[col] <= g:
                out[i - 1, col] = frames[i - delays[col] - 1, col]
    return out


# -------------------------------------------------------------------- patches


def test_patchify_counts():
    a = np.arange(32).reshape(8, 4)
    ps = framing.patchify(a, 4)
    assert len(ps) == 2 and all(p.g == 4 and not p.padded for p in ps)
    assert framing.FRAME_RATE / 4 == 6.25
    one = framing.patchify(a[:4], 4)
    assert len(one) == 1 and np.array_equal(one[0].frames, a[:4])


def test_patchify_pads_last():
    a = np.arange(20).reshape(10, 2)
    ps = framing.patchify(a, 4)
    assert len(ps) == 3
    assert ps[-1].valid == 2 and ps[-1].padded
    assert np.all(ps[-1].frames[2:] == EMPTY)
    assert np.array_equal(framing.unpatchify(ps), a)


def test_patchify_empty():
    assert framing.patchify(np.zeros((0, 8), dtype=int)) == []
    assert framing.unpatchify([], 8).shape == (0, 8)
    with pytest.raises(framing.FramingError):
        framing.patchify(np.zeros((4, 2), dtype=int), 0)


def test_unpatchify_inconsistent_g():
    with pytest.raises(framing.FramingError):
        framing.unpatchify([Patch(np.zeros((4, 2))), Patch(np.zeros((2, 2)))])


@given(st.integers(0, 40), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_patch_round_trip(m, r, g, seed):
    a = np.random.default_rng(seed).integers(0, 128, size=(m, r))
    ps = framing.patchify(a, g)
    assert len(ps) == -(-m // g)
    assert np.array_equal(framing.unpatchify(ps, r), a)


# ---------------------------------------------------------------------- delay


def test_delayed_length_default():
    assert DelayConfig().delayed_length(4) == 11
    p = Patch(np.arange(32).reshape(4, 8))
    assert framing.delay_apply(p).frames.shape == (11, 8)


def test_zero_delay_is_identity():
    p = Patch(np.arange(12).reshape(4, 3))
    dp = framing.delay_apply(p, DelayConfig((0, 0, 0)))
    assert np.array_equal(dp.frames, p.frames)


def test_hand_example():
    a, b, c, d = 10, 11, 12, 13
    p = Patch(np.array([[a, b], [c, d]]))
    dp = framing.delay_apply(p, DelayConfig((0, 1)))
    assert dp.frames.tolist() == [[a, E], [c, b], [E, d]]
    assert framing.delay_remove(dp, DelayConfig((0, 1)), 2) == p


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_delay_matches_oracle(g, r, seed):
    rng = np.random.default_rng(seed)
    delays = tuple(rng.integers(0, 8, size=r).tolist())
    frames = rng.integers(0, 1024, size=(g, r))
    dp = framing.delay_apply(Patch(frames), DelayConfig(delays))
    assert np.array_equal(dp.frames, delay_oracle(frames, delays))
    assert dp.frames.shape[0] == g + max(delays)
    assert framing.delay_remove(dp, DelayConfig(delays), g) == Patch(frames)


def test_exhaustive_small_round_trips():
    # every delay vector over {0,1,2}^2 and every binary 2x2 patch
    for delays in itertools.product(range(3), repeat=2):
        d = DelayConfig(delays)
        for bits in itertools.product((0, 1), repeat=4):
            p = Patch(np.array(bits).reshape(2, 2))
            assert framing.delay_remove(framing.delay_apply(p, d), d, 2) == p


def test_delay_remove_padded_patch():
    ps = framing.patchify(np.arange(16).reshape(2, 8), 4)
    p = ps[0]
    assert p.valid == 2
    back = framing.delay_remove(framing.delay_apply(p), DelayConfig(), 4)
    assert back == p


def test_delay_remove_errors():
    d = DelayConfig((0, 1))
    good = framing.delay_apply(Patch(np.array([[1, 2], [3, 4]])), d).frames.copy()
    with pytest.raises(framing.FramingError, match="malformed"):
        framing.delay_remove(good[:2], d, 2)
    tampered = good.copy()
    tampered[0, 1] = 5
    with pytest.raises(framing.FramingError, match="inconsistent delay pattern"):
        framing.delay_remove(tampered, d, 2)


def test_delay_config_validation():
    with pytest.raises(framing.FramingError):
        DelayConfig(())
    with pytest.raises(framing.FramingError):
        DelayConfig((0, 64))
    with pytest.raises(framing.FramingError):
        DelayConfig((-1,))
    with pytest.raises(framing.FramingError):
        framing.delay_apply(Patch(np.zeros((4, 3))), DelayConfig((0, 1)))


def test_check_range():
    p = Patch(np.array([[0, 127], [EMPTY, 5]]))
    p.check_range([1024, 128])
    with pytest.raises(framing.FramingError, match="index out of range"):
        p.check_range([1024, 127])


def test_tokens_per_second():
    assert framing.tokens_per_second() == 200


# ---------------------------------------------------------------- interleaving


def patches(n, r=2):
    return [Patch(np.full((2, r), i)) for i in range(n)]


def test_interleave_five_five():
    seq = framing.interleave_schedule(list(range(10)), patches(10), (5, 5))
    assert seq.pattern() == [("t", 5), ("p", 5), ("t", 5), ("p", 5)]


def test_interleave_no_text():
    seq = framing.interleave_schedule([], patches(4), (5, 5))
    assert seq.pattern() == [("p", 4)]


def test_interleave_exhaustion():
    seq = framing.interleave_schedule(list(range(7)), patches(12), (5, 5))
    assert seq.pattern() == [("t", 5), ("p", 5), ("t", 2), ("p", 7)]


def test_interleave_bad_ratio():
    with pytest.raises(framing.FramingError):
        framing.interleave_schedule([1], patches(1), (0, 5))


@given(st.lists(st.integers(0, 255), max_size=40), st.integers(0, 40), st.integers(1, 7), st.integers(1, 7))
def test_interleave_preserves_streams(text, n_patches, t, s):
    ps = patches(n_patches)
    seq = framing.interleave_schedule(text, ps, (t, s))
    assert seq.text_ids == text
    assert seq.patches == ps
    assert len(seq) == len(text) + n_patches
    # every run except the last of each kind has the configured length while both streams last
    runs = seq.pattern()
    if text and ps:
        assert runs[0][0] == "t"


# -------------------------------------------------------------- loss weights


def test_joint_weights():
    seq = framing.interleave_schedule([1, 2], [Patch(np.zeros((4, 8), dtype=int))], (1, 1))
    w = framing.loss_weight_mask(seq, framing.JOINT_TEXT_WEIGHT, framing.JOINT_RVQ_WEIGHTS)
    assert w[0] == 100.0
    assert w[1].shape == (4, 8)
    assert w[1][0].tolist() == [12, 8, 6, 4, 2, 2, 1, 1]


def test_understanding_weights_zero_audio():
    seq = framing.interleave_schedule([1, 2, 3], patches(3, 8), (1, 1))
    w = framing.loss_weight_mask(seq, framing.UNDERSTANDING_TEXT_WEIGHT, framing.UNDERSTANDING_RVQ_WEIGHTS)
    assert framing.total_weight(w) == 3.0
    assert all(np.all(x == 0) for x in w if isinstance(x, np.ndarray))


def test_all_empty_patch_zero_weight():
    seq = framing.InterleavedSequence([Patch(np.full((4, 8), EMPTY))])
    w = framing.loss_weight_mask(seq, 100.0, framing.JOINT_RVQ_WEIGHTS)
    assert framing.total_weight(w) == 0.0


def test_weight_length_mismatch():
    with pytest.raises(framing.FramingError):
        framing.loss_weight_mask(framing.InterleavedSequence([Patch(np.zeros((4, 8)))]), 1.0, [1.0] * 7)


@given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 2 ** 31))
def test_total_weight_formula(nt, npch, seed):
    rng = np.random.default_rng(seed)
    ps = []
    for _ in range(npch):
        f = rng.integers(0, 8, size=(4, 8))
        f[rng.random(4) < 0.3] = EMPTY
        ps.append(Patch(f))
    seq = framing.interleave_schedule(list(range(nt)), ps, (5, 5))
    rw = np.array(framing.JOINT_RVQ_WEIGHTS)
    w = framing.loss_weight_mask(seq, 100.0, rw)
    expect = 100.0 * nt + sum(float(rw @ (p.frames != EMPTY).sum(0)) for p in ps)
    assert framing.total_weight(w) == pytest.approx(expect)


def test_text_element():
    assert Text(5).id == 5
    seq = framing.InterleavedSequence([Text(1), Patch(np.zeros((4, 8)))])
    assert len(seq) == 2 and seq.pattern() == [("t", 1), ("p", 1)]
