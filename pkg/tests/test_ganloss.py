from collections import OrderedDict

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mimoaudio import ganloss as gl
from mimoaudio.nn import gradient_check


def t(*shape, fill=None, rng=None):
    if fill is not None:
        return torch.full(shape, float(fill), dtype=torch.float64)
    return torch.from_numpy(rng.normal(size=shape))


def score_set(rng, k=3):
    return [torch.from_numpy(rng.normal(size=int(rng.integers(1, 20)))) for _ in range(k)]


def feature_set(rng, shapes):
    return [[torch.from_numpy(rng.normal(size=s)) for s in layer] for layer in shapes]


# ------------------------------------------------------------------------ hinge


def test_hinge_d_examples():
    assert gl.hinge_d_loss([t(5, fill=2)], [t(5, fill=-2)]).item() == 0.0
    assert gl.hinge_d_loss([t(5, fill=0)], [t(5, fill=0)]).item() == 2.0
    with pytest.raises(gl.GanLossError):
        gl.hinge_d_loss([t(2, fill=0)], [t(2, fill=0)] * 2)


def test_hinge_d_matches_elementwise(rng):
    real, fake = score_set(rng, 4), score_set(rng, 4)
    expect = 0.0
    for r, f in zip(real, fake):
        rr, ff = r.numpy(), f.numpy()
        expect += sum(max(0.0, 1 - v) for v in rr) / len(rr) + sum(max(0.0, 1 + v) for v in ff) / len(ff)
    assert gl.hinge_d_loss(real, fake).item() == pytest.approx(expect / 4, abs=1e-12)


@given(st.integers(0, 2 ** 31))
def test_hinge_d_nonnegative_and_zero_iff_margins(seed):
    rng = np.random.default_rng(seed)
    real, fake = score_set(rng), score_set(rng)
    assert gl.hinge_d_loss(real, fake).item() >= 0
    sat_real = [r.abs() + 1 for r in real]
    sat_fake = [-f.abs() - 1 for f in fake]
    assert gl.hinge_d_loss(sat_real, sat_fake).item() == 0.0
    sat_real[0][0] = 0.999
    assert gl.hinge_d_loss(sat_real, sat_fake).item() > 0


def test_hinge_g_examples():
    assert gl.hinge_g_loss([t(4, fill=1)]).item() == -1.0
    assert gl.hinge_g_loss([t(4, fill=0)]).item() == 0.0
    assert gl.hinge_g_loss([t(3, fill=1), t(7, fill=3)]).item() == -2.0


# ------------------------------------------------------------ feature matching


SHAPES = [[(2, 3), (4,)], [(5,), (1, 2, 2), (3,)]]


def test_feature_matching_examples(rng):
    real = feature_set(rng, SHAPES)
    assert gl.feature_matching_loss(real, real).item() == 0.0
    plus = [[f + 1 for f in layer] for layer in real]
    assert gl.feature_matching_loss(real, plus).item() == pytest.approx(1.0, abs=1e-15)


def test_feature_matching_recompute(rng):
    real, fake = feature_set(rng, SHAPES), feature_set(rng, SHAPES)
    per_k = [np.mean([np.abs(a.numpy() - b.numpy()).mean() for a, b in zip(rk, fk)])
             for rk, fk in zip(real, fake)]
    assert gl.feature_matching_loss(real, fake).item() == pytest.approx(np.mean(per_k), abs=1e-12)
    assert gl.feature_matching_loss(fake, real).item() == gl.feature_matching_loss(real, fake).item()


def test_feature_matching_shape_error_names_slot(rng):
    real = feature_set(rng, SHAPES)
    fake = feature_set(rng, [[(2, 3), (4,)], [(5,), (1, 2, 3), (3,)]])
    with pytest.raises(gl.GanLossError, match=r"k=1, l=1"):
        gl.feature_matching_loss(real, fake)
    with pytest.raises(gl.GanLossError):
        gl.feature_matching_loss(real, real[:1])


# ------------------------------------------------------------------ composites


def test_generator_total_examples():
    assert gl.generator_total(1, 1, 1) == 4
    assert gl.generator_total(0, 0, 0) == 0
    assert gl.generator_total(2, -1, 0.5) == 2


def test_stage1_total_examples():
    assert gl.stage1_total(1, 1, 1) == 12
    assert gl.stage1_total(0, 0, 0) == 0
    assert gl.stage1_total(0.5, 2, 1) == 8


@given(st.lists(st.floats(-100, 100), min_size=6, max_size=6), st.floats(-3, 3))
def test_composites_superpose(v, c):
    a, b = v[:3], v[3:]
    for f in (gl.generator_total, gl.stage1_total):
        lhs = f(*(x + c * y for x, y in zip(a, b)))
        assert lhs == pytest.approx(f(*a) + c * f(*b), abs=1e-9)


def test_duplicated_subdiscriminators_unchanged(rng):
    real, fake = score_set(rng), score_set(rng)
    fr, ff = feature_set(rng, SHAPES), feature_set(rng, SHAPES)
    assert gl.hinge_d_loss(real * 2, fake * 2).item() == pytest.approx(gl.hinge_d_loss(real, fake).item(), abs=1e-15)
    assert gl.hinge_g_loss(fake * 2).item() == pytest.approx(gl.hinge_g_loss(fake).item(), abs=1e-15)
    assert gl.feature_matching_loss(fr * 2, ff * 2).item() == pytest.approx(
        gl.feature_matching_loss(fr, ff).item(), abs=1e-15)


# --------------------------------------------------------------------- mpd fold


def test_mpd_fold_examples():
    w = np.arange(1, 11, dtype=float)
    m = gl.mpd_fold(w, 3)
    assert m.shape == (4, 3)
    assert m.tolist() == [[1, 2, 3], [4, 5, 6], [7, 8, 9], [10, 0, 0]]
    assert (m == 0).sum() == 2
    col = gl.mpd_fold(w, 1)
    assert col.shape == (10, 1) and np.array_equal(col[:, 0], w)
    with pytest.raises(gl.GanLossError):
        gl.mpd_fold(w, 0)


@given(st.integers(1, 200), st.integers(1, 13))
def test_mpd_unfold_inverse(n, period):
    w = np.random.default_rng(n).normal(size=n)
    back = np.asarray(gl.mpd_unfold(gl.mpd_fold(w, period)))
    assert back.shape[0] == -(-n // period) * period
    assert np.array_equal(back[:n], w) and np.all(back[n:] == 0)
    assert np.array_equal(np.asarray(gl.mpd_unfold(gl.mpd_fold(w, period), n)), w)


def test_stft_stack_shape():
    x = torch.randn(2, 2400, dtype=torch.float64)
    for i in (5, 6, 7):
        window, hop = 15 * 2 ** (i - 1), 15 * 2 ** (i - 2)
        assert gl.stft_stack(x, i).shape == (2, 1 + 2400 // hop, 1 + window // 2)


# ---------------------------------------------------------------- discriminators


@pytest.mark.parametrize("kind,param", [("period", 3), ("stft", 5)])
def test_zero_init_zero_scores(kind, param):
    d = gl.ToyDiscriminator(kind, param, zero_init=True).double()
    scores, feats = gl.toy_discriminator(np.zeros(2400), d)
    assert torch.all(scores == 0)
    assert len(feats) == d.num_features == 3


def test_feature_count_follows_channels():
    d = gl.ToyDiscriminator("period", 2, channels=(4, 4, 4, 4))
    _, feats = gl.toy_discriminator(torch.randn(1, 1000), d)
    assert len(feats) == 5
    with pytest.raises(ValueError):
        gl.ToyDiscriminator("wavelet", 2)


def test_toy_discriminator_deterministic_in_eval():
    d = gl.ToyDiscriminator("stft", 5).double().eval()
    x = torch.randn(2, 2400, dtype=torch.float64)
    a, b = gl.toy_discriminator(x, d)[0], gl.toy_discriminator(x, d)[0]
    assert torch.equal(a, b)


def test_spectral_norm_bounds_weight():
    torch.manual_seed(0)
    conv = gl.SNConv2d(3, 5, 3).double()
    for _ in range(50):
        w = conv.normalized_weight()
    sigma = torch.linalg.matrix_norm(w.reshape(5, -1), ord=2).item()
    assert sigma == pytest.approx(1.0, rel=1e-6)


@pytest.mark.parametrize("kind,param", [("period", 3), ("stft", 5)])
def test_hinge_through_discriminator_gradcheck(kind, param):
    torch.manual_seed(1)
    d = gl.ToyDiscriminator(kind, param).double().eval()
    with torch.no_grad():
        # push part of the real scores past the margin so no gradient is identically zero
        d.post.bias.fill_(0.9)
    real = torch.randn(2, 1200, dtype=torch.float64) * 0.3
    fake = torch.randn(2, 1200, dtype=torch.float64) * 0.3

    def loss():
        return gl.hinge_d_loss([gl.toy_discriminator(real, d)[0]], [gl.toy_discriminator(fake, d)[0]])

    params = OrderedDict((n, p) for n, p in d.named_parameters())
    rep = gradient_check(loss, params, eps=1e-6, max_coords=40)
    assert rep.max_rel_error < 1e-4


def test_multi_discriminator_default_subs():
    md = gl.MultiDiscriminator()
    assert [d.param for d in md.subs] == [2, 3, 5, 7, 11, 5, 6, 7]
    scores, feats = md(torch.randn(1, 4800))
    assert len(scores) == len(feats) == 8


def test_gan_smoke_short():
    res = gl.gan_smoke(steps=5, seed=0)
    assert res.all_finite and len(res.history) == 5
    lo, hi = res.d_loss_range
    assert 0 <= lo <= hi <= 4
