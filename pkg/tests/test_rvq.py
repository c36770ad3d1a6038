import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from sklearn.cluster import KMeans

from mimoaudio import rvq
from mimoaudio.verify import exhaustive_indices, gaussian_mixture


def state_of(*tables):
    return rvq.RvqState([rvq.Codebook(np.asarray(t, dtype=np.float64)) for t in tables])


def test_codebook_sizes():
    assert rvq.codebook_sizes(8) == [1024, 1024] + [128] * 6
    assert rvq.codebook_sizes(20) == [1024, 1024] + [128] * 18


def test_hand_example():
    s = state_of([[0, 0], [1, 1]])
    q = rvq.quantize(np.array([[0.9, 0.8]]), s)
    assert q.indices.tolist() == [[1]]
    np.testing.assert_allclose(q.residuals[-1], [[-0.1, -0.2]], atol=1e-15)


def test_exact_entry_then_zero_entries(rng):
    s = rvq.RvqState.random([16, 8, 8, 8], 5, seed=2).with_zero_entry()
    x = s.layers[0].entries[7][None].copy()
    q = rvq.quantize(x, s)
    assert q.indices[0, 0] == 7
    assert np.all(q.residuals[1] == 0)
    assert q.indices[0, 1:].tolist() == [0, 0, 0]


def test_lowest_index_tie_break():
    s = state_of([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    # equidistant from all three entries
    assert rvq.quantize(np.array([[0.0, 0.0]]), s).indices[0, 0] == 0
    assert rvq.quantize(np.array([[0.0, 5.0]]), s).indices[0, 0] == 0
    assert rvq.quantize(np.array([[2.0, 0.0]]), s).indices[0, 0] == 0


def test_oracle_equivalence():
    s = rvq.RvqState.random(rvq.codebook_sizes(8), 16, seed=5)
    x = np.random.default_rng(6).normal(size=(1000, 16))
    np.testing.assert_array_equal(rvq.quantize(x, s).indices, exhaustive_indices(x, s))


def test_oracle_with_quantized_grid():
    # coarse integer grids create many exact ties
    r = np.random.default_rng(3)
    s = state_of(*[r.integers(-2, 3, size=(12, 4)).astype(float) for _ in range(4)])
    x = r.integers(-3, 4, size=(500, 4)).astype(float)
    np.testing.assert_array_equal(rvq.quantize(x, s).indices, exhaustive_indices(x, s))


@given(st.integers(0, 2 ** 31), st.integers(1, 6), st.integers(1, 8))
def test_telescoping_and_range(seed, layers, dim):
    r = np.random.default_rng(seed)
    sizes = r.integers(2, 20, size=layers).tolist()
    s = rvq.RvqState.random(sizes, dim, seed=seed % 1000)
    x = r.normal(size=(20, dim))
    q = rvq.quantize(x, s)
    np.testing.assert_allclose(x, q.quantized + q.residuals[-1], atol=1e-9)
    assert np.all(q.indices < np.asarray(sizes)) and np.all(q.indices >= 0)
    np.testing.assert_allclose(rvq.dequantize(q.indices, s), q.quantized, atol=1e-12)


@given(st.integers(0, 2 ** 31))
def test_residual_norm_non_increasing(seed):
    s = rvq.RvqState.random([32, 16, 16, 8, 8], 6, seed=seed % 997).with_zero_entry()
    x = np.random.default_rng(seed).normal(size=(30, 6))
    norms = np.linalg.norm(rvq.quantize(x, s).residuals, axis=-1)
    assert np.all(np.diff(norms, axis=0) <= 1e-12)


def test_monotone_mse_in_layers():
    s = rvq.RvqState.random(rvq.codebook_sizes(8), 16, seed=1).with_zero_entry()
    x = np.random.default_rng(2).normal(size=(100, 16))
    for row in x:
        errs = [np.mean((row - rvq.quantize(row[None], s, n).quantized[0]) ** 2) for n in range(1, 9)]
        assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_dequantize_cases():
    s = rvq.RvqState.random([4, 4], 3, seed=0).with_zero_entry()
    assert np.all(rvq.dequantize(np.zeros((5, 2), dtype=int), s) == 0)
    one = rvq.RvqState([s.layers[0]])
    np.testing.assert_array_equal(rvq.dequantize(np.array([[2], [3]]), one), s.layers[0].entries[[2, 3]])
    with pytest.raises(rvq.RvqError, match="index out of range"):
        rvq.dequantize(np.array([[4, 0]]), s)
    with pytest.raises(rvq.RvqError, match="index out of range"):
        rvq.dequantize(np.array([[-1, 0]]), s)


def test_dim_mismatch():
    with pytest.raises(rvq.RvqError):
        rvq.quantize(np.zeros((3, 4)), rvq.RvqState.random([4], 3))


# -------------------------------------------------------------- commitment / STE


def test_commitment_loss_values(rng):
    q = torch.tensor(rng.normal(size=(6, 5)))
    assert float(rvq.commitment_loss(q, q)) == 0.0
    x = q.clone()
    x[:, 0] += 1.0
    assert float(rvq.commitment_loss(x, q)) == pytest.approx(1 / 5, abs=1e-15)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    assert float(rvq.commitment_loss(torch.tensor(a), b)) == pytest.approx(float(np.mean((a - b) ** 2)), abs=1e-12)
    with pytest.raises(rvq.RvqError):
        rvq.commitment_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_commitment_gradient_to_x_only():
    x = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    q = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    rvq.commitment_loss(x, q).backward()
    assert q.grad is None
    torch.testing.assert_close(x.grad, 2 * (x - q).detach() / 12)


def test_straight_through():
    x = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    q = np.round(x.detach().numpy())
    y = rvq.straight_through(x, q)
    np.testing.assert_array_equal(y.detach().numpy(), q)
    (y * torch.arange(12.0, dtype=torch.float64).reshape(4, 3)).sum().backward()
    torch.testing.assert_close(x.grad, torch.arange(12.0, dtype=torch.float64).reshape(4, 3))


# ---------------------------------------------------------------------- EMA


def test_ema_decay_zero_gives_cluster_means(rng):
    s = rvq.RvqState.random([3], 2, seed=0, decay=0.0)
    vecs = rng.normal(size=(9, 2))
    idx = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    rvq.ema_update(s, vecs[None], idx[:, None])
    for k in range(3):
        np.testing.assert_array_equal(s.layers[0].entries[k], vecs[idx == k].sum(0) / 3)


def test_ema_dead_entry_reseeded(rng):
    s = rvq.RvqState.random([4], 2, seed=0)
    cb = s.layers[0]
    before = cb.entries[3].copy()
    vecs = rng.normal(size=(10, 2))
    idx = np.zeros((10, 1), dtype=int)
    g = np.random.default_rng(0)
    # count starts at 1 and decays by 0.99 per unassigned step: 0.99**459 < 0.01
    for step in range(1, 600):
        rvq.ema_update(s, vecs[None], idx, g)
        if cb.ema_counts[3] == 1.0:
            break
    assert step == 459
    assert not np.allclose(cb.entries[3], before)
    assert any(np.array_equal(cb.entries[3], v) for v in vecs)


def test_ema_empty_batch_noop():
    s = rvq.RvqState.random([4], 2, seed=0)
    before = s.layers[0].entries.copy()
    rvq.ema_update(s, np.zeros((1, 0, 2)), np.zeros((0, 1), dtype=int))
    np.testing.assert_array_equal(s.layers[0].entries, before)


def test_lloyd_matches_sklearn():
    x = gaussian_mixture(0, n=3000)
    _, ours = rvq.lloyd(x, 8, seed=0, restarts=10)
    km = KMeans(8, n_init=10, random_state=0).fit(x)
    ref = km.inertia_ / x.size
    assert ours <= ref * 1.001


def test_ema_reaches_kmeans():
    x = gaussian_mixture(1, n=4000)
    s = rvq.train_ema(x, rvq.RvqState.random([8], 16, seed=1), epochs=15, batch_size=500, seed=1)
    km = KMeans(8, n_init=10, random_state=0).fit(x)
    assert rvq.quantization_mse(x, s) <= 1.05 * km.inertia_ / x.size


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    s = rvq.RvqState.random([8, 4, 4], 3, seed=3)
    p = tmp_path / "cb.rvq"
    rvq.save_codebooks(p, s)
    raw = p.read_bytes()
    assert raw[:4] == b"RVQ1"
    assert len(raw) == 12 + 3 * 4 + (8 + 4 + 4) * 3 * 4
    back = rvq.load_codebooks(p)
    assert back.sizes == [8, 4, 4] and back.dim == 3
    assert rvq.codebooks_to_bytes(back) == raw


def test_checkpoint_rejections():
    raw = rvq.codebooks_to_bytes(rvq.RvqState.random([4], 2))
    with pytest.raises(rvq.RvqError, match="bad magic"):
        rvq.codebooks_from_bytes(b"RVQ2" + raw[4:])
    with pytest.raises(rvq.RvqError, match="truncated"):
        rvq.codebooks_from_bytes(raw[:-3])
    with pytest.raises(rvq.RvqError, match="trailing"):
        rvq.codebooks_from_bytes(raw + b"\x00")


def test_lloyd_restarts_never_worse():
    x = gaussian_mixture(2, n=3000)
    _, one = rvq.lloyd(x, 8, seed=2)
    _, best = rvq.lloyd(x, 8, seed=2, restarts=5)
    assert best <= one
