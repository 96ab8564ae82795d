import numpy as np
import pytest
import scipy.linalg
import scipy.optimize
import scipy.special
from hypothesis import given, settings, strategies as st

from fedattn.probes import (
    ProbeError,
    abs_cos_matrix,
    anisotropic_gaussian,
    cos_trend,
    distance_distortion,
    fastica,
    hungarian,
    hungarian_macs,
    iid_laplace,
    jacobi_eigh,
    knn_indices,
    knn_overlap,
    random_guess_baseline,
    random_rotation,
    scrambled_dataset,
    vma_trial,
    whiten,
)
from fedattn.scrambler import KeyConfig, apply_phi, build_scrambler
from fedattn.tensor_core import RngStream


@settings(max_examples=40)
@given(st.integers(1, 12), st.integers(0, 2**32))
def test_hungarian_matches_scipy(n, seed):
    cost = np.random.default_rng(seed).random((n, n))
    col = hungarian(cost)
    assert sorted(col.tolist()) == list(range(n))
    r, c = scipy.optimize.linear_sum_assignment(cost)
    assert cost[np.arange(n), col].sum() == pytest.approx(cost[r, c].sum(), abs=1e-12)


def test_hungarian_integer_ties():
    cost = np.ones((4, 4))
    assert sorted(hungarian(cost).tolist()) == [0, 1, 2, 3]


@settings(max_examples=30)
@given(st.integers(1, 16), st.integers(0, 2**32))
def test_jacobi_matches_scipy(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    a = a + a.T
    w, v = jacobi_eigh(a)
    assert np.allclose(w, scipy.linalg.eigh(a, eigvals_only=True), atol=1e-9)
    assert np.allclose(v @ np.diag(w) @ v.T, a, atol=1e-9)
    assert np.allclose(v.T @ v, np.eye(n), atol=1e-10)


def test_jacobi_extreme_entries():
    a = np.array([[1e200, 1.0], [1.0, -1e200]])
    w, _ = jacobi_eigh(a)
    assert np.all(np.isfinite(w))


def test_knn_examples():
    x = RngStream(0).normal((300, 8))
    assert knn_overlap(x, x, 10) == 1.0
    s = build_scrambler(8, (1, 1), RngStream(1))
    assert knn_overlap(x, apply_phi(x, s), 10) == 1.0
    brute = np.argsort(((x[:, None] - x[None]) ** 2).sum(-1) + np.diag(np.full(300, np.inf)), axis=1,
                       kind="stable")[:, :5]
    assert np.array_equal(np.sort(knn_indices(x, 5), 1), np.sort(brute, 1))


def test_knn_drops_under_wide_scaling():
    vals = []
    for n in (256, 1024):
        ds = scrambled_dataset("anisotropic_gaussian", n, 32, 0)
        vals.append(knn_overlap(ds.x, ds.x_s, 10))
    assert vals[0] < 1.0 and vals[1] < vals[0]


def test_distortion_examples():
    x = RngStream(2).normal((200, 16))
    d = distance_distortion(x, 2 * x)
    assert d.median == pytest.approx(2.0) and d.lo == pytest.approx(2.0) and d.hi == pytest.approx(2.0)
    s = build_scrambler(16, (1, 1), RngStream(3))
    d = distance_distortion(x, apply_phi(x, s))
    assert abs(d.lo - 1) <= 1e-9 and abs(d.hi - 1) <= 1e-9
    d = distance_distortion(x, apply_phi(x, build_scrambler(16, (0.125, 8), RngStream(3))))
    assert d.iqr > 0


def test_macs_examples():
    s = RngStream(4).normal((100, 5))
    assert hungarian_macs(s, s) == pytest.approx(1.0)
    perm = s[:, [3, 0, 4, 1, 2]] * np.array([1, -1, 1, -1, -1])
    assert hungarian_macs(perm, s) == pytest.approx(1.0)
    with pytest.raises(ProbeError):
        hungarian_macs(s[:, :3], s)


@given(st.integers(0, 2**32))
def test_macs_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(40, 6)), rng.normal(size=(40, 6))
    base = hungarian_macs(a, b)
    p, q = rng.permutation(6), rng.permutation(6)
    signs = rng.choice([-1.0, 1.0], 6)
    assert hungarian_macs(a[:, p] * signs, b) == pytest.approx(base, abs=1e-12)
    assert hungarian_macs(a, b[:, q] * signs) == pytest.approx(base, abs=1e-12)


def test_random_cos_concentration():
    rng = RngStream(5)
    m = 64
    vals = np.concatenate([abs_cos_matrix(rng.child(i).normal((m, 16)), rng.child(i, "b").normal((m, 16))).ravel()
                           for i in range(20)])
    sigma = vals.std() / np.sqrt(vals.size)
    # exact E|cos| for independent directions in R^m, with the large-m limit alongside
    exact = np.exp(scipy.special.gammaln(m / 2) - scipy.special.gammaln((m + 1) / 2)) / np.sqrt(np.pi)
    assert abs(vals.mean() - exact) <= 3 * sigma + 1e-3
    assert exact == pytest.approx(np.sqrt(2 / (np.pi * m)), rel=0.01)


@pytest.mark.parametrize("d", [2, 3, 8])
def test_ica_positive_control(d):
    rng = RngStream(6).child(d)
    s = iid_laplace(rng.child("s"), 4000, d)
    x = s @ random_rotation(rng.child("mix"), d)
    assert hungarian_macs(fastica(x), s) >= 0.95


def test_ica_gaussian_not_identifiable():
    rng = RngStream(7)
    s = rng.child("s").normal((4000, 4))
    x = s @ random_rotation(rng.child("mix"), 4)
    base, sd = random_guess_baseline(x, s, 300)
    # a rotation of white Gaussians is as good as any other; the estimate sits inside the random spread
    assert abs(hungarian_macs(fastica(x), s) - base) <= 4 * sd


def test_whiten_rejects_rank_deficiency():
    x = RngStream(8).normal((100, 3))
    with pytest.raises(ProbeError):
        whiten(np.c_[x, x[:, 0]])


def test_vma_modes():
    assert vma_trial(0, vocab=64, d=16, n_rows=128, mode="identity") == 1.0
    assert vma_trial(0, vocab=64, d=16, n_rows=128, mode="token_perm") == 1.0
    assert vma_trial(0, vocab=256, d=64, n_rows=256, mode="full") <= 10 / 256
    with pytest.raises(ProbeError):
        vma_trial(0, vocab=16, d=8, n_rows=8, mode="bogus")


def test_cos_trend_endpoints():
    ranges = [(1, 1), (0.25, 4), (0.125, 8)]
    per_seed = np.array([cos_trend(s, ranges, n=1024, d=16) for s in range(3)])
    means = per_seed.mean(0)
    assert means[0] > means[1] > means[2]


def test_generators_shapes():
    x = anisotropic_gaussian(RngStream(9), 5000, 8, rotate=False)
    var = x.var(0)
    assert np.all(np.diff(var) < 0.02)
    assert var[0] == pytest.approx(1.0, rel=0.1)
    ds = scrambled_dataset("iid_laplace", 50, 8, 0, KeyConfig(mag_range=(1, 1)))
    assert ds.x.shape == ds.x_s.shape == (50, 8)
