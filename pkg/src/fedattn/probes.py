"""Attack probes against scrambled states: ICA unmixing, kNN overlap,
distance distortion and a sorted-L1 vocabulary matching probe."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scrambler import KeyConfig, apply_phi, build_scrambler
from .tensor_core import RngStream


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Data generators


def iid_laplace(rng: RngStream, n: int, d: int) -> np.ndarray:
    """Independent unit-scale Laplace sources, one per column."""
    u = rng.uniform(n * d).reshape(n, d) - 0.5
    return -np.sign(u) * np.log1p(-2.0 * np.abs(u))


def anisotropic_gaussian(rng: RngStream, n: int, d: int, exponent: float = 1.2,
                         rotate: bool = True) -> np.ndarray:
    """Zero-mean Gaussian rows with covariance eigenvalues proportional to i^-exponent.

    With ``rotate`` the eigenbasis is a random orthogonal matrix, so the
    columns are correlated.
    """
    lam = np.arange(1, d + 1, dtype=np.float64) ** -exponent
    x = rng.child("z").normal((n, d)) * np.sqrt(lam)
    if rotate:
        basis, _ = np.linalg.qr(rng.child("basis").normal((d, d)))
        x = x @ basis.T
    return x


GENERATORS = {"iid_laplace": iid_laplace, "anisotropic_gaussian": anisotropic_gaussian}


@dataclass(frozen=True)
class ProbeDataset:
    x: np.ndarray
    x_s: np.ndarray
    generator: str

    def __post_init__(self):
        if self.x.shape[0] != self.x_s.shape[0]:
            raise ProbeError("plaintext and scrambled row counts differ")


def scrambled_dataset(generator: str, n: int, d: int, seed: int, key_cfg: KeyConfig = KeyConfig()) -> ProbeDataset:
    rng = RngStream(seed).child("probe-data", generator, n, d)
    x = GENERATORS[generator](rng.child("x"), n, d)
    s = build_scrambler(d, key_cfg.mag_range, rng.child("phi"), use_s2=key_cfg.use_s2,
                        random_signs=key_cfg.random_signs, permute=key_cfg.permute_features)
    return ProbeDataset(x, apply_phi(x, s), generator)


# ---------------------------------------------------------------------------
# Neighborhood and distance probes


def _sq_norms(x):
    return np.einsum("ij,ij->i", x, x)


def knn_indices(x, k: int, chunk: int = 1024) -> np.ndarray:
    """Exact k nearest neighbors under L2, excluding the row itself.

    Ties are broken by row index so the result is deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 0 < k < n:
        raise ProbeError(f"k must be in [1, {n - 1}], got {k}")
    sq = _sq_norms(x)
    out = np.empty((n, k), dtype=np.int64)
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        d2 = sq[a:b, None] + sq[None, :] - 2.0 * (x[a:b] @ x.T)
        d2[np.arange(b - a), np.arange(a, b)] = np.inf
        part = np.argpartition(d2, k, axis=1)[:, : k + 1]
        for i in range(b - a):
            cand = part[i]
            order = np.lexsort((cand, d2[i, cand]))
            out[a + i] = cand[order[:k]]
    return out


def knn_overlap(x, x_s, k: int) -> float:
    """Mean fraction of each row's k nearest neighbors shared by both spaces."""
    x, x_s = np.asarray(x), np.asarray(x_s)
    if x.shape[0] != x_s.shape[0]:
        raise ProbeError("row counts differ")
    a, b = knn_indices(x, k), knn_indices(x_s, k)
    hits = sum(len(np.intersect1d(a[i], b[i], assume_unique=True)) for i in range(len(a)))
    return hits / (k * len(a))


@dataclass(frozen=True)
class Distortion:
    median: float
    iqr: float
    lo: float
    hi: float
    pairs: int


def distance_distortion(x, x_s, n_pairs: int = 4096, seed: int = 0) -> Distortion:
    """Spread of pairwise distance ratios d(x'_i, x'_j) / d(x_i, x_j) over sampled pairs."""
    x, x_s = np.asarray(x, dtype=np.float64), np.asarray(x_s, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ProbeError("need at least two rows")
    rng = RngStream(seed).child("pairs")
    i = np.floor(rng.child("i").uniform(n_pairs) * n).astype(np.int64)
    j = np.floor(rng.child("j").uniform(n_pairs) * (n - 1)).astype(np.int64)
    j = j + (j >= i)
    d0 = np.linalg.norm(x[i] - x[j], axis=1)
    keep = d0 > 0
    r = np.linalg.norm(x_s[i] - x_s[j], axis=1)[keep] / d0[keep]
    q1, med, q3 = np.percentile(r, [25, 50, 75])
    return Distortion(float(med), float(q3 - q1), float(r.min()), float(r.max()), int(keep.sum()))


# ---------------------------------------------------------------------------
# Linear algebra building blocks


def jacobi_eigh(a, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in ascending order and the matching eigenvectors as
    columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ProbeError("matrix must be square and symmetric")
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a[offdiag])
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect assignment for a square cost matrix.

    Shortest augmenting paths with row and column potentials, O(n^3).
    Returns ``col`` with row i assigned to column col[i].
    """
    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    if c.shape != (n, n):
        raise ProbeError("cost matrix must be square")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row (1-based) owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col[match[j] - 1] = j - 1
    return col


def abs_cos_matrix(a, b) -> np.ndarray:
    """|cos| between every column of ``a`` and every column of ``b``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0)
    if np.any(na == 0) or np.any(nb == 0):
        raise ProbeError("zero-norm component")
    return np.abs(a.T @ b) / np.outer(na, nb)


def hungarian_macs(s_est, s_true) -> float:
    """Mean |cos| over the optimal one-to-one matching of components (columns)."""
    s_est, s_true = np.asarray(s_est), np.asarray(s_true)
    if s_est.shape[1] != s_true.shape[1]:
        raise ProbeError("component counts differ")
    m = abs_cos_matrix(s_est, s_true)
    col = hungarian(1.0 - m)
    return float(np.mean(m[np.arange(len(col)), col]))


# ---------------------------------------------------------------------------
# FastICA


def whiten(x, eps: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Center the rows and map them to identity covariance."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / xc.shape[0]
    w, e = jacobi_eigh(cov)
    if w[0] <= eps * max(w[-1], 1e-300):
        raise ProbeError("covariance is rank deficient; cannot whiten")
    k = e / np.sqrt(w)
    return xc @ k, k


def _sym_decorrelate(w):
    lam, e = jacobi_eigh(w @ w.T)
    return (e / np.sqrt(lam)) @ e.T @ w


def fastica(x_mixed, n_comp: int | None = None, max_iter: int = 200, tol: float = 1e-6,
            seed: int = 0) -> np.ndarray:
    """Symmetric FastICA with a tanh contrast; returns estimated sources as columns."""
    z, _ = whiten(x_mixed)
    n, d = z.shape
    n_comp = d if n_comp is None else n_comp
    if n < n_comp or n_comp > d:
        raise ProbeError("not enough rows or dimensions for the requested components")
    w = _sym_decorrelate(RngStream(seed).child("ica-init").normal((n_comp, d)))
    for _ in range(max_iter):
        y = z @ w.T
        g = np.tanh(y)
        w_new = _sym_decorrelate(g.T @ z / n - (1.0 - g * g).mean(axis=0)[:, None] * w)
        lim = np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0))
        w = w_new
        if lim < tol:
            break
    return z @ w.T


def random_rotation(rng: RngStream, d: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    q, r = np.linalg.qr(rng.normal((d, d)))
    return q * np.sign(np.diag(r))


def random_guess_baseline(x_mixed, s_true, trials: int = 1000, seed: int = 0) -> tuple[float, float]:
    """MACS of random rotations of the whitened observations against the truth.

    Returns (mean, standard deviation) over ``trials``.
    """
    z, _ = whiten(x_mixed)
    rng = RngStream(seed).child("baseline")
    d = z.shape[1]
    scores = np.array([hungarian_macs(z @ random_rotation(rng.child(t), d), s_true) for t in range(trials)])
    return float(scores.mean()), float(scores.std())


@dataclass(frozen=True)
class IcaResult:
    macs: float
    baseline: float
    baseline_std: float


def ica_probe(ds: ProbeDataset, trials: int = 1000, seed: int = 0) -> IcaResult:
    est = fastica(ds.x_s, seed=seed)
    base, sd = random_guess_baseline(ds.x_s, ds.x, trials, seed)
    return IcaResult(hungarian_macs(est, ds.x), base, sd)


def matched_cos(x, x_s) -> float:
    """Hungarian-matched mean |cos| between plaintext and scrambled coordinates."""
    return hungarian_macs(x_s, x)


# ---------------------------------------------------------------------------
# Vocabulary matching


def sorted_l1_match(vocab_states, rows) -> np.ndarray:
    """Index of the nearest vocabulary row for each row under sorted-coordinate L1."""
    vs = np.sort(np.asarray(vocab_states, dtype=np.float64), axis=1)
    rs = np.sort(np.asarray(rows, dtype=np.float64), axis=1)
    out = np.empty(len(rs), dtype=np.int64)
    for i, r in enumerate(rs):
        out[i] = int(np.argmin(np.abs(vs - r).sum(axis=1)))
    return out


def vma_probe(vocab_states, scrambled_states, truth) -> float:
    """Fraction of scrambled rows whose sorted-L1 nearest vocabulary row is the true one."""
    return float(np.mean(sorted_l1_match(vocab_states, scrambled_states) == np.asarray(truth)))


def vma_trial(seed: int, vocab: int = 256, d: int = 64, n_rows: int = 512, mode: str = "full",
              key_cfg: KeyConfig = KeyConfig()) -> float:
    """Sorted-L1 hit rate for rows drawn from a synthetic vocabulary table.

    ``mode`` is ``full`` (feature scrambling by Phi plus a token shuffle),
    ``token_perm`` (token shuffle only) or ``identity``.
    """
    rng = RngStream(seed).child("vma", vocab, d)
    table = anisotropic_gaussian(rng.child("vocab"), vocab, d)
    truth = np.floor(rng.child("ids").uniform(n_rows) * vocab).astype(np.int64)
    rows = table[truth]
    if mode != "identity":
        order = np.argsort(rng.child("shuffle").uniform(n_rows), kind="stable")
        rows, truth = rows[order], truth[order]
    if mode == "full":
        s = build_scrambler(d, key_cfg.mag_range, rng.child("phi"), use_s2=key_cfg.use_s2,
                            random_signs=key_cfg.random_signs, permute=key_cfg.permute_features)
        rows = apply_phi(rows, s)
    elif mode not in ("token_perm", "identity"):
        raise ProbeError(f"unknown mode {mode!r}")
    return vma_probe(table, rows, truth)


def cos_trend(seed: int, ranges, n: int = 2048, d: int = 32) -> list[float]:
    """Matched |cos| between plaintext and scrambled coordinates per scaling range."""
    out = []
    for lo, hi in ranges:
        ds = scrambled_dataset("anisotropic_gaussian", n, d, seed, KeyConfig(mag_range=(lo, hi)))
        out.append(matched_cos(ds.x, ds.x_s))
    return out
