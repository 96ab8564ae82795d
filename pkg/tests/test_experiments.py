import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedattn import experiments as X
from fedattn import models as M


def _lev_oracle(a, b):
    """Memoised recursive edit distance."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(go(i - 1, j) + 1, go(i, j - 1) + 1, go(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return go(len(a), len(b))


@given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8))
def test_edit_distance_oracle(a, b):
    assert X.edit_distance(a, b) == _lev_oracle(tuple(a), tuple(b))


def test_random_tokens_range_and_determinism():
    from fedattn.tensor_core import RngStream

    t = X.random_tokens(RngStream(0), 500, 64)
    assert min(t) >= M.N_SPECIAL and max(t) < 64
    assert t == X.random_tokens(RngStream(0), 500, 64)


def test_workload_corpora_layout():
    corpora, q = X.workload_corpora(256, 32, 64, placement={1: 5, 2: 5})
    assert len(q) == 32 and sorted(corpora) == [1, 2]
    assert all(len(d.ids) == 64 for o in corpora for d in corpora[o])
    assert corpora[2][3].doc_id == 2003


def test_rerank_sweep_deterministic():
    rr = M.init_model(M.ModelConfig(arch="encoder", seed=7))
    reqs = X.synthetic_rerank_requests(2, 64, n_docs=4)
    a = X.rerank_quant_sweep(rr, reqs, (4,))
    assert a == X.rerank_quant_sweep(rr, reqs, (4,))
    assert len(a) == 1 and 0 <= a[0].acc1 <= 1


def test_ablation_without_quantization_agrees():
    model = M.init_model(M.ModelConfig(seed=3))
    for mode in ("S1_and_S2", "S1_only"):
        row = X.decode_quant_ablation(model, range(2), bits=None, mode=mode, ctx_len=16, query_len=4, max_new=4)
        assert row.token_agreement == 1.0 and row.logit_deviation < 1e-8
    with pytest.raises(ValueError):
        X.decode_quant_ablation(model, range(1), mode="S2_only")


def test_stability_plain_and_structured_small():
    errs = X.stability_errors("structured", 64, d=32, draws=2)
    plain = X.stability_errors("plain", 64, d=32, draws=1)
    assert all(0 < e < 0.2 for e in errs) and 0 < plain[0] < 0.2
    with pytest.raises(ValueError):
        X.stability_errors("circulant", 64, d=32)


def test_anisotropic_qkv_logit_scale():
    from fedattn.tensor_core import RngStream

    q, k, v = X.anisotropic_qkv(RngStream(0), 512, 64, logit_std=2.0)
    assert np.std(q @ k.T / np.sqrt(64)) == pytest.approx(2.0, rel=1e-6)
