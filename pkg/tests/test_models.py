import hashlib
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedattn import models as M


def _dec(**kw):
    base = dict(vocab_size=64, d_model=64, n_heads=4, head_dim=16, n_layers=2, seed=0)
    base.update(kw)
    return M.init_model(M.ModelConfig(**base))


def _enc(**kw):
    return _dec(arch="encoder", **kw)


def test_same_config_same_weights():
    a, b = _dec(), _dec()
    assert np.array_equal(a.embed, b.embed)
    for la, lb in zip(a.layers, b.layers):
        for x, y in zip(asdict(la).values(), asdict(lb).values()):
            assert np.array_equal(x, y)


@pytest.mark.parametrize("field,kw", [
    ("d_model", dict(d_model=48)),
    ("head_dim", dict(head_dim=12, d_model=48)),
    ("vocab_size", dict(vocab_size=3)),
    ("n_layers", dict(n_layers=0)),
    ("arch", dict(arch="mixer")),
])
def test_config_errors_name_field(field, kw):
    base = dict(vocab_size=64, d_model=64, n_heads=4, head_dim=16, n_layers=2)
    base.update(kw)
    with pytest.raises(M.ConfigError) as e:
        M.ModelConfig(**base)
    assert e.value.field == field


def test_smoke_forward():
    m = _dec()
    h, seg = M.prefill(m, [5, 6, 7], [], M.centralized_attention)
    assert h.shape == (3, 64) and np.all(np.isfinite(h))
    assert seg.length == 3 and len(seg.k) == 2


def test_single_row_attends_to_itself():
    m = _dec(n_layers=1)
    h = M.embed_tokens(m, [9])
    q, k, v = M.layer_qkv(m, 0, h)
    out, _ = M.decoder_layer_forward(m, h, [], 0, M.centralized_attention)
    assert np.allclose(out, M.layer_finish(m, 0, h, [v[hd] for hd in range(4)]))


def test_overlapping_cache_rejected():
    m = _dec()
    _, seg = M.prefill(m, [5, 6, 7], [], M.centralized_attention)
    with pytest.raises(ValueError):
        M.decoder_layer_forward(m, M.embed_tokens(m, [8], 2), [seg], 0, M.centralized_attention, offset=2)


def _two_seg_layer(attn_fn):
    m = _dec()
    _, s0 = M.prefill(m, [5, 6, 7, 8], [], M.centralized_attention, 0, owner=1)
    _, s1 = M.prefill(m, [9, 10, 11], [s0], M.centralized_attention, 4, owner=2)
    h = M.embed_tokens(m, [12, 13], 7)
    return M.decoder_layer_forward(m, h, [s0, s1], 1, attn_fn, offset=7, local_owner=3)[0]


def test_shard_merge_provider_matches_monolithic():
    assert np.allclose(_two_seg_layer(M.shard_merge_attention), _two_seg_layer(M.centralized_attention), atol=1e-9)


def test_scrambled_provider_matches_monolithic():
    got = _two_seg_layer(M.ScrambledAttention(seed=4, request=1))
    assert np.allclose(got, _two_seg_layer(M.centralized_attention), atol=1e-8)


def test_greedy_decode_basics():
    m = _dec()
    assert M.greedy_decode(m, [5, 6], 0) == []
    a = M.greedy_decode(m, [5, 6, 7], 8)
    assert a == M.greedy_decode(m, [5, 6, 7], 8)
    assert len(a) <= 8 and all(t not in (M.CLS, M.SEP, M.PAD) for t in a)


def test_decode_providers_agree():
    m = _dec(n_layers=3)
    segs = [(1, list(range(4, 20))), (2, list(range(20, 30)))]
    ref = M.decode_with_trace(m, [30, 31], 16, M.centralized_attention, segments=segs, owner=3, ignore_eos=True)
    for fn in (M.shard_merge_attention, M.ScrambledAttention(seed=2, request=5)):
        tr = M.decode_with_trace(m, [30, 31], 16, fn, segments=segs, owner=3, ignore_eos=True)
        assert tr.tokens == ref.tokens
        assert max(np.abs(a - b).max() for a, b in zip(tr.states, ref.states)) <= 1e-8


def test_kv_cache_immutable():
    m = _dec()
    _, s0 = M.prefill(m, [5, 6, 7, 8], [], M.centralized_attention, 0, owner=1)

    def digest(seg):
        h = hashlib.sha256()
        for a in seg.k + seg.v:
            h.update(a.tobytes())
        return h.hexdigest()

    before = digest(s0)
    M.prefill(m, [9, 10, 11], [s0], M.ScrambledAttention(seed=1), 4, owner=2)
    assert digest(s0) == before


@settings(max_examples=60)
@given(st.integers(0, 2**20), st.sampled_from([1, 2, 4]), st.sampled_from([4, 8, 16]), st.integers(1, 3),
       st.booleans())
def test_activations_finite(seed, heads, d, layers, positional):
    cfg = M.ModelConfig(vocab_size=40, d_model=heads * d, n_heads=heads, head_dim=d, n_layers=layers,
                        seed=seed, positional=positional)
    m = M.init_model(cfg)
    ids = list(4 + np.random.default_rng(seed).integers(0, 36, 7))
    h, _ = M.prefill(m, ids, [], M.centralized_attention)
    assert np.all(np.isfinite(h))
    assert np.all(np.isfinite(M.final_logits(m, h)))


def test_rerank_score_properties():
    m = _enc()
    q, d = [5, 6, 7, 8], list(range(10, 30))
    s = M.rerank_score(m, q, d)
    assert s == M.rerank_score(m, q, d)
    assert abs(M.rerank_score(m, q, d, M.ScrambledAttention(seed=3), remote=True) - s) <= 1e-8
    with pytest.raises(ValueError):
        M.rerank_score(m, [], d)
    with pytest.raises(ValueError):
        M.rerank_score(_dec(), q, d)


def test_rerank_shuffled_doc_changes_score():
    m = _enc(positional=True)
    rng = np.random.default_rng(0)
    changed = 0
    for _ in range(10):
        q = list(rng.integers(4, 64, 6))
        d = list(rng.integers(4, 64, 20))
        shuffled = list(rng.permutation(d))
        changed += M.rerank_score(m, q, d) != M.rerank_score(m, q, shuffled)
    assert changed >= 9


def test_rerank_input_layout():
    ids, lq = M.rerank_input([7, 8], [9])
    assert ids.tolist() == [M.CLS, 7, 8, M.SEP, 9, M.SEP] and lq == 4
