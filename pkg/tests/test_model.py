"""Model semantics: routing, attention, generation, counting.

The headline oracle is `straightline_forward`, a from-scratch numpy
reimplementation of the forward pass with no graph machinery.
"""

import numpy as np
import pytest

from conftest import SMALL, TINY, random_sequence
from monomoe import model as M
from monomoe import synthdata as sd
from monomoe import tokenizers as tok
from monomoe.tensor import Tensor, no_grad


def make_model(cfg=TINY, seed=7):
    m = M.MMoEModel(cfg, seed=seed)
    M.init_visual_experts(m)
    return m


# ---------------------------------------------------------------------------
# straight-line duplicate implementation (no Tensor graph anywhere)
# ---------------------------------------------------------------------------

def straightline_forward(model, emb, modality):
    cfg = model.cfg
    n = emb.shape[0]
    hd = cfg.head_dim

    def rn(v, g):
        r = 1.0 / np.sqrt((v * v).mean(axis=-1, keepdims=True) + cfg.norm_eps)
        return v * r * g

    def sigmoid(v):
        z = np.exp(-np.abs(v))
        return np.where(v >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    inv = cfg.rope_base ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
    ang = np.outer(np.arange(n, dtype=np.float64), inv)
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1).astype(np.float32)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=1).astype(np.float32)
    bias = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)

    def rope(v):
        half = hd // 2
        rot = np.concatenate([-v[:, half:], v[:, :half]], axis=1)
        return v * cos + rot * sin

    x = emb.copy()
    for lp in model.layers:
        xn = rn(x, lp.attn_norm.data)
        q, k, v = xn @ lp.wq.data, xn @ lp.wk.data, xn @ lp.wv.data
        heads = []
        for h in range(cfg.heads):
            sl = slice(h * hd, (h + 1) * hd)
            qh, kh = rope(q[:, sl]), rope(k[:, sl])
            scores = qh @ kh.T / np.sqrt(hd) + bias
            scores = scores - scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            a = e / e.sum(axis=-1, keepdims=True)
            heads.append(a @ v[:, sl])
        x = x + np.concatenate(heads, axis=1) @ lp.wo.data

        xn = rn(x, lp.ffn_norm.data)
        y = np.empty_like(xn)
        for row in range(n):
            wg, wu, wd = lp.ffn_v if modality[row] else lp.ffn_t
            r = xn[row]
            g = r @ wg.data
            y[row] = ((g * sigmoid(g)) * (r @ wu.data)) @ wd.data
        x = x + y
    return rn(x, model.final_norm.data) @ model.head_w.data


def test_forward_matches_straightline(rng):
    model = make_model()
    # perturb the visual expert so routing actually matters
    for lp in model.layers:
        for t in lp.ffn_v:
            t.data += rng.normal(0, 0.01, t.data.shape).astype(np.float32)
    for _ in range(5):
        seq = random_sequence(rng, int(rng.integers(2, 12)), TINY.dim)
        got = M.model_forward(model, seq).data
        want = straightline_forward(model, seq.embeddings.data, seq.modality)
        assert np.abs(got - want).max() < 1e-6


# ---------------------------------------------------------------------------
# mmoe dispatch
# ---------------------------------------------------------------------------

def test_mmoe_all_text_equals_plain_ffn(rng):
    model = make_model()
    lp = model.layers[0]
    x = Tensor(rng.standard_normal((9, TINY.dim)).astype(np.float32))
    from monomoe.tensor import swiglu_ffn
    plain = swiglu_ffn(x, *lp.ffn_t, row_stable=True)
    routed = M.mmoe_forward(x, np.zeros(9, dtype=bool), lp)
    assert np.array_equal(plain.data, routed.data)


def test_mmoe_copied_experts_mask_independent(rng):
    model = make_model()  # ffn_v freshly copied from ffn_t
    lp = model.layers[0]
    x = Tensor(rng.standard_normal((11, TINY.dim)).astype(np.float32))
    base = M.mmoe_forward(x, np.zeros(11, dtype=bool), lp).data
    for _ in range(10):
        mask = rng.random(11) < rng.random()
        out = M.mmoe_forward(x, mask, lp).data
        assert np.array_equal(base, out)


def test_mmoe_matches_per_row_dispatch_oracle(rng):
    model = make_model()
    lp = model.layers[1]
    for t in lp.ffn_v:
        t.data += 0.05
    x = rng.standard_normal((8, TINY.dim)).astype(np.float32)
    mask = rng.random(8) < 0.5
    got = M.mmoe_forward(Tensor(x), mask, lp).data

    # oracle: its own routing loop, one expert evaluation per group; the
    # scalar nonlinearity is shared so the comparison is bit-exact
    def expert(rows, which):
        wg, wu, wd = which
        g = np.einsum("ij,jk->ik", rows, wg.data, optimize=False)
        z = np.exp(-np.abs(g))
        s = np.where(g >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        u = np.einsum("ij,jk->ik", rows, wu.data, optimize=False)
        return np.einsum("ij,jk->ik", g * s * u, wd.data, optimize=False)

    want = np.empty_like(got)
    want[mask] = expert(x[mask], lp.ffn_v)
    want[~mask] = expert(x[~mask], lp.ffn_t)
    assert np.array_equal(got, want)


def test_routing_partition_counters(rng):
    model = make_model()
    for _ in range(5):
        n = int(rng.integers(3, 20))
        seq = random_sequence(rng, n, TINY.dim)
        routing = []
        M.model_forward(model, seq, routing=routing)
        assert len(routing) == TINY.layers
        for nv, nt in routing:
            assert nv + nt == n
            assert nv == int(seq.modality.sum())


def test_flop_accounting_single_expert_cost(rng):
    model = make_model()
    n = 10
    seq = random_sequence(rng, n, TINY.dim)
    routing = []
    M.model_forward(model, seq, routing=routing)
    spent = M.mmoe_dispatch_flops(routing, TINY)
    one_expert_all_rows = TINY.layers * n * M.ffn_flops_per_row(TINY)
    assert spent == one_expert_all_rows


# ---------------------------------------------------------------------------
# decoder layer
# ---------------------------------------------------------------------------

def test_layer_identity_when_outputs_zeroed(rng):
    model = make_model()
    lp = model.layers[0]
    lp.wo.data[...] = 0.0
    lp.ffn_t[2].data[...] = 0.0
    lp.ffn_v[2].data[...] = 0.0
    x = Tensor(rng.standard_normal((5, TINY.dim)).astype(np.float32))
    out = M.decoder_layer(x, np.zeros(5, dtype=bool), lp, TINY)
    assert np.array_equal(out.data, x.data)


def test_single_token_closed_form(rng):
    model = make_model()
    lp = model.layers[0]
    x = rng.standard_normal((1, TINY.dim)).astype(np.float32)

    def rn(v, g):
        return v / np.sqrt((v * v).mean(-1, keepdims=True) + TINY.norm_eps) * g

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    # attention over a single position is the identity mix: out = (xn @ wv) @ wo
    h1 = x + (rn(x, lp.attn_norm.data) @ lp.wv.data) @ lp.wo.data
    xn = rn(h1, lp.ffn_norm.data)
    g = xn @ lp.ffn_t[0].data
    want = h1 + ((g * sig(g)) * (xn @ lp.ffn_t[1].data)) @ lp.ffn_t[2].data

    got = M.decoder_layer(Tensor(x), np.zeros(1, dtype=bool), lp, TINY)
    assert np.abs(got.data - want).max() < 1e-6


def test_eval_mode_deterministic(rng):
    model = make_model()
    seq = random_sequence(rng, 9, TINY.dim)
    a = M.model_forward(model, seq).data
    b = M.model_forward(model, seq).data
    assert np.array_equal(a, b)


def test_drop_path_training_only():
    cfg = M.ModelConfig(**{**TINY.to_dict(), "drop_path": 0.9})
    model = M.MMoEModel(cfg, seed=3)
    M.init_visual_experts(model)
    r = np.random.default_rng(5)
    seq = random_sequence(np.random.default_rng(1), 6, cfg.dim)
    eval_out = M.model_forward(model, seq).data
    train_out = M.model_forward(model, seq, train=True, rng=r).data
    assert not np.array_equal(eval_out, train_out)
    # same training seed twice is bit-identical
    again = M.model_forward(model, seq, train=True,
                            rng=np.random.default_rng(5)).data
    assert np.array_equal(train_out, again)


# ---------------------------------------------------------------------------
# model_forward properties
# ---------------------------------------------------------------------------

def test_expert_init_relabeling_equivalence(rng):
    model = make_model()  # experts freshly copied
    seq = random_sequence(rng, 14, TINY.dim)
    base = M.model_forward(model, seq).data
    for _ in range(8):
        seq.modality = rng.random(14) < rng.random()
        assert np.array_equal(base, M.model_forward(model, seq).data)


def test_causality_future_tokens_do_not_leak(rng):
    model = make_model()
    n, s = 12, 7
    seq = random_sequence(rng, n, TINY.dim, n_visual=4)
    before = M.model_forward(model, seq).data
    seq.embeddings.data[s:] = rng.standard_normal((n - s, TINY.dim)).astype(np.float32)
    after = M.model_forward(model, seq).data
    assert np.array_equal(before[:s], after[:s])
    assert not np.array_equal(before[s:], after[s:])


def test_capacity_error():
    model = make_model()
    seq = random_sequence(np.random.default_rng(2), TINY.max_seq + 1, TINY.dim)
    with pytest.raises(M.CapacityError):
        M.model_forward(model, seq)


def test_text_path_purity_gradients():
    model = M.MMoEModel(SMALL, seed=11)
    M.init_visual_experts(model)
    sample = sd.gen_text_only(99, 0)
    seq = M.encode_sample(model, sample.prompt, sample.response, None, 32)
    loss = M.sequence_loss(model, seq)
    loss.backward()
    for name, t, group in model.parameters():
        if group in M.VISUAL_GROUPS:
            assert t.grad is None or not t.grad.any(), name
        elif group in (M.TEXT_EMBED, M.ATTN, M.FFN_T, M.NORM, M.HEAD):
            assert t.grad is not None and t.grad.any(), name


def test_text_only_matches_pure_text_lm(rng):
    # identical logits to a forward that never consults the dispatch
    model = make_model()
    seq = random_sequence(rng, 10, TINY.dim, n_visual=0)
    routed = M.model_forward(model, seq).data
    want = straightline_forward(model, seq.embeddings.data,
                                np.zeros(10, dtype=bool))
    assert np.abs(routed - want).max() < 1e-6


# ---------------------------------------------------------------------------
# expert initialization
# ---------------------------------------------------------------------------

def test_init_visual_experts_no_aliasing():
    model = M.MMoEModel(TINY, seed=1)
    M.init_visual_experts(model)
    lp = model.layers[0]
    assert np.array_equal(lp.ffn_v[0].data, lp.ffn_t[0].data)
    lp.ffn_v[0].data[0, 0] += 1.0
    assert not np.array_equal(lp.ffn_v[0].data, lp.ffn_t[0].data)


def test_expert_param_delta_is_ffn_t_size():
    counts = M.group_param_counts(M.MMoEModel(TINY, seed=1))
    assert counts[M.FFN_V] == counts[M.FFN_T]
    assert counts[M.FFN_T] == TINY.layers * 3 * TINY.dim * TINY.ffn_dim


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def greedy_uncached(model, seq, steps):
    """Reference decoder: full recompute per step, no cache anywhere."""
    from monomoe.tensor import concat_rows, gather_rows
    ids = []
    emb, modality = seq.embeddings, seq.modality.copy()
    with no_grad():
        for _ in range(steps):
            cur = tok.MultimodalSequence(
                embeddings=emb, modality=modality,
                loss_mask=np.zeros(len(modality), dtype=bool),
                token_ids=np.zeros(len(modality), dtype=np.int64))
            logits = M.model_forward(model, cur).data
            nxt = int(np.argmax(logits[-1]))
            ids.append(nxt)
            emb = concat_rows([emb, gather_rows(model.tok_embed, [nxt])])
            modality = np.concatenate([modality, [False]])
    return ids


def test_generate_cache_matches_uncached(rng):
    model = make_model()
    for _ in range(20):
        n = int(rng.integers(2, 10))
        seq = random_sequence(rng, n, TINY.dim)
        fast = M.generate(model, seq, max_new=6, stop_at_eos=False)
        slow = greedy_uncached(model, seq, 6)
        assert fast.token_ids == slow


def test_generate_zero_tokens(rng):
    model = make_model()
    seq = random_sequence(rng, 5, TINY.dim)
    out = M.generate(model, seq, max_new=0)
    assert out.token_ids == [] and out.step_seconds == []
    assert out.prefill_seconds > 0


def test_temperature_zero_equals_greedy(rng):
    model = make_model()
    seq = random_sequence(rng, 6, TINY.dim)
    a = M.generate(model, seq, max_new=5, temperature=0.0, stop_at_eos=False)
    b = M.generate(model, seq, max_new=5, stop_at_eos=False)
    assert a.token_ids == b.token_ids


def test_generate_truncates_at_capacity(rng):
    cfg = M.ModelConfig(**{**TINY.to_dict(), "max_seq": 8})
    model = M.MMoEModel(cfg, seed=2)
    M.init_visual_experts(model)
    seq = random_sequence(rng, 6, cfg.dim)
    out = M.generate(model, seq, max_new=10, stop_at_eos=False)
    assert out.truncated
    assert len(out.token_ids) == 3  # 6 prompt + 3 generated hits max_seq 8 + 1

    with pytest.raises(M.CapacityError):
        M.generate(model, random_sequence(rng, 9, cfg.dim), max_new=1)


def test_cache_length_bookkeeping(rng):
    model = make_model()
    cache = M.KVCache.empty(TINY, 16)
    seq = random_sequence(rng, 5, TINY.dim)
    with no_grad():
        M._forward_cached(model, seq.embeddings, seq.modality, cache)
    assert cache.length == 5
    with no_grad():
        M._forward_cached(model, Tensor(np.zeros((1, TINY.dim), dtype=np.float32)),
                          np.array([False]), cache)
    assert cache.length == 6


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------

def test_attention_maps_rows_normalized(rng):
    model = make_model()
    n = 11
    seq = random_sequence(rng, n, TINY.dim)
    maps = M.attention_maps(model, seq)
    assert maps.shape == (TINY.layers, TINY.heads, n, n)
    np.testing.assert_allclose(maps.sum(axis=-1), 1.0, atol=1e-5)
    # first position attends only to itself
    np.testing.assert_allclose(maps[:, :, 0, 0], 1.0, atol=1e-6)
    assert np.abs(maps[:, :, 0, 1:]).max() < 1e-8
    # strictly causal: no weight above the diagonal
    for li in range(TINY.layers):
        for h in range(TINY.heads):
            assert np.abs(np.triu(maps[li, h], k=1)).max() < 1e-8


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def group_counts_from_config(cfg):
    # independent shape arithmetic
    d, e, f = cfg.dim, cfg.vis_dim, cfg.ffn_dim
    return {
        M.TEXT_EMBED: cfg.vocab * d,
        M.PATCH_EMBED: cfg.patch_stride ** 2 * 3 * e + e,
        M.VIS_PE: cfg.pe_grid ** 2 * e,
        M.VIS_PROJ: e * d + d + d * d + d,
        M.ATTN: cfg.layers * 4 * d * d,
        M.FFN_T: cfg.layers * 3 * d * f,
        M.FFN_V: cfg.layers * 3 * d * f,
        M.NORM: cfg.layers * 2 * d + d,
        M.HEAD: d * cfg.vocab,
    }


def test_group_counts_match_shape_arithmetic():
    model = M.MMoEModel(SMALL, seed=0)
    assert M.group_param_counts(model) == group_counts_from_config(SMALL)


def test_paper_scale_visual_additions():
    # visual additions on the full-scale config are the reported ~1.2B
    counts = group_counts_from_config(M.PAPER_CONFIG)
    visual = sum(counts[g] for g in M.VISUAL_GROUPS)
    assert abs(visual - 1.2e9) / 1.2e9 < 0.03


def test_activated_partition_identity():
    model = M.MMoEModel(SMALL, seed=0)
    counts = M.group_param_counts(model)
    stats = M.count_params(model, "text")
    visual = sum(counts[g] for g in M.VISUAL_GROUPS)
    assert stats["activated"] + visual == stats["total"]
    assert M.count_params(model, "multimodal")["activated"] == stats["total"]


# ---------------------------------------------------------------------------
# clone
# ---------------------------------------------------------------------------

def test_clone_is_deep():
    model = make_model()
    twin = model.clone()
    for (na, ta, ga), (nb, tb, gb) in zip(model.parameters(), twin.parameters()):
        assert na == nb and ga == gb
        assert np.array_equal(ta.data, tb.data)
        assert ta.data is not tb.data
    twin.head_w.data[0, 0] += 1.0
    assert not np.array_equal(model.head_w.data, twin.head_w.data)
