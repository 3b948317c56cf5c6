import math

import numpy as np
import numpy.testing as npt
import pytest

from advtext.numerics import GradTape, finite_difference_grad
from advtext import model as mdl

CFG = mdl.ModelConfig(vocab_size=11, embed_dim=6, hidden_dim=8, num_classes=3, max_len=5)


@pytest.fixture
def params():
    return mdl.init_params(CFG, seed=0, reconstructor=True)


def rel_err(a, b):
    # floor the denominator at the finite-difference noise scale
    # (machine eps * |loss| / h ~ 1e-11 at h=1e-5), so near-zero entries
    # are compared absolutely
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------


def test_init_deterministic_per_seed():
    a = mdl.init_params(CFG, seed=7, reconstructor=True)
    b = mdl.init_params(CFG, seed=7, reconstructor=True)
    for name, arr in a.named_tensors().items():
        assert np.array_equal(arr, b.named_tensors()[name]), name


def test_init_weight_range(params):
    weight_matrices = [
        params.embedding, params.positional, params.w_query, params.w_key,
        params.w_value, params.ff_w, params.classifier, params.reconstructor.ff_w,
    ]
    for w in weight_matrices:
        assert np.abs(w).max() <= 0.05
    npt.assert_array_equal(params.ff_b, 0.0)
    npt.assert_array_equal(params.reconstructor.ff_b, 0.0)
    npt.assert_array_equal(params.reconstructor.norm_gain, 1.0)
    npt.assert_array_equal(params.reconstructor.norm_bias, 0.0)


def test_init_seeds_differ():
    a = mdl.init_params(CFG, seed=1)
    b = mdl.init_params(CFG, seed=2)
    assert not np.array_equal(a.embedding, b.embedding)


def test_config_validation():
    with pytest.raises(ValueError):
        mdl.ModelConfig(vocab_size=0, embed_dim=4, hidden_dim=4, num_classes=2, max_len=4)
    with pytest.raises(ValueError):
        mdl.ModelConfig(vocab_size=4, embed_dim=4, hidden_dim=4, num_classes=2, max_len=1)


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------


def test_embed_all_pad_rows(params):
    pad = 0
    out = mdl.embed([pad] * CFG.max_len, params)
    expected = params.embedding[pad] + params.positional
    npt.assert_array_equal(out, expected)


def test_embed_rejects_out_of_range(params):
    with pytest.raises(ValueError, match="out of range"):
        mdl.embed([0, CFG.vocab_size, 0, 0, 0], params)


def test_embed_gather_adjoint_counts_occurrences(params):
    # token 4 appears twice, token 3 once: grad rows accumulate per occurrence
    ids = [2, 4, 3, 4, 0]
    tape = GradTape()
    refs = mdl.register_params(tape, params)
    x = mdl.build_embed(tape, refs, ids)
    loss = tape.dot(x, tape.constant(np.ones((CFG.max_len, CFG.embed_dim))))
    g = tape.backward(loss, [refs["embedding"]])[refs["embedding"]]
    npt.assert_array_equal(g[4], 2.0 * np.ones(CFG.embed_dim))
    npt.assert_array_equal(g[3], np.ones(CFG.embed_dim))
    npt.assert_array_equal(g[1], np.zeros(CFG.embed_dim))


def test_embed_duplicate_token_gradient_matches_fd(params):
    ids = [2, 4, 3, 4, 0]
    label, mask = 1, [1, 1, 1, 1, 0]

    def loss_at(emb):
        p = params.replace_tensors({"embedding": emb})
        tape = GradTape()
        refs = mdl.register_params(tape, p)
        x = mdl.build_embed(tape, refs, ids)
        _, sent = mdl.build_encode(tape, refs, x, mask)
        return float(tape.value(mdl.build_classification_loss(tape, refs, sent, label)))

    tape = GradTape()
    refs = mdl.register_params(tape, params)
    x = mdl.build_embed(tape, refs, ids)
    _, sent = mdl.build_encode(tape, refs, x, mask)
    loss = mdl.build_classification_loss(tape, refs, sent, label)
    analytic = tape.backward(loss, [refs["embedding"]])[refs["embedding"]]
    numeric = finite_difference_grad(loss_at, params.embedding, h=1e-5)
    assert rel_err(analytic, numeric) < 1e-4


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def test_encode_requires_cls_mask(params):
    x = mdl.embed([2, 3, 4, 0, 0], params)
    with pytest.raises(ValueError, match="CLS"):
        mdl.encode(x, [0, 1, 1, 0, 0], params)


def test_encode_sentence_is_cls_row(params):
    x = mdl.embed([2, 3, 4, 0, 0], params)
    enc = mdl.encode(x, [1, 1, 1, 0, 0], params)
    npt.assert_array_equal(enc.sentence_rep, enc.token_hidden[0])


def test_encode_permutation_symmetry(params):
    # swapping two non-CLS rows of the input embeddings and their mask entries
    # permutes token_hidden rows identically
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(CFG.max_len, CFG.embed_dim))
    mask = [1, 1, 1, 1, 0]
    enc = mdl.encode(x, mask, params)

    perm = [0, 3, 2, 1, 4]
    x_p = x[perm]
    mask_p = [mask[i] for i in perm]
    enc_p = mdl.encode(x_p, mask_p, params)
    npt.assert_allclose(enc_p.token_hidden, enc.token_hidden[perm], atol=1e-12)


def test_encode_attention_ignores_masked_keys(params):
    x = mdl.embed([2, 3, 4, 5, 6], params)
    mask = [1, 1, 1, 0, 0]
    attn = mdl.attention_weights(x, mask, params)
    npt.assert_allclose(attn.sum(axis=1), np.ones(CFG.max_len), atol=1e-12)
    npt.assert_array_equal(attn[:, 3:], np.zeros((CFG.max_len, 2)))
    npt.assert_allclose(attn[:, :3].sum(axis=1), np.ones(CFG.max_len), atol=1e-12)


def test_encode_mask_soundness(params):
    # changing the embedding at a masked-out position leaves sentence_rep unchanged
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(CFG.max_len, CFG.embed_dim))
    mask = [1, 1, 0, 0, 0]
    base = mdl.encode(x, mask, params).sentence_rep
    x2 = x.copy()
    x2[3] += rng.uniform(-5, 5, size=CFG.embed_dim)
    moved = mdl.encode(x2, mask, params).sentence_rep
    npt.assert_allclose(moved, base, atol=1e-12)


def test_encode_finite_for_bounded_inputs(params):
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.uniform(-10, 10, size=(CFG.max_len, CFG.embed_dim))
        enc = mdl.encode(x, [1, 1, 1, 1, 1], params)
        assert np.all(np.isfinite(enc.token_hidden))


# ---------------------------------------------------------------------------
# classify
# ---------------------------------------------------------------------------


def test_classify_zero_weights_uniform(params):
    p = params.replace_tensors({"classifier": np.zeros_like(params.classifier)})
    probs = mdl.classify(np.ones(CFG.hidden_dim), p)
    npt.assert_allclose(probs, np.full(CFG.num_classes, 1.0 / CFG.num_classes), atol=1e-15)


def test_classify_probability_vector(params):
    rng = np.random.default_rng(3)
    for _ in range(10):
        probs = mdl.classify(rng.standard_normal(CFG.hidden_dim) * 10, params)
        assert abs(probs.sum() - 1.0) < 1e-12
        assert np.all(probs >= 0)


def test_classify_scaling_preserves_argmax(params):
    rng = np.random.default_rng(4)
    h = rng.standard_normal(CFG.hidden_dim)
    p2 = params.replace_tensors({"classifier": 2.0 * params.classifier})
    assert np.argmax(mdl.classify(h, params)) == np.argmax(mdl.classify(h, p2))


# ---------------------------------------------------------------------------
# reconstructor
# ---------------------------------------------------------------------------


def test_reconstruct_logits_shape(params):
    rng = np.random.default_rng(5)
    th = rng.standard_normal((CFG.max_len, CFG.hidden_dim))
    logits = mdl.reconstruct_logits(th, params)
    assert logits.shape == (CFG.max_len, CFG.vocab_size)


def test_reconstruct_identical_rows_identical_logits(params):
    rng = np.random.default_rng(6)
    th = rng.standard_normal((CFG.max_len, CFG.hidden_dim))
    th[2] = th[1]
    logits = mdl.reconstruct_logits(th, params)
    npt.assert_array_equal(logits[1], logits[2])


def test_reconstruct_requires_head():
    base = mdl.init_params(CFG, seed=0, reconstructor=False)
    with pytest.raises(ValueError, match="no reconstructor head"):
        mdl.reconstruct_logits(np.zeros((CFG.max_len, CFG.hidden_dim)), base)


def test_tied_embedding_gradient_through_both_paths(params):
    # 3-token example: d(reconstruction loss)/dE flows through the embedding
    # gather AND the tied output projection; finite differences see the sum
    ids = [2, 5, 7, 0, 0]
    mask = [1, 1, 1, 0, 0]

    def build(p):
        tape = GradTape()
        refs = mdl.register_params(tape, p)
        x = mdl.build_embed(tape, refs, ids)
        th, _ = mdl.build_encode(tape, refs, x, mask)
        loss = mdl.build_reconstruction_loss(tape, refs, th, ids, mask)
        return tape, refs, loss

    tape, refs, loss = build(params)
    analytic = tape.backward(loss, [refs["embedding"]])[refs["embedding"]]

    # the projection path alone gives gradient on every vocabulary row;
    # the gather path concentrates extra mass on the used rows
    assert np.abs(analytic).max() > 0
    assert np.count_nonzero(np.abs(analytic).sum(axis=1)) == CFG.vocab_size

    def loss_at(emb):
        t, _, l = build(params.replace_tensors({"embedding": emb}))
        return float(t.value(l))

    numeric = finite_difference_grad(loss_at, params.embedding, h=1e-5)
    assert rel_err(analytic, numeric) < 1e-4


def test_weight_tying_no_hidden_copy(params):
    # the projection is the same storage as the embedding: after changing E,
    # reconstruct logits move accordingly and named_tensors has no V x d_e
    # output matrix besides "embedding"
    rng = np.random.default_rng(7)
    th = rng.standard_normal((CFG.max_len, CFG.hidden_dim))
    before = mdl.reconstruct_logits(th, params)
    bumped = params.replace_tensors({"embedding": params.embedding + 0.01})
    after = mdl.reconstruct_logits(th, bumped)
    assert not np.array_equal(before, after)
    names = set(params.named_tensors())
    assert names == {
        "embedding", "positional", "w_query", "w_key", "w_value",
        "ff_w", "ff_b", "classifier",
        "rec.ff_w", "rec.ff_b", "rec.norm_gain", "rec.norm_bias",
    }


def test_reconstruction_loss_uniform_is_log_v(params):
    logits = np.zeros((CFG.max_len, CFG.vocab_size))
    loss = mdl.reconstruction_loss(logits, [2, 3, 4, 0, 0], [1, 1, 1, 0, 0])
    npt.assert_allclose(loss, math.log(CFG.vocab_size), atol=1e-12)


def test_reconstruction_loss_saturated(params):
    ids = [2, 3, 4, 0, 0]
    logits = np.full((CFG.max_len, CFG.vocab_size), -1000.0)
    for pos, tok in enumerate(ids):
        logits[pos, tok] = 1000.0
    loss = mdl.reconstruction_loss(logits, ids, [1, 1, 1, 0, 0])
    assert loss < 1e-12


def test_reconstruction_loss_ignores_cls_logits(params):
    rng = np.random.default_rng(8)
    ids = [2, 3, 4, 0, 0]
    mask = [1, 1, 1, 0, 0]
    logits = rng.standard_normal((CFG.max_len, CFG.vocab_size))
    base = mdl.reconstruction_loss(logits, ids, mask)
    logits2 = logits.copy()
    logits2[0] = rng.standard_normal(CFG.vocab_size) * 10
    assert mdl.reconstruction_loss(logits2, ids, mask) == base
    with pytest.raises(ValueError, match="no positions"):
        mdl.reconstruction_loss(logits, ids, [1, 0, 0, 0, 0])


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


def test_param_count_hand_inventory():
    cfg = mdl.ModelConfig(vocab_size=200, embed_dim=32, hidden_dim=32, num_classes=2, max_len=16)
    base = mdl.init_params(cfg, seed=0)
    rar = mdl.init_params(cfg, seed=0, reconstructor=True)
    # hand-summed shape inventory
    expected_base = (
        200 * 32      # embedding
        + 16 * 32     # positional
        + 3 * 32 * 32 # attention projections
        + 32 * 32 + 32  # feed-forward + bias
        + 2 * 32      # classifier
    )
    rec_extra = 32 * 32 + 32 + 32 + 32  # FF1 + bias + norm gain/bias; tied projection adds 0
    assert mdl.param_count(base) == expected_base
    assert mdl.param_count(rar) == expected_base + rec_extra
    assert mdl.param_count(rar) > mdl.param_count(base)


def test_param_count_vocab_growth_only_embeddings():
    small = mdl.ModelConfig(vocab_size=50, embed_dim=32, hidden_dim=32, num_classes=2, max_len=16)
    big = mdl.ModelConfig(vocab_size=80, embed_dim=32, hidden_dim=32, num_classes=2, max_len=16)
    n_small = mdl.param_count(mdl.init_params(small, 0, reconstructor=True))
    n_big = mdl.param_count(mdl.init_params(big, 0, reconstructor=True))
    assert n_big - n_small == (80 - 50) * 32


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------


def test_classification_gradients_all_groups(params):
    # 4-token example; every parameter group vs central finite differences.
    # Perturb away from the fresh init so no gradient is degenerately small.
    rng = np.random.default_rng(99)
    params = params.replace_tensors(
        {n: a + rng.uniform(-0.3, 0.3, a.shape) for n, a in params.named_tensors().items()}
    )
    ids = [2, 5, 7, 9, 3]
    mask = [1, 1, 1, 1, 1]
    label = 2

    def build(p):
        tape = GradTape()
        refs = mdl.register_params(tape, p)
        x = mdl.build_embed(tape, refs, ids)
        _, sent = mdl.build_encode(tape, refs, x, mask)
        return tape, refs, mdl.build_classification_loss(tape, refs, sent, label)

    tape, refs, loss = build(params)
    grads = tape.backward(loss, refs.values())

    for name in params.named_tensors():
        analytic = grads[refs[name]]

        def loss_at(values, name=name):
            t, _, l = build(params.replace_tensors({name: values}))
            return float(t.value(l))

        numeric = finite_difference_grad(loss_at, params.named_tensors()[name], h=1e-5)
        assert rel_err(analytic, numeric) < 1e-4, name


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path, params):
    path = tmp_path / "model.ckpt"
    mdl.save_checkpoint(path, CFG, params)
    cfg2, params2 = mdl.load_checkpoint(path)
    assert cfg2 == CFG
    for name, arr in params.named_tensors().items():
        restored = params2.named_tensors()[name]
        assert arr.dtype == restored.dtype == np.float64
        assert np.array_equal(arr, restored), name
        assert arr.tobytes() == restored.tobytes(), name


def test_checkpoint_base_model_has_no_reconstructor(tmp_path):
    base = mdl.init_params(CFG, seed=1)
    path = tmp_path / "base.ckpt"
    mdl.save_checkpoint(path, CFG, base)
    _, restored = mdl.load_checkpoint(path)
    assert restored.reconstructor is None


def test_save_tensors_meta_round_trip(tmp_path):
    path = tmp_path / "blob.bin"
    tensors = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(3.5)}
    mdl.save_tensors(path, tensors, {"step": "17", "mode": "rar"})
    loaded, meta = mdl.load_tensors(path)
    assert meta == {"step": "17", "mode": "rar"}
    npt.assert_array_equal(loaded["a"], tensors["a"])
    npt.assert_array_equal(loaded["s"], tensors["s"])
    assert loaded["s"].shape == ()


def test_load_tensors_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a container")
    with pytest.raises(ValueError):
        mdl.load_tensors(path)
