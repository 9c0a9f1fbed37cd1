"""Transformer invariants: causality, mask semantics, training sanity."""

import numpy as np
import pytest

from midec import model as md
from midec import tensorcore as tc
from midec.errors import InvalidConfigError, InvalidInputError, SequenceTooLongError

from helpers import reference_forward

SMALL = md.ModelConfig(
    vocab_size=48, n_visual=6, d_model=32, n_heads=4, d_head=8,
    n_layers=3, max_seq=40, purify_layer=1, patch_dim=12,
)


def _setup(seed=0, config=SMALL):
    rng = tc.Rng(seed)
    params = md.init_lvlm(config, rng.split("params"))
    visual = rng.split("vis").normal((config.n_visual, config.patch_dim))
    prompt = list(rng.split("prompt").integers(0, config.vocab_size, size=3))
    generated = list(rng.split("gen").integers(0, config.vocab_size, size=5))
    return params, visual, prompt, generated


def test_forward_shapes_and_layout():
    params, visual, prompt, generated = _setup()
    trace = md.forward(params, SMALL, visual, prompt, generated)
    assert trace.logits.shape == (SMALL.vocab_size,)
    assert len(trace.attention) == SMALL.n_layers
    n = SMALL.n_visual + len(prompt) + len(generated)
    for a in trace.attention:
        assert a.shape == (SMALL.n_heads, n, n)
    assert trace.layout == md.SeqLayout(SMALL.n_visual, 3, 5)


def test_attention_rows_normalized_and_causal():
    params, visual, prompt, generated = _setup(1)
    trace = md.forward(params, SMALL, visual, prompt, generated)
    for a in trace.attention:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)
        upper = np.triu_indices(a.shape[1], k=1)
        assert np.all(a[:, upper[0], upper[1]] == 0.0)


def test_all_ones_mask_is_identity():
    params, visual, prompt, generated = _setup(2)
    plain = md.forward(params, SMALL, visual, prompt, generated)
    masked = md.forward(params, SMALL, visual, prompt, generated,
                        mask=md.all_ones_mask(SMALL.n_visual))
    np.testing.assert_array_equal(plain.logits, masked.logits)


def test_hard_mask_matches_physical_removal():
    # log-mask forward vs the independent rebuild-sequence oracle
    for seed in range(6):
        params, visual, prompt, generated = _setup(seed)
        rng = tc.Rng(seed + 100)
        keep = np.ones(SMALL.n_visual)
        drop = rng.choice(SMALL.n_visual, size=2, replace=False)
        keep[drop] = 0.0
        masked = md.forward(params, SMALL, visual, prompt, generated,
                            mask=md.VisualMask(keep.astype(np.float32), hard=True))
        oracle = reference_forward(params, SMALL, visual, prompt + generated,
                                   keep_visual=keep.astype(bool))
        assert np.max(np.abs(masked.logits - oracle)) < 1e-5


def test_forward_agrees_with_reference_implementation():
    params, visual, prompt, generated = _setup(3)
    trace = md.forward(params, SMALL, visual, prompt, generated)
    ref = reference_forward(params, SMALL, visual, prompt + generated)
    assert np.max(np.abs(trace.logits - ref)) < 1e-5


def test_causality_changing_late_token_leaves_earlier_rows():
    params, visual, prompt, generated = _setup(4)
    alt = list(generated)
    alt[-1] = (alt[-1] + 1) % SMALL.vocab_size
    t1 = md.forward(params, SMALL, visual, prompt, generated)
    t2 = md.forward(params, SMALL, visual, prompt, alt)
    cut = SMALL.n_visual + len(prompt) + len(generated) - 1
    for a1, a2 in zip(t1.attention, t2.attention):
        np.testing.assert_array_equal(a1[:, :cut, :], a2[:, :cut, :])


def test_text_only_consistency():
    params, _, prompt, generated = _setup(5)
    a = md.forward(params, SMALL, None, prompt, generated)
    b = md.forward(params, SMALL, None, prompt, generated)
    np.testing.assert_array_equal(a.logits, b.logits)
    assert a.layout.n_visual == 0


def test_soft_mask_interpolates():
    params, visual, prompt, generated = _setup(6)
    w = np.full(SMALL.n_visual, 0.5, dtype=np.float32)
    soft = md.forward(params, SMALL, visual, prompt, generated,
                      mask=md.VisualMask(w))
    plain = md.forward(params, SMALL, visual, prompt, generated)
    assert np.all(np.isfinite(soft.logits))
    assert not np.array_equal(soft.logits, plain.logits)


# ---------------------------------------------------------------------------
# validation


def test_invalid_token_rejected():
    params, visual, prompt, generated = _setup(7)
    with pytest.raises(InvalidInputError):
        md.forward(params, SMALL, visual, [SMALL.vocab_size], generated)
    with pytest.raises(InvalidInputError):
        md.forward(params, SMALL, visual, prompt, [-1])


def test_sequence_too_long_rejected():
    params, visual, _, _ = _setup(8)
    too_long = [1] * (SMALL.max_seq - SMALL.n_visual + 1)
    with pytest.raises(SequenceTooLongError):
        md.forward(params, SMALL, visual, too_long, [])


def test_mask_without_visual_rejected():
    params, _, prompt, generated = _setup(9)
    with pytest.raises(InvalidInputError):
        md.forward(params, SMALL, None, prompt, generated,
                   mask=md.all_ones_mask(SMALL.n_visual))


def test_bad_patch_shape_rejected():
    params, _, prompt, generated = _setup(10)
    with pytest.raises(InvalidInputError):
        md.forward(params, SMALL, np.zeros((3, 3), dtype=np.float32), prompt, generated)


def test_mask_weight_validation():
    with pytest.raises(InvalidInputError):
        md.VisualMask(np.array([1.5, 0.0], dtype=np.float32))
    with pytest.raises(InvalidInputError):
        md.VisualMask(np.array([0.5, 0.0], dtype=np.float32), hard=True)


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        md.ModelConfig(d_model=64, n_heads=4, d_head=8)
    with pytest.raises(InvalidConfigError):
        md.ModelConfig(purify_layer=4, n_layers=4)
    with pytest.raises(InvalidConfigError):
        md.ModelConfig(n_visual=0)


# ---------------------------------------------------------------------------
# attention aggregation


def test_attn_aggregate_pinned_example():
    att = np.zeros((2, 3, 3), dtype=np.float32)
    att[0, -1, :2] = [0.1, 0.2]
    att[1, -1, :2] = [0.3, 0.4]
    trace = md.ForwardTrace(logits=np.zeros(4, dtype=np.float32),
                            attention=[att], layout=md.SeqLayout(2, 1, 0))
    assert md.attn_aggregate(trace, 0) == pytest.approx(0.5, abs=1e-7)


def test_attn_aggregate_bounds_and_mask():
    params, visual, prompt, generated = _setup(11)
    trace = md.forward(params, SMALL, visual, prompt, generated)
    for layer in range(SMALL.n_layers):
        val = md.attn_aggregate(trace, layer)
        assert 0.0 <= val <= 1.0
    half = md.VisualMask(np.full(SMALL.n_visual, 0.5, dtype=np.float32))
    assert md.attn_aggregate(trace, 0, mask=half) == pytest.approx(
        0.5 * md.attn_aggregate(trace, 0), rel=1e-5
    )
    with pytest.raises(InvalidInputError):
        md.attn_aggregate(trace, SMALL.n_layers)


# ---------------------------------------------------------------------------
# training


TINY = md.ModelConfig(
    vocab_size=32, n_visual=4, d_model=16, n_heads=2, d_head=8,
    n_layers=2, max_seq=24, purify_layer=1, patch_dim=8,
)


def test_train_overfits_single_example():
    rng = tc.Rng(21)
    visual = rng.normal((TINY.n_visual, TINY.patch_dim))
    prompt = [1, 2]
    caption = [5, 9, 13, 17, 21, 2]
    corpus = [(visual, prompt, caption)]
    hyper = md.LvlmTrainConfig(learning_rate=3e-3, epochs=200, batch_size=1,
                               image_dropout=0.0)
    params = md.train_lvlm(corpus, TINY, hyper, tc.Rng(3))
    loss = md.caption_loss(params, TINY, visual, prompt, caption)
    assert float(tc.value_of(loss)) < 0.1


def test_train_decreases_loss_and_is_deterministic():
    rng = tc.Rng(22)
    corpus = []
    for _ in range(12):
        visual = rng.normal((TINY.n_visual, TINY.patch_dim))
        caption = list(rng.integers(3, TINY.vocab_size, size=6)) + [2]
        corpus.append((visual, [1], caption))
    hyper = md.LvlmTrainConfig(learning_rate=3e-3, epochs=4, batch_size=4)
    losses = []
    params1 = md.train_lvlm(corpus, TINY, hyper, tc.Rng(7),
                            on_epoch=lambda e, l: losses.append(l))
    params2 = md.train_lvlm(corpus, TINY, hyper, tc.Rng(7))
    assert losses[-1] < losses[0]
    for k in params1:
        np.testing.assert_array_equal(params1[k], params2[k])


def test_train_rejects_empty_corpus():
    with pytest.raises(InvalidInputError):
        md.train_lvlm([], TINY, md.LvlmTrainConfig(), tc.Rng(0))


def test_model_checkpoint_round_trip(tmp_path):
    params, _, _, _ = _setup(12)
    path = tmp_path / "m.ckpt"
    md.save_model(path, params, SMALL)
    params2, config2 = md.load_model(path)
    assert config2 == SMALL
    for k in params:
        np.testing.assert_array_equal(params[k], params2[k])
