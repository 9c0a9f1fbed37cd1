"""Mutual-information scoring: the decomposition identity and its oracles."""

import math

import numpy as np
import pytest

from midec import cpmi
from midec import model as md
from midec import tensorcore as tc
from midec.errors import InvalidInputError

CFG = md.ModelConfig(
    vocab_size=40, n_visual=5, d_model=24, n_heads=3, d_head=8,
    n_layers=2, max_seq=32, purify_layer=1, patch_dim=10,
)


def _setup(seed):
    rng = tc.Rng(seed)
    params = md.init_lvlm(CFG, rng.split("p"))
    visual = rng.split("v").normal((CFG.n_visual, CFG.patch_dim))
    prompt = list(rng.split("x").integers(0, CFG.vocab_size, size=2))
    y = list(rng.split("y").integers(0, CFG.vocab_size, size=6))
    return params, visual, prompt, y


def test_sequence_log_prob_matches_stepwise_oracle():
    params, visual, prompt, y = _setup(0)
    total = cpmi.sequence_log_prob(params, CFG, visual, prompt, y)
    # independent route: score each step with its own forward call
    oracle = 0.0
    for t in range(len(y)):
        trace = md.forward(params, CFG, visual, prompt, y[:t])
        p = np.exp(trace.logits - trace.logits.max())
        p = p / p.sum()
        oracle += math.log(max(float(p[y[t]]), 1e-12))
    assert abs(total - oracle) < 1e-6
    assert total <= 0.0


def test_factorization_identity():
    # sum of per-step ratios == log q(y|v,x) - log q(y|x)
    for seed in range(5):
        params, visual, prompt, y = _setup(seed)
        report = cpmi.cpmi_pointwise(params, CFG, visual, prompt, y)
        with_image = cpmi.sequence_log_prob(params, CFG, visual, prompt, y)
        without = cpmi.sequence_log_prob(params, CFG, None, prompt, y)
        assert abs(report.total - (with_image - without)) < 1e-5
        assert abs(report.total - math.fsum(report.per_step_log_ratio)) < 1e-9


def test_report_internal_consistency():
    params, visual, prompt, y = _setup(7)
    report = cpmi.cpmi_pointwise(params, CFG, visual, prompt, y)
    assert len(report.per_step_log_ratio) == len(y)
    assert abs(report.total - (report.with_image_log_prob - report.without_image_log_prob)) < 1e-5


def test_additivity_over_splits():
    # score(y1 ++ y2) == score(y1) + score(y2 | y1 in context)
    params, visual, prompt, y = _setup(3)
    k = 3
    full = cpmi.cpmi_pointwise(params, CFG, visual, prompt, y)
    head = cpmi.cpmi_pointwise(params, CFG, visual, prompt, y[:k])
    tail = cpmi.cpmi_pointwise(params, CFG, visual, prompt + y[:k], y[k:])
    assert abs(full.total - (head.total + tail.total)) < 1e-5


def test_masks_shift_with_image_branch_only():
    params, visual, prompt, y = _setup(4)
    keep = np.ones(CFG.n_visual, dtype=np.float32)
    keep[0] = 0.0
    masks = [md.VisualMask(keep, hard=True)] * len(y)
    masked = cpmi.cpmi_pointwise(params, CFG, visual, prompt, y, masks=masks)
    plain = cpmi.cpmi_pointwise(params, CFG, visual, prompt, y)
    assert masked.without_image_log_prob == pytest.approx(plain.without_image_log_prob, abs=1e-9)
    assert masked.with_image_log_prob != plain.with_image_log_prob


def test_json_round_trip():
    params, visual, prompt, y = _setup(5)
    report = cpmi.cpmi_pointwise(params, CFG, visual, prompt, y)
    again = cpmi.CpmiReport.from_json(report.to_json())
    assert again == report


def test_validation_errors():
    params, visual, prompt, y = _setup(6)
    with pytest.raises(InvalidInputError):
        cpmi.cpmi_pointwise(params, CFG, None, prompt, y)
    with pytest.raises(InvalidInputError):
        cpmi.cpmi_pointwise(params, CFG, visual, prompt, [])
    with pytest.raises(InvalidInputError):
        cpmi.cpmi_pointwise(params, CFG, visual, prompt, y,
                            masks=[md.all_ones_mask(CFG.n_visual)])
    with pytest.raises(InvalidInputError):
        cpmi.sequence_log_prob(params, CFG, visual, prompt, [CFG.vocab_size])
