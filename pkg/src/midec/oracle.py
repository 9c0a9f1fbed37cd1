"""Brute-force ground truth for mask selection and the decomposition identity.

The purifier approximates the solution of a per-step subproblem: among all
masks keeping k of N visual tokens, find the one maximizing

    alpha * Attn(v; mask) + ln p(y_t | masked image, x, y_<t) - ln p(y_t | x, y_<t)

At desk scale C(N, k) is small enough to enumerate outright, which gives an
exact reference the learned purifier can be compared against, and a
learning-free decoding variant that needs no training at all.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import tensorcore as tc
from .cpmi import cpmi_pointwise, token_log_prob
from .decoding import DecodeConfig, DecodeResult, decode, retain_count
from .errors import EnumerationTooLargeError, InvalidConfigError, InvalidInputError
from .model import ModelConfig, VisualMask, attn_aggregate, forward
from .tensorcore import Rng

ENUMERATION_CAP = 10 ** 6


@dataclass
class OracleResult:
    best_mask: VisualMask
    best_score: float
    enumerated_count: int
    all_scores: list[tuple[tuple[int, ...], float]] | None = None

    def to_json(self) -> str:
        payload = {
            "best_mask": [float(w) for w in tc.value_of(self.best_mask.weights)],
            "best_score": self.best_score,
            "enumerated_count": self.enumerated_count,
        }
        if self.all_scores is not None:
            payload["all_scores"] = [
                {"kept": list(kept), "score": score} for kept, score in self.all_scores
            ]
        return json.dumps(payload)


def _subset_mask(kept: tuple[int, ...], n: int) -> VisualMask:
    weights = np.zeros(n, dtype=tc.DTYPE)
    weights[list(kept)] = 1.0
    return VisualMask(weights, hard=True)


def mask_score(params, config: ModelConfig, patches, prompt, y_prefix, y_t: int,
               mask: VisualMask, alpha: float, text_log_prob: float | None = None) -> float:
    """The per-step objective for one concrete mask."""
    trace = forward(params, config, patches, list(prompt), list(y_prefix), mask=mask)
    lp_v = token_log_prob(tc.value_of(trace.logits), y_t)
    attn = float(tc.value_of(attn_aggregate(trace, config.purify_layer, mask=mask)))
    if text_log_prob is None:
        trace_x = forward(params, config, None, list(prompt), list(y_prefix))
        text_log_prob = token_log_prob(tc.value_of(trace_x.logits), y_t)
    return alpha * attn + lp_v - text_log_prob


def oracle_mask_search(params, config: ModelConfig, patches, prompt, y_prefix,
                       y_t: int, k: int, alpha: float,
                       keep_scores: bool = False,
                       cap: int = ENUMERATION_CAP) -> OracleResult:
    """Exhaustive search over all C(N, k) retained-token subsets.

    Ties break toward the lexicographically smallest kept-index tuple,
    which is the enumeration order, so the search is deterministic no
    matter how the scoring work is scheduled.
    """
    n = config.n_visual
    if not 1 <= k <= n:
        raise InvalidInputError(f"retained count k={k} must lie in [1, {n}]")
    count = math.comb(n, k)
    if count > cap:
        raise EnumerationTooLargeError(
            f"C({n},{k}) = {count} exceeds the enumeration cap {cap}")

    # the text-only term is mask-independent; compute it once
    trace_x = forward(params, config, None, list(prompt), list(y_prefix))
    text_lp = token_log_prob(tc.value_of(trace_x.logits), int(y_t))

    best_kept: tuple[int, ...] | None = None
    best_score = -math.inf
    all_scores: list[tuple[tuple[int, ...], float]] | None = [] if keep_scores else None
    for kept in combinations(range(n), k):
        score = mask_score(params, config, patches, prompt, y_prefix, int(y_t),
                           _subset_mask(kept, n), alpha, text_log_prob=text_lp)
        if all_scores is not None:
            all_scores.append((kept, score))
        if score > best_score:
            best_score = score
            best_kept = kept

    return OracleResult(
        best_mask=_subset_mask(best_kept, n),
        best_score=best_score,
        enumerated_count=count,
        all_scores=all_scores,
    )


def oracle_mask_fn(params, config: ModelConfig, patches, prompt, cfg: DecodeConfig):
    """Per-step mask provider that replaces the purifier with exhaustive search.

    The objective needs a candidate token before the mask exists.  At the
    start of a step the candidate is the greedy argmax under the full,
    unmasked image; when the mask is refreshed after sampling, the actual
    sampled token is scored instead.
    """
    k = retain_count(cfg.gamma, config.n_visual)

    def provide(generated: list[int]) -> VisualMask:
        if cfg.order == "sample_first" and generated:
            y_prefix, y_t = generated[:-1], generated[-1]
        else:
            trace = forward(params, config, patches, list(prompt), list(generated))
            y_prefix, y_t = list(generated), int(np.argmax(tc.value_of(trace.logits)))
        return oracle_mask_search(params, config, patches, prompt, y_prefix,
                                  y_t, k, cfg.alpha).best_mask

    return provide


def lf_decode(params, config: ModelConfig, patches, prompt,
              cfg: DecodeConfig) -> DecodeResult:
    """Decode with the exhaustive searcher standing in for the purifier."""
    if cfg.variant != "learning_free":
        raise InvalidConfigError("lf_decode requires variant='learning_free'")
    mask_fn = oracle_mask_fn(params, config, patches, prompt, cfg)
    return decode(params, config, None, patches, prompt, cfg, mask_fn=mask_fn)


def verify_factorization(params, config: ModelConfig, trials: int, rng: Rng,
                         patch_dim: int | None = None) -> float:
    """Max absolute gap between the per-step sum and the sequence-level
    log-probability difference over random scene/prompt/caption triples."""
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    if patch_dim is None:
        patch_dim = config.patch_dim
    r_patch = rng.split("fact-patches")
    r_tok = rng.split("fact-tokens")
    worst = 0.0
    for _ in range(trials):
        patches = r_patch.normal(shape=(config.n_visual, patch_dim))
        n_prompt = 1 + int(r_tok.integers(0, 4))
        n_y = 2 + int(r_tok.integers(0, 8))
        prompt = [int(t) for t in r_tok.integers(0, config.vocab_size, size=n_prompt)]
        y = [int(t) for t in r_tok.integers(0, config.vocab_size, size=n_y)]
        report = cpmi_pointwise(params, config, patches, prompt, y)
        gap = abs(report.total
                  - (report.with_image_log_prob - report.without_image_log_prob))
        worst = max(worst, gap)
    return worst
