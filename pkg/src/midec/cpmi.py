"""Pointwise mutual information between an image and a generated sequence.

The sequence-level score log[p(v,y|x) / (p(v|x) p(y|x))] is computed via its
exact per-step decomposition: the sum over decoding steps of

    log p(y_t | v, x, y_<t) - log p(y_t | x, y_<t),

which needs only the two conditional branches the model already provides
(with and without the image).  All probabilities are floored at 1e-12
before the log; per-step values are accumulated in float64 so the
decomposition matches the sequence-level difference to rounding error.

Full-prefix recompute per step; no incremental caching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import InvalidInputError
from .model import ModelConfig, VisualMask, forward


@dataclass
class CpmiReport:
    """Per-step image/text log-ratios and their sequence-level sums."""

    per_step_log_ratio: list[float]
    total: float
    with_image_log_prob: float
    without_image_log_prob: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_step_log_ratio": self.per_step_log_ratio,
                "total": self.total,
                "with_image_log_prob": self.with_image_log_prob,
                "without_image_log_prob": self.without_image_log_prob,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CpmiReport":
        raw = json.loads(text)
        return cls(
            per_step_log_ratio=[float(x) for x in raw["per_step_log_ratio"]],
            total=float(raw["total"]),
            with_image_log_prob=float(raw["with_image_log_prob"]),
            without_image_log_prob=float(raw["without_image_log_prob"]),
        )


def token_log_prob(logits, token: int) -> float:
    """ln of the floored softmax probability of ``token``."""
    probs = tc.softmax(tc.value_of(logits))
    return float(np.log(max(float(probs[token]), tc.PROB_FLOOR)))


def _step_log_probs(params, config: ModelConfig, visual, prompt, y, masks) -> list[float]:
    if not y:
        raise InvalidInputError("sequence y must be non-empty")
    for token in y:
        if not 0 <= int(token) < config.vocab_size:
            raise InvalidInputError(f"token {token} outside vocabulary [0, {config.vocab_size})")
    if masks is not None:
        if visual is None:
            raise InvalidInputError("per-step masks require visual input")
        if len(masks) != len(y):
            raise InvalidInputError("need one mask per decoding step")
    out = []
    for t, token in enumerate(y):
        mask = masks[t] if masks is not None else None
        trace = forward(params, config, visual, prompt, y[:t], mask=mask)
        out.append(token_log_prob(trace.logits, int(token)))
    return out


def sequence_log_prob(params, config: ModelConfig, visual, prompt, y,
                      masks: list[VisualMask] | None = None) -> float:
    """log q(y | context): sum of per-step floored log-probabilities."""
    return math.fsum(_step_log_probs(params, config, visual, prompt, list(y), masks))


def cpmi_pointwise(params, config: ModelConfig, visual, prompt, y,
                   masks: list[VisualMask] | None = None) -> CpmiReport:
    """Per-step decomposition of the image/text mutual information score."""
    if visual is None:
        raise InvalidInputError("cpmi_pointwise requires visual input")
    y = list(y)
    lp_v = _step_log_probs(params, config, visual, prompt, y, masks)
    lp_x = _step_log_probs(params, config, None, prompt, y, None)
    per_step = [a - b for a, b in zip(lp_v, lp_x)]
    return CpmiReport(
        per_step_log_ratio=per_step,
        total=math.fsum(per_step),
        with_image_log_prob=math.fsum(lp_v),
        without_image_log_prob=math.fsum(lp_x),
    )
