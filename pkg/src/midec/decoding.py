"""Calibrated contrastive decoding with per-step visual token purification.

Each step runs the model twice: once with the (optionally masked) image
and once text-only.  Sampling happens over

    (1 + lambda) * f_with_image - lambda * f_text_only

restricted to candidate tokens whose with-image probability clears an
adaptive threshold (a fixed fraction of the max), so amplified low-support
tokens cannot surface.  Variants:

    baseline       plain sampling, full image, lambda forced to 0
    text_only      calibration only, image unmasked
    vision_only    purifier mask only, lambda forced to 0
    full           calibration plus purifier mask
    learning_free  calibration plus an exhaustive oracle mask (no training)

The mask for a step either comes from the purifier run on the current
context (``order="mask_first"``, the default) or is carried over from the
end of the previous step (``order="sample_first"``); the two orders mirror
the two published descriptions of the per-step alternation.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensorcore as tc
from .errors import InvalidConfigError, InvalidInputError, NumericalError
from .model import ModelConfig, VisualMask, all_ones_mask, embed_visual, forward
from .purifier import PurifierConfig, purifier_forward
from .tensorcore import Rng

VARIANTS = ("baseline", "text_only", "vision_only", "full", "learning_free")
SAMPLERS = ("greedy", "multinomial", "top_p")
ORDERS = ("mask_first", "sample_first")

# variants whose sampling ignores the text-only subtraction
_NO_CALIBRATION = ("baseline", "vision_only")
# variants that decode with a per-step mask
_MASKED = ("vision_only", "full", "learning_free")


@dataclass(frozen=True)
class DecodeConfig:
    lam: float = 0.5           # calibration strength
    gamma: float = 0.8         # retained fraction of visual tokens
    tau: float = 1.0           # Gumbel temperature (training-time relaxation)
    delta: float = 0.1         # candidate truncation fraction
    alpha: float = 300.0       # attention weight in mask scoring
    variant: str = "full"
    sampler: str = "greedy"
    top_p: float = 0.9
    seed: int = 0
    max_new_tokens: int = 24
    eos_token: int = 2
    order: str = "mask_first"

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidConfigError("lam must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidConfigError("gamma must lie in (0, 1]")
        if not self.tau > 0:
            raise InvalidConfigError("tau must be > 0")
        if not 0.0 <= self.delta <= 1.0:
            raise InvalidConfigError("delta must lie in [0, 1]")
        if self.alpha < 0:
            raise InvalidConfigError("alpha must be >= 0")
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"variant must be one of {VARIANTS}")
        if self.sampler not in SAMPLERS:
            raise InvalidConfigError(f"sampler must be one of {SAMPLERS}")
        if not 0.0 < self.top_p <= 1.0:
            raise InvalidConfigError("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise InvalidConfigError("max_new_tokens must be >= 1")
        if self.eos_token < 0:
            raise InvalidConfigError("eos_token must be a valid token id")
        if self.order not in ORDERS:
            raise InvalidConfigError(f"order must be one of {ORDERS}")


@dataclass
class StepRecord:
    token: int
    entropy: float        # of the truncated, renormalized sampling distribution
    retained: int         # visual tokens kept by this step's mask
    log_ratio: float      # ln p_image(token) - ln p_text(token)


@dataclass
class DecodeResult:
    tokens: list[int]
    per_step: list[StepRecord]
    wall_time: float
    tokens_per_second: float

    def to_json_line(self) -> str:
        return json.dumps({
            "tokens": self.tokens,
            "per_step": [
                {"token": s.token, "entropy": s.entropy,
                 "retained": s.retained, "log_ratio": s.log_ratio}
                for s in self.per_step
            ],
            "wall_time": self.wall_time,
            "tokens_per_second": self.tokens_per_second,
        })


def calibrate_logits(f_v, f_x, lam: float) -> np.ndarray:
    """(1 + lam) * f_v - lam * f_x; lam=0 returns f_v unchanged."""
    f_v = np.asarray(tc.value_of(f_v))
    f_x = np.asarray(tc.value_of(f_x))
    if f_v.shape != f_x.shape or f_v.ndim != 1:
        raise InvalidInputError("calibrate_logits expects two vectors of equal length")
    if lam < 0:
        raise InvalidConfigError("lam must be >= 0")
    if not (np.all(np.isfinite(f_v)) and np.all(np.isfinite(f_x))):
        raise NumericalError("calibrate_logits: non-finite logits")
    return (1.0 + lam) * f_v - lam * f_x


def truncate_candidates(p_v: np.ndarray, delta: float) -> np.ndarray:
    """Indices with p >= delta * max(p); never empty (argmax qualifies)."""
    p_v = np.asarray(p_v)
    if p_v.ndim != 1:
        raise InvalidInputError("p_v must be a probability vector")
    if not 0.0 <= delta <= 1.0:
        raise InvalidConfigError("delta must lie in [0, 1]")
    if np.any(p_v < 0) or abs(float(p_v.sum()) - 1.0) > 1e-5:
        raise InvalidInputError("p_v must be a normalized probability vector")
    if delta == 0.0:
        idx = np.flatnonzero(p_v > 0.0)
    else:
        idx = np.flatnonzero(p_v >= delta * p_v.max())
    return idx


def _restricted_probs(calibrated: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    sel = calibrated[candidates]
    e = np.exp(sel - sel.max())
    return e / e.sum()


def _sample(calibrated: np.ndarray, candidates: np.ndarray, cfg: DecodeConfig,
            rng: Rng) -> tuple[int, float]:
    """Pick a token among candidates; returns (token, entropy of the pick dist)."""
    probs = _restricted_probs(calibrated, candidates)
    entropy = float(-np.sum(probs * np.log(np.maximum(probs, tc.PROB_FLOOR))))
    if cfg.sampler == "greedy":
        # ties resolve to the lowest token id (argmax takes the first max,
        # candidates are sorted ascending)
        return int(candidates[int(np.argmax(calibrated[candidates]))]), entropy
    if cfg.sampler == "top_p":
        order = np.argsort(-probs, kind="stable")
        cum = np.cumsum(probs[order])
        cut = int(np.searchsorted(cum, cfg.top_p, side="left")) + 1
        keep = order[:cut]
        sub = probs[keep] / probs[keep].sum()
        u = float(rng.uniform())
        pick = int(np.searchsorted(np.cumsum(sub), u, side="right"))
        pick = min(pick, len(keep) - 1)
        return int(candidates[keep[pick]]), entropy
    u = float(rng.uniform())
    pick = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    pick = min(pick, len(candidates) - 1)
    return int(candidates[pick]), entropy


def top_k_mask(retain_probs: np.ndarray, k: int) -> VisualMask:
    """Hard mask keeping the k highest retention probabilities.

    Ties resolve to the lowest visual index (stable sort order).
    """
    n = len(retain_probs)
    if not 0 <= k <= n:
        raise InvalidInputError(f"retain count {k} out of range [0, {n}]")
    order = np.argsort(-np.asarray(retain_probs), kind="stable")
    weights = np.zeros(n, dtype=tc.DTYPE)
    weights[order[:k]] = 1.0
    return VisualMask(weights, hard=True)


def retain_count(gamma: float, n_visual: int) -> int:
    return int(round(gamma * n_visual))


def purifier_mask_fn(params, config: ModelConfig, pp, pcfg: PurifierConfig,
                     patches, prompt, cfg: DecodeConfig,
                     visual_hook: Callable | None = None) -> Callable[[list[int]], VisualMask]:
    """Per-step mask provider backed by the trained purifier.

    The visual rows of the purifier context never change within one decode,
    so they are embedded once up front; per step only the text rows are
    gathered.  Identical floats to rebuilding the context from scratch.
    """
    k = retain_count(cfg.gamma, config.n_visual)
    hooked = patches if visual_hook is None else visual_hook(patches)
    vis_rows = tc.value_of(embed_visual(params, np.asarray(hooked, dtype=tc.DTYPE)))
    tok_emb = params["tok_emb"]
    prompt_ids = list(prompt)

    def provide(generated: list[int]) -> VisualMask:
        text = prompt_ids + list(generated)
        if text:
            z = np.concatenate(
                [vis_rows, tok_emb[np.asarray(text, dtype=np.intp)]], axis=0)
        else:
            z = vis_rows
        dist = purifier_forward(pp, pcfg, z, config.n_visual)
        return top_k_mask(tc.value_of(dist.pi)[:, 1], k)

    return provide


def decode(params, config: ModelConfig, purifier, patches, prompt,
           cfg: DecodeConfig, visual_hook: Callable | None = None,
           mask_fn: Callable[[list[int]], VisualMask] | None = None) -> DecodeResult:
    """Generate until EOS or the token budget, instrumenting every step.

    ``purifier`` is a (weights, PurifierConfig) pair for the purifier-backed
    variants; ``mask_fn`` overrides it (the exhaustive-search decoder plugs
    in here).  ``visual_hook``, when given, transforms patch vectors before
    embedding - a no-op extension point, identity unless supplied.
    """
    uses_mask = cfg.variant in _MASKED
    if uses_mask and mask_fn is None:
        if cfg.variant == "learning_free":
            raise InvalidConfigError("learning_free decoding requires a mask_fn "
                                     "(see the exhaustive-search decoder)")
        if purifier is None:
            raise InvalidConfigError(f"variant {cfg.variant!r} requires a purifier")
        pp, pcfg = purifier
        mask_fn = purifier_mask_fn(params, config, pp, pcfg, patches, prompt, cfg,
                                   visual_hook=visual_hook)

    lam = 0.0 if cfg.variant in _NO_CALIBRATION else cfg.lam
    rng = Rng(cfg.seed).split("decode-sampling")
    prompt = list(prompt)
    generated: list[int] = []
    per_step: list[StepRecord] = []
    current_mask: VisualMask | None = all_ones_mask(config.n_visual) if uses_mask else None

    start = time.perf_counter()
    for _ in range(cfg.max_new_tokens):
        if uses_mask and cfg.order == "mask_first":
            current_mask = mask_fn(generated)
        # hard masks take the row-pruning fast path; same logits to float
        # tolerance as the attention-bias form, but the masked branch gets
        # cheaper instead of costlier
        trace_v = forward(params, config, patches, prompt, generated,
                          mask=current_mask, visual_hook=visual_hook,
                          physical_prune=True)
        trace_x = forward(params, config, None, prompt, generated)
        f_v = tc.value_of(trace_v.logits)
        f_x = tc.value_of(trace_x.logits)
        calibrated = calibrate_logits(f_v, f_x, lam)
        p_v = tc.value_of(tc.softmax(f_v))
        candidates = truncate_candidates(p_v, cfg.delta)
        token, entropy = _sample(calibrated, candidates, cfg, rng)

        p_x = tc.value_of(tc.softmax(f_x))
        log_ratio = float(
            np.log(max(float(p_v[token]), tc.PROB_FLOOR))
            - np.log(max(float(p_x[token]), tc.PROB_FLOOR))
        )
        retained = current_mask.n_retained if current_mask is not None else config.n_visual
        per_step.append(StepRecord(token=token, entropy=entropy,
                                   retained=retained, log_ratio=log_ratio))
        generated.append(token)
        if uses_mask and cfg.order == "sample_first":
            current_mask = mask_fn(generated)
        if token == cfg.eos_token:
            break
    wall = time.perf_counter() - start

    return DecodeResult(
        tokens=generated,
        per_step=per_step,
        wall_time=wall,
        tokens_per_second=len(generated) / max(wall, 1e-9),
    )
