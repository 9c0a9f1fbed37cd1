"""Trainable visual token purifier.

A very small bidirectional transformer reads the frozen LVLM's embedded
sequence (visual patch embeddings, then prompt and generated-token
embeddings) and emits a drop/retain distribution per visual token.  Its
budget is hard-capped below 1% of the LVLM's parameters, enforced at
construction.

Training follows the per-step objective: maximize the masked image/text
log-ratio of the observed next token plus the aggregated attention mass
on retained visual tokens, while a penalty holds mean retention near the
target fraction.  The hard argmax mask is relaxed with Gumbel-Softmax
noise so gradients reach the purifier through the frozen model's
attention bias; model weights stay plain arrays and receive none.

Positional detail: text positions get learned positional embeddings while
visual positions share one learned segment vector, so two identical patch
embeddings always receive identical drop/retain rows while text content
order still matters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import store
from . import tensorcore as tc
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    NumericalError,
    SequenceTooLongError,
)
from .model import (
    ModelConfig,
    VisualMask,
    _check_finite_params,
    attn_aggregate,
    embed_tokens,
    embed_visual,
    forward,
    n_params,
)
from .tensorcore import Node, Rng


@dataclass(frozen=True)
class PurifierConfig:
    n_blocks: int = 1
    d_model: int = 64       # input width; must match the LVLM embedding width
    d_inner: int = 8        # internal width, kept tiny to honor the budget
    n_heads: int = 2
    mlp_hidden: int = 16
    tau: float = 1.0
    text_pos_max: int = 48

    def __post_init__(self):
        if self.n_blocks < 1:
            raise InvalidConfigError("n_blocks must be >= 1")
        if self.d_inner < 1 or self.d_model < 1:
            raise InvalidConfigError("widths must be positive")
        if self.d_inner % self.n_heads != 0:
            raise InvalidConfigError("d_inner must divide evenly into heads")
        if self.mlp_hidden < 1 or self.text_pos_max < 1:
            raise InvalidConfigError("mlp_hidden and text_pos_max must be positive")
        if not self.tau > 0:
            raise InvalidConfigError("tau must be > 0")


@dataclass
class MaskDistribution:
    """Per-visual-token (drop, retain) probabilities with their logits."""

    pi: np.ndarray | Node
    logits: np.ndarray | Node

    def __post_init__(self):
        p = tc.value_of(self.pi)
        if p.ndim != 2 or p.shape[1] != 2:
            raise InvalidInputError("pi must have shape (n_visual, 2)")
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("pi must be finite")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-5:
            raise InvalidInputError("pi rows must sum to 1")


def init_purifier(pcfg: PurifierConfig, lvlm_param_count: int, rng: Rng) -> dict[str, np.ndarray]:
    """Random purifier weights; enforces the <1% parameter budget."""
    std = 0.05
    d, h = pcfg.d_inner, pcfg.mlp_hidden
    p: dict[str, np.ndarray] = {
        "w_in": rng.normal((pcfg.d_model, d), std=std),
        "b_in": np.zeros(d, dtype=tc.DTYPE),
        "vis_seg": rng.normal((d,), std=std),
        "text_pos": rng.normal((pcfg.text_pos_max, d), std=std),
    }
    for i in range(pcfg.n_blocks):
        p[f"b{i}.ln1_g"] = np.ones(d, dtype=tc.DTYPE)
        p[f"b{i}.ln1_b"] = np.zeros(d, dtype=tc.DTYPE)
        p[f"b{i}.wq"] = rng.normal((d, d), std=std)
        p[f"b{i}.wk"] = rng.normal((d, d), std=std)
        p[f"b{i}.wv"] = rng.normal((d, d), std=std)
        p[f"b{i}.wo"] = rng.normal((d, d), std=std)
        p[f"b{i}.ln2_g"] = np.ones(d, dtype=tc.DTYPE)
        p[f"b{i}.ln2_b"] = np.zeros(d, dtype=tc.DTYPE)
        p[f"b{i}.mlp_w1"] = rng.normal((d, h), std=std)
        p[f"b{i}.mlp_b1"] = np.zeros(h, dtype=tc.DTYPE)
        p[f"b{i}.mlp_w2"] = rng.normal((h, d), std=std)
        p[f"b{i}.mlp_b2"] = np.zeros(d, dtype=tc.DTYPE)
    p["lnf_g"] = np.ones(d, dtype=tc.DTYPE)
    p["lnf_b"] = np.zeros(d, dtype=tc.DTYPE)
    p["pop_g"] = np.ones(d, dtype=tc.DTYPE)
    p["head_w1"] = rng.normal((d, h), std=std)
    p["head_b1"] = np.zeros(h, dtype=tc.DTYPE)
    p["head_w2"] = rng.normal((h, 2), std=std)
    p["head_b2"] = np.zeros(2, dtype=tc.DTYPE)

    count = n_params(p)
    budget = 0.01 * lvlm_param_count
    if count >= budget:
        raise InvalidConfigError(
            f"purifier has {count} parameters, budget is <1% of the LVLM "
            f"({lvlm_param_count} -> {budget:.0f})"
        )
    return p


def save_purifier(path, pp: dict[str, np.ndarray], pcfg: PurifierConfig) -> None:
    store.save(path, {"kind": "purifier", **asdict(pcfg)}, pp)


def load_purifier(path) -> tuple[dict[str, np.ndarray], PurifierConfig]:
    config, arrays = store.load(path)
    config = dict(config)
    if config.pop("kind", None) != "purifier":
        raise InvalidInputError(f"{path} does not hold a purifier checkpoint")
    return arrays, PurifierConfig(**config)


# ---------------------------------------------------------------------------
# forward


def _softmax_plain(s):
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("softmax: input contains non-finite values")
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def _ln_plain(x, g, b, eps=1e-5):
    c = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    return c * inv * g + b


def _gelu_plain(x):
    inner = (x + ((x * x) * x) * 0.044715) * tc._GELU_C
    return (x * (np.tanh(inner) + 1.0)) * 0.5


def _forward_plain(pp, pcfg: PurifierConfig, zv, n_visual: int, n_text: int):
    # dispatch-free mirror of the taped graph below, same ops in the same
    # order, so results are bitwise identical; kept honest by a pinned test
    n = zv.shape[0]
    h = np.matmul(zv, pp["w_in"]) + pp["b_in"]
    h_vis = h[:n_visual] + pp["vis_seg"]
    if n_text:
        h = np.concatenate([h_vis, h[n_visual:] + pp["text_pos"][:n_text]], axis=0)
    else:
        h = h_vis
    d_head = pcfg.d_inner // pcfg.n_heads
    scale = 1.0 / math.sqrt(d_head)
    for i in range(pcfg.n_blocks):
        a = _ln_plain(h, pp[f"b{i}.ln1_g"], pp[f"b{i}.ln1_b"])

        def heads(w):
            return np.matmul(a, w).reshape(n, pcfg.n_heads, d_head).swapaxes(0, 1)

        q, k, v = heads(pp[f"b{i}.wq"]), heads(pp[f"b{i}.wk"]), heads(pp[f"b{i}.wv"])
        attn = _softmax_plain(np.matmul(q, k.swapaxes(1, 2)) * scale)
        ctx = np.matmul(attn, v).swapaxes(0, 1).reshape(n, pcfg.d_inner)
        h = h + np.matmul(ctx, pp[f"b{i}.wo"])
        m = _ln_plain(h, pp[f"b{i}.ln2_g"], pp[f"b{i}.ln2_b"])
        inner = _gelu_plain(np.matmul(m, pp[f"b{i}.mlp_w1"]) + pp[f"b{i}.mlp_b1"])
        h = h + (np.matmul(inner, pp[f"b{i}.mlp_w2"]) + pp[f"b{i}.mlp_b2"])
    h = _ln_plain(h, pp["lnf_g"], pp["lnf_b"])
    hv = h[:n_visual]
    c = hv - hv.mean(axis=0, keepdims=True)
    var = (c * c).mean(axis=0, keepdims=True)
    hv = (c / np.sqrt(var + 1e-5)) * pp["pop_g"]
    head = _gelu_plain(np.matmul(hv, pp["head_w1"]) + pp["head_b1"])
    logits = np.matmul(head, pp["head_w2"]) + pp["head_b2"]
    return MaskDistribution(pi=_softmax_plain(logits), logits=logits)


def purifier_forward(pp, pcfg: PurifierConfig, z, n_visual: int) -> MaskDistribution:
    """Drop/retain distribution over the first ``n_visual`` rows of ``z``.

    ``z`` holds the concatenated embedded sequence, visual rows first.
    """
    zv = tc.value_of(z)
    if zv.ndim != 2 or zv.shape[1] != pcfg.d_model:
        raise InvalidConfigError(
            f"z width {zv.shape} does not match purifier d_model {pcfg.d_model}"
        )
    n = zv.shape[0]
    if not 1 <= n_visual <= n:
        raise InvalidInputError(f"n_visual {n_visual} out of range for sequence of {n}")
    n_text = n - n_visual
    if n_text > pcfg.text_pos_max:
        raise SequenceTooLongError(
            f"text length {n_text} exceeds purifier text_pos_max {pcfg.text_pos_max}"
        )

    if not isinstance(z, Node) and not any(isinstance(v, Node) for v in pp.values()):
        return _forward_plain(pp, pcfg, zv, n_visual, n_text)

    h = tc.add(tc.matmul(z, pp["w_in"]), pp["b_in"])
    h_vis = tc.add(h[:n_visual], pp["vis_seg"])
    if n_text:
        h_text = tc.add(h[n_visual:], pp["text_pos"][:n_text])
        h = tc.concat([h_vis, h_text], axis=0)
    else:
        h = h_vis

    d_head = pcfg.d_inner // pcfg.n_heads
    scale = 1.0 / math.sqrt(d_head)
    for i in range(pcfg.n_blocks):
        a = tc.layer_norm(h, pp[f"b{i}.ln1_g"], pp[f"b{i}.ln1_b"])

        def heads(w):
            proj = tc.matmul(a, w)
            return tc.swapaxes(tc.reshape(proj, (n, pcfg.n_heads, d_head)), 0, 1)

        q, k, v = heads(pp[f"b{i}.wq"]), heads(pp[f"b{i}.wk"]), heads(pp[f"b{i}.wv"])
        attn = tc.softmax(tc.mul(tc.matmul(q, tc.swapaxes(k, 1, 2)), scale), axis=-1)
        ctx = tc.reshape(tc.swapaxes(tc.matmul(attn, v), 0, 1), (n, pcfg.d_inner))
        h = tc.add(h, tc.matmul(ctx, pp[f"b{i}.wo"]))
        m = tc.layer_norm(h, pp[f"b{i}.ln2_g"], pp[f"b{i}.ln2_b"])
        inner = tc.gelu(tc.add(tc.matmul(m, pp[f"b{i}.mlp_w1"]), pp[f"b{i}.mlp_b1"]))
        h = tc.add(h, tc.add(tc.matmul(inner, pp[f"b{i}.mlp_w2"]), pp[f"b{i}.mlp_b2"]))

    h = tc.layer_norm(h, pp["lnf_g"], pp["lnf_b"])
    v = h[:n_visual]
    # keep/drop is a relative judgement: normalize each feature over the row
    # population so the head ranks rows against each other and a single bias
    # can calibrate how many clear the threshold
    mu = tc.mean(v, axis=0, keepdims=True)
    c = tc.sub(v, mu)
    var = tc.mean(tc.mul(c, c), axis=0, keepdims=True)
    v = tc.mul(tc.div(c, tc.sqrt(tc.add(var, 1e-5))), pp["pop_g"])
    head = tc.gelu(tc.add(tc.matmul(v, pp["head_w1"]), pp["head_b1"]))
    logits = tc.add(tc.matmul(head, pp["head_w2"]), pp["head_b2"])
    return MaskDistribution(pi=tc.softmax(logits, axis=-1), logits=logits)


def extract_mask(dist: MaskDistribution) -> VisualMask:
    """Row-wise argmax of pi; exact ties resolve to retain."""
    pi = tc.value_of(dist.pi)
    weights = (pi[:, 1] >= pi[:, 0]).astype(tc.DTYPE)
    return VisualMask(weights, hard=True)


def retention_penalty(weights, gamma: float):
    """|mean(weights) - gamma|: distance of retained fraction from target."""
    if not 0.0 <= gamma <= 1.0:
        raise InvalidConfigError("gamma must lie in [0, 1]")
    return tc.absolute(tc.sub(tc.mean(weights), gamma))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class PurifierTrainConfig:
    alpha: float = 300.0       # weight of the attention-mass reward
    beta: float = 500.0        # weight of the retention penalty
    gamma: float = 0.8         # target retained fraction
    tau: float = 0.6           # Gumbel-Softmax temperature
    learning_rate: float = 2e-3
    epochs: int = 5
    batch_size: int = 8
    attn_from_masked: bool = True
    # step decay stills the count-threshold bias once the ranking has formed
    lr_decay_after: int = 3
    lr_decay_factor: float = 0.25

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidConfigError("alpha and beta must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidConfigError("gamma must lie in [0, 1]")
        if not self.tau > 0:
            raise InvalidConfigError("tau must be > 0")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("learning_rate, epochs, batch_size must be positive")
        if self.lr_decay_after < 0 or not 0.0 < self.lr_decay_factor <= 1.0:
            raise InvalidConfigError(
                "lr_decay_after must be >= 0 and lr_decay_factor in (0, 1]")


def build_context(model_params, patches, text_tokens):
    """Embedded sequence z the purifier reads: visual rows then text rows."""
    parts = [embed_visual(model_params, np.asarray(patches, dtype=tc.DTYPE))]
    if len(text_tokens):
        parts.append(embed_tokens(model_params, list(text_tokens)))
    return tc.concat(parts, axis=0) if len(parts) > 1 else parts[0]


def training_loss(model_params, config: ModelConfig, pp, pcfg: PurifierConfig,
                  tcfg: PurifierTrainConfig, patches, prompt, y, t: int,
                  rng: Rng | None = None, noise: np.ndarray | None = None):
    """Single-step purifier objective at decoding step ``t`` of caption ``y``.

    Minimizes -(masked log-ratio of y_t + alpha * attention mass) plus
    beta * |retained fraction - gamma|, with the hard mask relaxed by
    Gumbel-Softmax noise.  Model weights are left as plain arrays, so only
    purifier parameters receive gradients.
    """
    y = list(y)
    if not 0 <= t < len(y):
        raise InvalidInputError(f"step index t={t} out of range for caption of {len(y)}")
    prefix = y[:t]
    target = int(y[t])
    if not 0 <= target < config.vocab_size:
        raise InvalidInputError(f"token {target} outside vocabulary")

    z = build_context(model_params, patches, list(prompt) + prefix)
    dist = purifier_forward(pp, pcfg, z, config.n_visual)
    if noise is None:
        noise = rng.gumbel(tc.value_of(dist.logits).shape) if rng is not None else None
    soft = tc.gumbel_softmax(dist.logits, tcfg.tau, noise=noise, axis=-1)
    mask = VisualMask(soft[:, 1])

    trace = forward(model_params, config, patches, list(prompt), prefix, mask=mask)
    lp_v = tc.log_softmax(trace.logits)[target]

    text_trace = forward(model_params, config, None, list(prompt), prefix)
    probs_x = tc.softmax(tc.value_of(text_trace.logits))
    lp_x = float(np.log(max(float(probs_x[target]), tc.PROB_FLOOR)))

    if tcfg.attn_from_masked:
        attn = attn_aggregate(trace, config.purify_layer, mask=mask)
    else:
        plain = forward(model_params, config, patches, list(prompt), prefix)
        attn = float(tc.value_of(attn_aggregate(plain, config.purify_layer)))

    score = tc.add(tc.sub(lp_v, lp_x), tc.mul(attn, tcfg.alpha))
    penalty = tc.mul(retention_penalty(mask.weights, tcfg.gamma), tcfg.beta)
    return tc.add(tc.mul(score, -1.0), penalty)


def train_purifier(model_params, config: ModelConfig, pp_init: dict[str, np.ndarray],
                   pcfg: PurifierConfig, tcfg: PurifierTrainConfig, corpus, rng: Rng,
                   on_epoch: Callable | None = None) -> dict[str, np.ndarray]:
    """Optimize the purifier on (patches, prompt, caption) triples.

    One uniformly random step index per caption per epoch; fresh Gumbel
    noise per loss evaluation; adaptive-moment updates.
    """
    corpus = list(corpus)
    if not corpus:
        raise InvalidInputError("empty purifier training corpus")
    nodes = {k: Node(v.copy()) for k, v in pp_init.items()}
    opt = tc.Adam(nodes, lr=tcfg.learning_rate)
    order_rng = rng.split("order")
    step_rng = rng.split("steps")
    noise_rng = rng.split("gumbel")

    for epoch in range(tcfg.epochs):
        if epoch >= tcfg.lr_decay_after:
            opt.lr = tcfg.learning_rate * tcfg.lr_decay_factor
        order = order_rng.permutation(len(corpus))
        epoch_loss = 0.0
        pending = 0
        for j, idx in enumerate(order):
            patches, prompt, caption = corpus[idx]
            t = int(step_rng.integers(0, len(caption)))
            loss = training_loss(model_params, config, nodes, pcfg, tcfg,
                                 patches, prompt, caption, t, rng=noise_rng)
            lv = float(loss.item())
            if not math.isfinite(lv):
                raise NumericalError(f"purifier loss became non-finite at epoch {epoch}")
            epoch_loss += lv
            tc.backward(loss)
            pending += 1
            if pending == tcfg.batch_size or j == len(order) - 1:
                for node in nodes.values():
                    if node.grad is not None:
                        node.grad = node.grad / pending
                opt.step()
                _check_finite_params(nodes, epoch)
                opt.zero_grad()
                pending = 0
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss / len(corpus))
    return {k: n.value for k, n in nodes.items()}
