"""Toy multimodal autoregressive transformer.

A causal decoder over a sequence of visual patch embeddings followed by
text tokens.  Visual patches enter through a learned linear projection,
text through a token embedding table; learned absolute positions are added
to both.  A soft visual mask, when present, adds ln(weight) to every
attention logit pointing at a visual position in layers at or above the
configured purification layer, so weight 1 is a no-op and weight 0
suppresses the token to numerical removal.

The forward pass is written once over the tensorcore dispatch ops: called
with plain arrays it is pure numpy; called with any tape Node (trainable
parameters, or a soft mask during purifier training) exactly the affected
subgraph is recorded for backprop.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import store
from . import tensorcore as tc
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    NumericalError,
    SequenceTooLongError,
)
from .tensorcore import Node, Rng


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    n_visual: int = 16
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    n_layers: int = 4
    max_seq: int = 96
    purify_layer: int = 0
    patch_dim: int = 32

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidConfigError("vocab_size must be >= 2")
        if self.n_visual < 1:
            raise InvalidConfigError("n_visual must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise InvalidConfigError(
                f"d_model ({self.d_model}) must equal n_heads*d_head "
                f"({self.n_heads}*{self.d_head})"
            )
        if self.n_layers < 1:
            raise InvalidConfigError("n_layers must be >= 1")
        if not 0 <= self.purify_layer < self.n_layers:
            raise InvalidConfigError(
                f"purify_layer {self.purify_layer} out of range [0, {self.n_layers})"
            )
        if self.max_seq < self.n_visual + 2:
            raise InvalidConfigError("max_seq too small for visual tokens plus text")
        if self.patch_dim < 1:
            raise InvalidConfigError("patch_dim must be >= 1")

    @property
    def mlp_hidden(self) -> int:
        return 4 * self.d_model


@dataclass
class VisualMask:
    """Per-visual-token retention weights in [0, 1]; hard masks are {0, 1}."""

    weights: np.ndarray | Node
    hard: bool = False

    def __post_init__(self):
        w = tc.value_of(self.weights)
        if w.ndim != 1:
            raise InvalidInputError("mask weights must be a 1-D vector")
        if not np.all(np.isfinite(w)):
            raise InvalidInputError("mask weights must be finite")
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise InvalidInputError("mask weights must lie in [0, 1]")
        if self.hard and not np.all((w == 0.0) | (w == 1.0)):
            raise InvalidInputError("hard mask weights must be exactly 0 or 1")

    @property
    def n_retained(self) -> int:
        return int(np.sum(tc.value_of(self.weights) > 0.5))


def all_ones_mask(n_visual: int) -> VisualMask:
    return VisualMask(np.ones(n_visual, dtype=tc.DTYPE), hard=True)


@dataclass(frozen=True)
class SeqLayout:
    """Which positions of the flattened sequence play which role."""

    n_visual: int
    n_prompt: int
    n_generated: int

    @property
    def total(self) -> int:
        return self.n_visual + self.n_prompt + self.n_generated


@dataclass
class ForwardTrace:
    """Logits at the last position plus per-layer attention and the layout."""

    logits: np.ndarray | Node
    attention: list
    layout: SeqLayout


# ---------------------------------------------------------------------------
# parameters


def init_lvlm(config: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    """Random parameter set; small init keeps early logits O(0.1)."""
    std = 0.02
    p: dict[str, np.ndarray] = {
        "tok_emb": rng.normal((config.vocab_size, config.d_model), std=std),
        "pos_emb": rng.normal((config.max_seq, config.d_model), std=std),
        "patch_w": rng.normal((config.patch_dim, config.d_model), std=std),
        "patch_b": np.zeros(config.d_model, dtype=tc.DTYPE),
    }
    d, m = config.d_model, config.mlp_hidden
    for i in range(config.n_layers):
        p[f"L{i}.ln1_g"] = np.ones(d, dtype=tc.DTYPE)
        p[f"L{i}.ln1_b"] = np.zeros(d, dtype=tc.DTYPE)
        p[f"L{i}.wq"] = rng.normal((d, d), std=std)
        p[f"L{i}.wk"] = rng.normal((d, d), std=std)
        p[f"L{i}.wv"] = rng.normal((d, d), std=std)
        p[f"L{i}.wo"] = rng.normal((d, d), std=std)
        p[f"L{i}.ln2_g"] = np.ones(d, dtype=tc.DTYPE)
        p[f"L{i}.ln2_b"] = np.zeros(d, dtype=tc.DTYPE)
        p[f"L{i}.mlp_w1"] = rng.normal((d, m), std=std)
        p[f"L{i}.mlp_b1"] = np.zeros(m, dtype=tc.DTYPE)
        p[f"L{i}.mlp_w2"] = rng.normal((m, d), std=std)
        p[f"L{i}.mlp_b2"] = np.zeros(d, dtype=tc.DTYPE)
    p["lnf_g"] = np.ones(d, dtype=tc.DTYPE)
    p["lnf_b"] = np.zeros(d, dtype=tc.DTYPE)
    p["unembed"] = rng.normal((d, config.vocab_size), std=std)
    return p


def n_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(tc.value_of(v).size for v in params.values()))


def save_model(path, params: dict[str, np.ndarray], config: ModelConfig) -> None:
    store.save(path, {"kind": "lvlm", **asdict(config)}, params)


def load_model(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    config, arrays = store.load(path)
    config = dict(config)
    if config.pop("kind", None) != "lvlm":
        raise InvalidInputError(f"{path} does not hold a model checkpoint")
    cfg = ModelConfig(**config)
    expected = set(init_lvlm(cfg, Rng(0)))
    if set(arrays) != expected:
        raise InvalidInputError("checkpoint arrays do not match the model layout")
    return arrays, cfg


# ---------------------------------------------------------------------------
# forward


def embed_visual(params, patches, visual_hook: Callable | None = None):
    """Project patch vectors into the model width (hook applies first)."""
    if visual_hook is not None:
        patches = visual_hook(patches)
    return tc.add(tc.matmul(patches, params["patch_w"]), params["patch_b"])


def embed_tokens(params, tokens: Sequence[int]):
    return params["tok_emb"][np.asarray(tokens, dtype=np.intp)]


def _check_tokens(tokens, vocab_size: int, what: str) -> list[int]:
    out = []
    for t in tokens:
        t = int(t)
        if not 0 <= t < vocab_size:
            raise InvalidInputError(f"{what} token {t} outside vocabulary [0, {vocab_size})")
        out.append(t)
    return out


def _hidden_states(params, config: ModelConfig, visual, tokens: list[int],
                   mask: VisualMask | None, visual_hook: Callable | None = None,
                   physical_prune: bool = False):
    """Run the stack; returns (final hidden states (n, d), attention list).

    With ``physical_prune`` and a hard mask, dropped visual rows are removed
    from the sequence at the purification layer (keeping survivors'
    positions) instead of attention-biased away; equivalent on the final
    logits to float tolerance and cheaper, so decoding uses it.
    """
    n_vis = 0
    parts = []
    if visual is not None:
        vis_val = np.asarray(tc.value_of(visual), dtype=tc.DTYPE) if not isinstance(visual, Node) else visual
        vshape = tc.value_of(vis_val).shape
        if vshape != (config.n_visual, config.patch_dim):
            raise InvalidInputError(
                f"visual patches must have shape ({config.n_visual}, {config.patch_dim}), got {vshape}"
            )
        parts.append(embed_visual(params, vis_val, visual_hook))
        n_vis = config.n_visual
    elif mask is not None:
        raise InvalidInputError("mask given without visual tokens")

    if mask is not None and tc.value_of(mask.weights).shape != (config.n_visual,):
        raise InvalidInputError("mask length must equal the visual token count")

    if tokens:
        parts.append(embed_tokens(params, tokens))
    if not parts:
        raise InvalidInputError("empty sequence: need visual patches or tokens")

    x = parts[0] if len(parts) == 1 else tc.concat(parts, axis=0)
    n = tc.value_of(x).shape[0]
    if n > config.max_seq:
        raise SequenceTooLongError(f"sequence length {n} exceeds max_seq {config.max_seq}")
    x = tc.add(x, params["pos_emb"][:n])

    # ln(weight) column bias toward visual positions, layers >= purify_layer
    mask_bias = None
    kept_rows = None
    if mask is not None:
        if physical_prune and mask.hard:
            w = tc.value_of(mask.weights)
            kept_rows = np.concatenate(
                [np.flatnonzero(w > 0.5), np.arange(n_vis, n)]).astype(np.intp)
            if kept_rows.size == 0:
                raise InvalidInputError("pruning removed the whole sequence")
        else:
            lnw = tc.log(tc.clip_min(mask.weights, 1e-10))
            if n > n_vis:
                lnw = tc.concat([lnw, np.zeros(n - n_vis, dtype=tc.value_of(lnw).dtype)])
            mask_bias = lnw

    keep = np.tril(np.ones((n, n), dtype=tc.DTYPE))
    scale = 1.0 / math.sqrt(config.d_head)
    attention = []
    h = x
    for i in range(config.n_layers):
        if kept_rows is not None and i == config.purify_layer:
            h = h[kept_rows]
            n = kept_rows.size
            keep = np.tril(np.ones((n, n), dtype=tc.DTYPE))
        a = tc.layer_norm(h, params[f"L{i}.ln1_g"], params[f"L{i}.ln1_b"])

        def heads(w):
            proj = tc.matmul(a, w)
            return tc.swapaxes(tc.reshape(proj, (n, config.n_heads, config.d_head)), 0, 1)

        q = heads(params[f"L{i}.wq"])
        k = heads(params[f"L{i}.wk"])
        v = heads(params[f"L{i}.wv"])
        scores = tc.mul(tc.matmul(q, tc.swapaxes(k, 1, 2)), scale)
        if mask_bias is not None and i >= config.purify_layer:
            scores = tc.add(scores, mask_bias)
        attn = tc.masked_softmax(scores, keep)
        attention.append(attn)
        ctx = tc.reshape(tc.swapaxes(tc.matmul(attn, v), 0, 1), (n, config.d_model))
        h = tc.add(h, tc.matmul(ctx, params[f"L{i}.wo"]))

        m = tc.layer_norm(h, params[f"L{i}.ln2_g"], params[f"L{i}.ln2_b"])
        inner = tc.gelu(tc.add(tc.matmul(m, params[f"L{i}.mlp_w1"]), params[f"L{i}.mlp_b1"]))
        h = tc.add(h, tc.add(tc.matmul(inner, params[f"L{i}.mlp_w2"]), params[f"L{i}.mlp_b2"]))

    h = tc.layer_norm(h, params["lnf_g"], params["lnf_b"])
    return h, attention


def forward(params, config: ModelConfig, visual, prompt_tokens, generated_tokens,
            mask: VisualMask | None = None, visual_hook: Callable | None = None,
            physical_prune: bool = False) -> ForwardTrace:
    """One full-sequence pass; logits are for the next-token distribution
    at the last position."""
    prompt = _check_tokens(prompt_tokens, config.vocab_size, "prompt")
    generated = _check_tokens(generated_tokens, config.vocab_size, "generated")
    h, attention = _hidden_states(params, config, visual, prompt + generated, mask,
                                  visual_hook, physical_prune)
    logits = tc.matmul(h[-1], params["unembed"])
    layout = SeqLayout(
        n_visual=config.n_visual if visual is not None else 0,
        n_prompt=len(prompt),
        n_generated=len(generated),
    )
    if not isinstance(logits, Node) and not np.all(np.isfinite(logits)):
        raise NumericalError("forward produced non-finite logits")
    return ForwardTrace(logits=logits, attention=attention, layout=layout)


def attn_aggregate(trace: ForwardTrace, layer: int, mask: VisualMask | None = None):
    """Head-averaged attention mass from the last position onto visual
    tokens at ``layer``, optionally weighted by mask weights."""
    if not 0 <= layer < len(trace.attention):
        raise InvalidInputError(f"layer {layer} out of range [0, {len(trace.attention)})")
    n_vis = trace.layout.n_visual
    if n_vis == 0:
        raise InvalidInputError("attn_aggregate needs visual tokens in the sequence")
    attn = trace.attention[layer]
    last_row_visual = attn[:, -1, :n_vis]  # (heads, n_visual)
    if mask is not None:
        last_row_visual = tc.mul(last_row_visual, mask.weights)
    n_heads = tc.value_of(attn).shape[0]
    total = tc.div(tc.sum_(last_row_visual), float(n_heads))
    return total if isinstance(total, Node) else float(total)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class LvlmTrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 8
    batch_size: int = 8
    image_dropout: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("learning_rate, epochs, batch_size must be positive")
        if not 0.0 <= self.image_dropout <= 1.0:
            raise InvalidConfigError("image_dropout must lie in [0, 1]")


def caption_loss(params, config: ModelConfig, visual, prompt: list[int], caption: list[int]):
    """Mean next-token cross-entropy over the caption positions."""
    if not caption:
        raise InvalidInputError("caption must be non-empty")
    prompt = _check_tokens(prompt, config.vocab_size, "prompt")
    caption = _check_tokens(caption, config.vocab_size, "caption")
    if not prompt and visual is None:
        raise InvalidInputError("need visual patches or a prompt before the caption")
    tokens = prompt + caption
    h, _ = _hidden_states(params, config, visual, tokens, mask=None)
    n_ctx = (config.n_visual if visual is not None else 0) + len(prompt)
    # position j predicts token j+1; caption targets start right after the context
    rows = h[n_ctx - 1 : n_ctx - 1 + len(caption)]
    logits = tc.matmul(rows, params["unembed"])
    lsm = tc.log_softmax(logits, axis=-1)
    picked = lsm[(np.arange(len(caption)), np.asarray(caption, dtype=np.intp))]
    return tc.mul(tc.mean(picked), -1.0)


def _check_finite_params(nodes, epoch: int) -> None:
    # a diverged optimizer step poisons every later forward; fail at the source
    for name, node in nodes.items():
        if not np.all(np.isfinite(node.value)):
            raise NumericalError(
                f"parameter {name!r} became non-finite during epoch {epoch}")


def train_lvlm(corpus, config: ModelConfig, hyper: LvlmTrainConfig, rng: Rng,
               on_epoch: Callable | None = None) -> dict[str, np.ndarray]:
    """Train from scratch on (patches, prompt, caption) triples.

    Each example is presented without its image with probability
    ``image_dropout`` so the text-only branch learns the marginal language
    distribution the contrastive sampler subtracts.
    """
    corpus = list(corpus)
    if not corpus:
        raise InvalidInputError("empty training corpus")
    nodes = {k: Node(v.copy()) for k, v in init_lvlm(config, rng.split("init")).items()}
    opt = tc.Adam(nodes, lr=hyper.learning_rate)
    order_rng = rng.split("order")
    drop_rng = rng.split("dropout")

    for epoch in range(hyper.epochs):
        order = order_rng.permutation(len(corpus))
        epoch_loss = 0.0
        pending = 0
        for j, idx in enumerate(order):
            patches, prompt, caption = corpus[idx]
            use_visual = patches is not None and drop_rng.uniform() >= hyper.image_dropout
            loss = caption_loss(nodes, config, patches if use_visual else None,
                                list(prompt), list(caption))
            lv = float(loss.item())
            if not math.isfinite(lv):
                raise NumericalError(f"training loss became non-finite at epoch {epoch}")
            epoch_loss += lv
            tc.backward(loss)
            pending += 1
            if pending == hyper.batch_size or j == len(order) - 1:
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
