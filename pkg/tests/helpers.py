"""Independent numpy reference implementations used as test oracles.

These deliberately do not reuse the package's forward pass: they rebuild
the transformer math from the architecture description so that agreement
is evidence, not tautology.
"""

from __future__ import annotations

import numpy as np


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def reference_forward(params, config, visual, tokens, keep_visual=None):
    """Last-position logits of the toy transformer, recomputed from scratch.

    ``keep_visual`` is a boolean vector over visual positions; positions
    marked False are physically removed from the sequence at the
    purification layer (the rebuild-sequence oracle for hard masks).
    Positional embeddings are assigned before removal, as in the masked
    forward they stand in for.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    rows = []
    if visual is not None:
        rows.append(np.asarray(visual, dtype=np.float64) @ params["patch_w"] + params["patch_b"])
    if tokens:
        rows.append(params["tok_emb"][np.asarray(tokens, dtype=np.intp)])
    x = np.concatenate(rows, axis=0)
    n = x.shape[0]
    x = x + params["pos_emb"][:n]

    n_vis = config.n_visual if visual is not None else 0
    kept = np.arange(n)
    if keep_visual is not None:
        kept = np.concatenate(
            [np.flatnonzero(np.asarray(keep_visual, dtype=bool)), np.arange(n_vis, n)]
        )

    h = x
    for i in range(config.n_layers):
        if keep_visual is not None and i == config.purify_layer:
            h = h[kept]
        m = h.shape[0]
        a = _layer_norm(h, params[f"L{i}.ln1_g"], params[f"L{i}.ln1_b"])
        q = a @ params[f"L{i}.wq"]
        k = a @ params[f"L{i}.wk"]
        v = a @ params[f"L{i}.wv"]
        q = q.reshape(m, config.n_heads, config.d_head).transpose(1, 0, 2)
        k = k.reshape(m, config.n_heads, config.d_head).transpose(1, 0, 2)
        v = v.reshape(m, config.n_heads, config.d_head).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(config.d_head)
        causal = np.triu(np.ones((m, m), dtype=bool), k=1)
        scores = np.where(causal, -np.inf, scores)
        attn = _softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(1, 0, 2).reshape(m, config.d_model)
        h = h + ctx @ params[f"L{i}.wo"]
        mm = _layer_norm(h, params[f"L{i}.ln2_g"], params[f"L{i}.ln2_b"])
        h = h + _gelu(mm @ params[f"L{i}.mlp_w1"] + params[f"L{i}.mlp_b1"]) @ params[f"L{i}.mlp_w2"] + params[f"L{i}.mlp_b2"]

    h = _layer_norm(h, params["lnf_g"], params["lnf_b"])
    return h[-1] @ params["unembed"]
