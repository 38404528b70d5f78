"""Reusable network blocks built on the autodiff tape.

Everything here is a plain function over (graph, parameter-tensor dict,
inputs); models own the parameter arrays and bind them to a fresh graph each
step.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-a, a, size=shape)


def init_dense(rng, prefix: str, d_in: int, d_out: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w": glorot_uniform(rng, d_in, d_out),
        f"{prefix}.b": np.zeros(d_out),
    }


def dense(p: dict, prefix: str, x, activation: str | None = None):
    y = ad.affine(x, p[f"{prefix}.w"], p[f"{prefix}.b"])
    if activation == "relu":
        y = ad.relu(y)
    elif activation == "tanh":
        y = ad.tanh(y)
    elif activation == "sigmoid":
        y = ad.sigmoid(y)
    elif activation is not None:
        raise ValueError(f"unknown activation: {activation}")
    return y


def init_mlp(rng, prefix: str, dims: list[int]) -> dict[str, np.ndarray]:
    """Stack of dense layers; dims = [d_in, h1, ..., d_out]."""
    params = {}
    for i in range(len(dims) - 1):
        params.update(init_dense(rng, f"{prefix}.l{i}", dims[i], dims[i + 1]))
    return params


def mlp(p: dict, prefix: str, x, n_layers: int, head_activation: str | None = None):
    """Hidden layers use relu; the final layer takes `head_activation`."""
    for i in range(n_layers):
        last = i == n_layers - 1
        x = dense(p, f"{prefix}.l{i}", x, head_activation if last else "relu")
    return x


# -- gated recurrent unit -----------------------------------------------------

def init_gru(rng, prefix: str, d_in: int, d_hidden: int) -> dict[str, np.ndarray]:
    d = d_in + d_hidden
    params = {}
    for gate in ("z", "r", "h"):
        params.update(init_dense(rng, f"{prefix}.{gate}", d, d_hidden))
    return params


def gru_step(p: dict, prefix: str, x, h):
    """One GRU step: x (B, d_in), h (B, d_hidden) -> new hidden (B, d_hidden).

    Update/reset gates are sigmoid; the candidate state is tanh.
    """
    xh = ad.concat([x, h])
    z = dense(p, f"{prefix}.z", xh, "sigmoid")
    r = dense(p, f"{prefix}.r", xh, "sigmoid")
    xrh = ad.concat([x, r * h])
    h_cand = dense(p, f"{prefix}.h", xrh, "tanh")
    keep = (z * -1.0) + 1.0
    return (keep * h) + (z * h_cand)


def run_gru(p: dict, prefix: str, xs: list, h0):
    """Run a GRU over per-step inputs, returning all hidden states."""
    hs = []
    h = h0
    for x in xs:
        h = gru_step(p, prefix, x, h)
        hs.append(h)
    return hs


# -- self-attention encoder ---------------------------------------------------

def init_attention_encoder(
    rng, prefix: str, n_layers: int, d_model: int, n_heads: int, d_ff: int
) -> dict[str, np.ndarray]:
    params = {}
    for layer in range(n_layers):
        lp = f"{prefix}.layer{layer}"
        for name in ("q", "k", "v", "o"):
            params.update(init_dense(rng, f"{lp}.{name}", d_model, d_model))
        params.update(init_dense(rng, f"{lp}.ff1", d_model, d_ff))
        params.update(init_dense(rng, f"{lp}.ff2", d_ff, d_model))
    return params


def attention_encoder(
    p: dict,
    prefix: str,
    x,
    n_layers: int,
    n_heads: int,
    collect_weights: list | None = None,
):
    """Bidirectional multi-head self-attention with residual connections.

    x is (B, K, d_model).  If `collect_weights` is a list, the per-head
    attention matrices (B, K, K) of the first layer are appended to it.
    """
    d_model = x.shape[-1]
    if d_model % n_heads:
        raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    d_head = d_model // n_heads
    scale = 1.0 / np.sqrt(d_head)
    for layer in range(n_layers):
        lp = f"{prefix}.layer{layer}"
        q = dense(p, f"{lp}.q", x)
        k = dense(p, f"{lp}.k", x)
        v = dense(p, f"{lp}.v", x)
        heads = []
        for h in range(n_heads):
            lo, hi = h * d_head, (h + 1) * d_head
            qh = ad.slice_last(q, lo, hi)
            kh = ad.slice_last(k, lo, hi)
            vh = ad.slice_last(v, lo, hi)
            scores = ad.matmul(qh, ad.swap_last(kh)) * scale
            weights = ad.softmax(scores)
            if collect_weights is not None and layer == 0:
                collect_weights.append(weights.values)
            heads.append(ad.matmul(weights, vh))
        attended = dense(p, f"{lp}.o", ad.concat(heads))
        x = x + attended
        ff = dense(p, f"{lp}.ff2", dense(p, f"{lp}.ff1", x, "relu"))
        x = x + ff
    return x


def stack_steps(tensors):
    """Stack per-step (B, d) tensors into (B, K, d)."""
    g = tensors[0].graph
    b, d = tensors[0].shape
    cols = [ad.reshape(t, (b, 1, d)) for t in tensors]
    return g.apply("concat", tuple(cols), axis=1)


# -- numpy twins of the blocks above, for no-gradient paths -------------------
# These must mirror the tape versions exactly; a test pins bit-equality.

def _np_sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dense_np(p: dict, prefix: str, x: np.ndarray, activation: str | None = None):
    y = x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]
    if activation == "relu":
        return np.maximum(y, 0.0)
    if activation == "tanh":
        return np.tanh(y)
    if activation == "sigmoid":
        return _np_sigmoid(y)
    if activation is None:
        return y
    raise ValueError(f"unknown activation: {activation}")


def mlp_np(p: dict, prefix: str, x: np.ndarray, n_layers: int,
           head_activation: str | None = None):
    for i in range(n_layers):
        last = i == n_layers - 1
        x = dense_np(p, f"{prefix}.l{i}", x, head_activation if last else "relu")
    return x


def gru_step_np(p: dict, prefix: str, x: np.ndarray, h: np.ndarray):
    xh = np.concatenate([x, h], axis=-1)
    z = dense_np(p, f"{prefix}.z", xh, "sigmoid")
    r = dense_np(p, f"{prefix}.r", xh, "sigmoid")
    xrh = np.concatenate([x, r * h], axis=-1)
    h_cand = dense_np(p, f"{prefix}.h", xrh, "tanh")
    keep = (z * -1.0) + 1.0
    return (keep * h) + (z * h_cand)
