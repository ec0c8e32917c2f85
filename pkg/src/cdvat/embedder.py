"""Window-level speaker embedder with explicit forward and reverse passes.

The network is a stack of context-splicing (TDNN) layers with ReLU, evaluated
at a fixed set of placements across the window, combined by single-head
additive self-attention, projected linearly and L2-normalised:

    h^l_t   = relu(W_l [h^{l-1}_{t+c} for c in contexts_l] + b_l)
    a       = softmax_t(w . tanh(V^T h_t))
    y       = P^T sum_t a_t h_t + p
    e       = y / |y|

All arrays are float64 and batched over windows: ``X`` has shape
``(batch, window_len, input_dim)``.
"""
from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np

from .numerics import DegenerateVectorError


@dataclass(frozen=True)
class EmbedderConfig:
    input_dim: int = 16
    layer_contexts: tuple = ((-1, 0, 1), (-1, 0, 1), (0,))
    layer_sizes: tuple = (32, 32, 16)
    attention_hidden: int = 16
    embedding_dim: int = 8
    window_len: int = 25
    base_shift: int = 12
    context_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layer_contexts",
                           tuple(tuple(sorted(int(c) for c in ctx)) for ctx in self.layer_contexts))
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        self.validate()

    def validate(self):
        if len(self.layer_contexts) != len(self.layer_sizes) or not self.layer_sizes:
            raise ValueError("layer_contexts and layer_sizes must be non-empty and of equal length")
        if any(len(c) == 0 for c in self.layer_contexts):
            raise ValueError("every layer needs at least one context offset")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.input_dim < 1 or self.attention_hidden < 1 or self.context_stride < 1 or self.base_shift < 1:
            raise ValueError("input_dim, attention_hidden, context_stride and base_shift must be >= 1")
        if self.window_len < self.receptive_field:
            raise ValueError(f"window_len {self.window_len} is shorter than the receptive field "
                             f"{self.receptive_field}")
        if (self.window_len - self.receptive_field) % self.context_stride:
            raise ValueError("(window_len - receptive_field) must be a multiple of context_stride")

    @property
    def receptive_field(self):
        return 1 + sum(c[-1] - c[0] for c in self.layer_contexts)

    @property
    def n_placements(self):
        return (self.window_len - self.receptive_field) // self.context_stride + 1

    def to_dict(self):
        d = asdict(self)
        d["layer_contexts"] = [list(c) for c in self.layer_contexts]
        d["layer_sizes"] = list(self.layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def full_scale(cls):
        """The full-size architecture: 30-d input, 213-frame windows, 34 placements."""
        return cls(input_dim=30, layer_contexts=((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,)),
                   layer_sizes=(512, 512, 512, 256), attention_hidden=128, embedding_dim=32,
                   window_len=213, base_shift=100, context_stride=6)


def param_shapes(cfg, n_classes):
    shapes = {}
    d_in = cfg.input_dim
    for i, (ctx, width) in enumerate(zip(cfg.layer_contexts, cfg.layer_sizes)):
        shapes[f"tdnn{i}.W"] = (len(ctx) * d_in, width)
        shapes[f"tdnn{i}.b"] = (width,)
        d_in = width
    shapes["att.V"] = (d_in, cfg.attention_hidden)
    shapes["att.w"] = (cfg.attention_hidden,)
    shapes["proj.W"] = (d_in, cfg.embedding_dim)
    shapes["proj.b"] = (cfg.embedding_dim,)
    shapes["cls.W"] = (cfg.embedding_dim, n_classes)
    return shapes


def init_parameters(cfg, n_classes, rng):
    params = {}
    for name, shape in param_shapes(cfg, n_classes).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name == "att.w":
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif name.startswith("tdnn"):
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return params


def check_parameters(params, cfg):
    n_classes = params["cls.W"].shape[1] if "cls.W" in params else 0
    expected = param_shapes(cfg, n_classes)
    if set(params) != set(expected):
        raise ValueError(f"parameter names {sorted(params)} do not match config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name} has shape {params[name].shape}, config expects {shape}")


def copy_parameters(params):
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# windowing

class WindowPlan(NamedTuple):
    starts: list
    pad_left: int
    pad_right: int


def window_starts(T, cfg):
    """Window start indices for an utterance of ``T`` frames.

    Longer utterances get N = ceil((T - W) / base_shift) shifts of the
    real-valued size (T - W) / N, rounded half-up; shorter ones get a single
    centred window with replication padding (odd remainder goes right).
    """
    W = cfg.window_len
    if T < 1:
        raise ValueError("T must be >= 1")
    if T <= W:
        pad = W - T
        return WindowPlan([0], pad // 2, pad - pad // 2)
    span = T - W
    n = -(-span // cfg.base_shift)
    starts = [(2 * i * span + n) // (2 * n) for i in range(n + 1)]
    return WindowPlan(starts, 0, 0)


def extract_windows(x, cfg, plan=None):
    """All windows of utterance ``x`` (T x F) as an array (N, window_len, F)."""
    x = np.asarray(x)
    if plan is None:
        plan = window_starts(x.shape[0], cfg)
    if plan.pad_left or plan.pad_right:
        x = np.concatenate([np.repeat(x[:1], plan.pad_left, axis=0), x,
                            np.repeat(x[-1:], plan.pad_right, axis=0)], axis=0)
    W = cfg.window_len
    return np.stack([x[s:s + W] for s in plan.starts])


def window_at(x, start, cfg):
    """One window starting at ``start``; short utterances are padded as in ``window_starts``."""
    if x.shape[0] <= cfg.window_len:
        return extract_windows(x, cfg)[0]
    return np.asarray(x[start:start + cfg.window_len])


# ---------------------------------------------------------------------------
# forward / backward

def forward(X, params, cfg):
    """Embed a batch of windows. Returns ``(E, cache)`` with E of shape (B, embedding_dim)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (cfg.window_len, cfg.input_dim):
        raise ValueError(f"expected windows of shape (B, {cfg.window_len}, {cfg.input_dim}), got {X.shape}")
    h = X
    layers = []
    for i, ctx in enumerate(cfg.layer_contexts):
        n_out = h.shape[1] - (ctx[-1] - ctx[0])
        spliced = np.concatenate([h[:, c - ctx[0]:c - ctx[0] + n_out] for c in ctx], axis=-1)
        z = spliced @ params[f"tdnn{i}.W"] + params[f"tdnn{i}.b"]
        layers.append((spliced, z))
        h = np.maximum(z, 0.0)
    hp = h[:, ::cfg.context_stride]
    u = np.tanh(hp @ params["att.V"])
    s = u @ params["att.w"]
    s = s - s.max(axis=1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=1, keepdims=True)
    pooled = np.einsum("bp,bph->bh", a, hp)
    y = pooled @ params["proj.W"] + params["proj.b"]
    ny = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(ny == 0.0) or not np.all(np.isfinite(ny)):
        raise DegenerateVectorError("pre-normalisation embedding has zero norm")
    E = y / ny
    cache = dict(X=X, layers=layers, h_last_len=h.shape[1], hp=hp, u=u, a=a, pooled=pooled, ny=ny, E=E)
    return E, cache


def backward(cache, params, cfg, dE, param_grad=True, input_grad=True):
    """Reverse pass for ``sum(dE * E)``. Returns ``(grads, dX)``; either may be None."""
    E, ny = cache["E"], cache["ny"]
    dE = np.asarray(dE, dtype=np.float64)
    if dE.shape != E.shape:
        raise ValueError(f"upstream gradient shape {dE.shape} does not match embeddings {E.shape}")
    grads = {} if param_grad else None
    dy = (dE - E * np.sum(E * dE, axis=1, keepdims=True)) / ny
    if param_grad:
        grads["proj.W"] = cache["pooled"].T @ dy
        grads["proj.b"] = dy.sum(axis=0)
    dpooled = dy @ params["proj.W"].T
    hp, a, u = cache["hp"], cache["a"], cache["u"]
    dhp = a[:, :, None] * dpooled[:, None, :]
    da = np.einsum("bph,bh->bp", hp, dpooled)
    ds = a * (da - np.sum(a * da, axis=1, keepdims=True))
    if param_grad:
        grads["att.w"] = np.einsum("bp,bpk->k", ds, u)
    dpre = ds[:, :, None] * params["att.w"] * (1.0 - u * u)
    if param_grad:
        grads["att.V"] = np.einsum("bph,bpk->hk", hp, dpre)
    dhp += dpre @ params["att.V"].T

    B = E.shape[0]
    dh = np.zeros((B, cache["h_last_len"], hp.shape[2]))
    dh[:, ::cfg.context_stride] = dhp
    for i in range(len(cfg.layer_contexts) - 1, -1, -1):
        ctx = cfg.layer_contexts[i]
        spliced, z = cache["layers"][i]
        dz = dh * (z > 0)
        if param_grad:
            grads[f"tdnn{i}.W"] = np.einsum("bli,blo->io", spliced, dz)
            grads[f"tdnn{i}.b"] = dz.sum(axis=(0, 1))
        if i == 0 and not input_grad:
            break
        dspl = dz @ params[f"tdnn{i}.W"].T
        d_in = spliced.shape[2] // len(ctx)
        n_out = dz.shape[1]
        dh = np.zeros((B, n_out + ctx[-1] - ctx[0], d_in))
        for k, c in enumerate(ctx):
            dh[:, c - ctx[0]:c - ctx[0] + n_out] += dspl[:, :, k * d_in:(k + 1) * d_in]
    dX = dh if input_grad else None
    if param_grad and "cls.W" in params:
        grads["cls.W"] = np.zeros_like(params["cls.W"])
    return grads, dX


def embed_window(x, params, cfg):
    """Unit-norm embedding of one (window_len x input_dim) window."""
    E, _ = forward(np.asarray(x)[None], params, cfg)
    return E[0]


def embed_windows(X, params, cfg):
    return forward(X, params, cfg)[0]


def embed_utterance(x, params, cfg):
    """Mean of the unit-norm window embeddings; deliberately not re-normalised."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("utterance must be a non-empty (T, F) matrix")
    return embed_windows(extract_windows(x, cfg), params, cfg).mean(axis=0)


def forward_backward(x, params, cfg, upstream_grad):
    """Gradients of ``upstream_grad . embed_window(x)`` w.r.t. the parameters and the input window."""
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != (cfg.embedding_dim,):
        raise ValueError(f"upstream gradient must have {cfg.embedding_dim} entries")
    _, cache = forward(np.asarray(x)[None], params, cfg)
    grads, dX = backward(cache, params, cfg, upstream_grad[None])
    return grads, dX[0]


# ---------------------------------------------------------------------------
# parameter files

PARAM_MAGIC = b"CDVATPRM"
PARAM_VERSION = 1


def parameters_to_bytes(params, cfg):
    from .container import pack
    return pack(PARAM_MAGIC, PARAM_VERSION, {"embedder": cfg.to_dict()}, dict(sorted(params.items())))


def parameters_from_bytes(data):
    from .container import unpack, FormatError
    meta, arrays = unpack(data, PARAM_MAGIC, PARAM_VERSION)
    try:
        cfg = EmbedderConfig.from_dict(meta["embedder"])
        check_parameters(arrays, cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"inconsistent parameter file: {exc}") from None
    return arrays, cfg


def save_parameters(params, cfg, path):
    from .container import atomic_write_bytes
    atomic_write_bytes(path, parameters_to_bytes(params, cfg))


def load_parameters(path):
    with open(path, "rb") as fh:
        return parameters_from_bytes(fh.read())
