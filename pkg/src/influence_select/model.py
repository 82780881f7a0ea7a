"""Desk-scale decoder-only transformer with exact float64 gradients.

Forward/backward are hand-written over numpy so every layer exposes a tap:
the per-token input activations x and pre-activation output gradients delta.
The row-major flattening of sum_t delta_t x_t^T is exactly the layer's weight
gradient, which is the convention all curvature code relies on.

Architecture notes (fixed once, documented here):
  - pre-norm residual blocks with parameter-free RMSNorm (no learnable gain,
    so the parameter set is exactly the projection matrices plus embeddings);
  - RoPE on Q and K (head_dim must be even);
  - SiLU activation in the two-matrix MLP;
  - no biases anywhere;
  - loss is the mean next-token cross-entropy over the L-1 predicting
    positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import DataError

RMS_EPS = 1e-6

TAP_KINDS = ("qkv-joint", "attn-out", "mlp-1", "mlp-2")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_context: int = 64
    mlp_ratio: float = 8.0 / 3.0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise DataError("hidden_dim must be divisible by n_heads")
        if self.head_dim % 2 != 0:
            raise DataError("head_dim must be even for rotary embeddings")
        if self.mlp_hidden < 1:
            raise DataError("mlp hidden size must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.hidden_dim))


@dataclass
class BlockParams:
    w_q: np.ndarray  # (d, d)
    w_k: np.ndarray  # (d, d)
    w_v: np.ndarray  # (d, d)
    w_o: np.ndarray  # (d, d)
    w_up: np.ndarray  # (f, d)
    w_down: np.ndarray  # (d, f)


@dataclass
class ParamSet:
    config: ModelConfig
    embed: np.ndarray  # (V, d)
    head: np.ndarray  # (V, d)
    layers: list[BlockParams]

    def iter_named(self):
        yield "embed", self.embed
        yield "head", self.head
        for i, blk in enumerate(self.layers):
            for nm in ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down"):
                yield f"layer{i}.{nm}", getattr(blk, nm)

    def copy(self) -> "ParamSet":
        return ParamSet(
            config=self.config,
            embed=self.embed.copy(),
            head=self.head.copy(),
            layers=[
                BlockParams(**{nm: getattr(b, nm).copy() for nm in
                               ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down")})
                for b in self.layers
            ],
        )

    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.iter_named())


@dataclass
class LayerTap:
    """Per-token (x, delta) pairs for one tracked weight matrix."""

    layer: int
    kind: str
    x: np.ndarray  # (T, d_in)
    delta: np.ndarray  # (T, d_out)

    def __post_init__(self):
        if self.x.shape[0] != self.delta.shape[0]:
            raise DataError("tap x and delta disagree on token count")


@dataclass(frozen=True)
class TrackedLayer:
    name: str
    layer: int
    kind: str
    d_out: int
    d_in: int

    @property
    def flat_dim(self) -> int:
        return self.d_out * self.d_in


def tracked_layers(cfg: ModelConfig, kinds=TAP_KINDS) -> list[TrackedLayer]:
    """Registry of influence-tracked layers, in a fixed flattening order.

    Embedding and output head are deliberately excluded from influence.
    """
    d, f = cfg.hidden_dim, cfg.mlp_hidden
    dims = {"qkv-joint": (3 * d, d), "attn-out": (d, d), "mlp-1": (f, d), "mlp-2": (d, f)}
    out = []
    for layer in range(cfg.n_layers):
        for kind in TAP_KINDS:
            if kind not in kinds:
                continue
            d_out, d_in = dims[kind]
            out.append(TrackedLayer(f"layer{layer}.{kind}", layer, kind, d_out, d_in))
    return out


def tracked_dim(cfg: ModelConfig, kinds=TAP_KINDS) -> int:
    return sum(t.flat_dim for t in tracked_layers(cfg, kinds))


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamSet:
    """Gaussian init scaled to keep activations O(1) under RMSNorm."""
    rng = np.random.default_rng(seed)
    d, f, v = cfg.hidden_dim, cfg.mlp_hidden, cfg.vocab_size

    def mat(rows, cols):
        return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

    layers = [
        BlockParams(
            w_q=mat(d, d), w_k=mat(d, d), w_v=mat(d, d), w_o=mat(d, d),
            w_up=mat(f, d), w_down=mat(d, f),
        )
        for _ in range(cfg.n_layers)
    ]
    return ParamSet(
        config=cfg,
        embed=rng.normal(0.0, 1.0, size=(v, d)),
        head=mat(v, d),
        layers=layers,
    )


def zeros_like_params(params: ParamSet) -> ParamSet:
    out = params.copy()
    for _, arr in out.iter_named():
        arr[...] = 0.0
    return out


# ---------------------------------------------------------------- primitives


def _rmsnorm(x):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * r


def _rmsnorm_backward(x, dy):
    d = x.shape[-1]
    ms = np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS
    r = ms ** -0.5
    dot = np.sum(dy * x, axis=-1, keepdims=True)
    return r * dy - x * (r ** 3) * dot / d


def _silu(u):
    s = 1.0 / (1.0 + np.exp(-u))
    return u * s


def _silu_grad(u):
    s = 1.0 / (1.0 + np.exp(-u))
    return s * (1.0 + u * (1.0 - s))


def rope_tables(cfg: ModelConfig, n_positions: int):
    """cos/sin tables of shape (n_positions, head_dim/2)."""
    half = cfg.head_dim // 2
    inv_freq = cfg.rope_base ** (-2.0 * np.arange(half) / cfg.head_dim)
    ang = np.arange(n_positions)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(x, cos, sin):
    """Rotate even/odd pairs of the last axis; x is (T, H, head_dim)."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    c, s = cos[:, None, :], sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out


def _rope_backward(dout, cos, sin):
    d1, d2 = dout[..., 0::2], dout[..., 1::2]
    c, s = cos[:, None, :], sin[:, None, :]
    dx = np.empty_like(dout)
    dx[..., 0::2] = d1 * c + d2 * s
    dx[..., 1::2] = -d1 * s + d2 * c
    return dx


# ------------------------------------------------------------------ forward


@dataclass
class ForwardCache:
    params: ParamSet
    tokens: np.ndarray
    layer_saves: list[dict] = field(default_factory=list)
    h_final: np.ndarray = None
    hn: np.ndarray = None
    logits: np.ndarray = None
    probs: np.ndarray = None
    loss: float = 0.0


def forward(params: ParamSet, tokens) -> tuple[float, ForwardCache]:
    """Mean next-token cross-entropy over positions; returns (loss, cache)."""
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 2:
        raise DataError("sequence must be 1-D with length >= 2")
    if tokens.size > cfg.max_context:
        raise DataError(f"sequence length {tokens.size} exceeds max_context {cfg.max_context}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DataError("token id outside vocabulary")

    T = tokens.size
    H, dh = cfg.n_heads, cfg.head_dim
    cos, sin = rope_tables(cfg, T)
    mask = np.tril(np.ones((T, T), dtype=bool))

    cache = ForwardCache(params=params, tokens=tokens)
    h = params.embed[tokens]
    for blk in params.layers:
        save: dict = {"h_in": h}
        x_attn = _rmsnorm(h)
        q = x_attn @ blk.w_q.T
        k = x_attn @ blk.w_k.T
        v = x_attn @ blk.w_v.T
        qh = q.reshape(T, H, dh)
        kh = k.reshape(T, H, dh)
        vh = v.reshape(T, H, dh)
        qr = rope_apply(qh, cos, sin)
        kr = rope_apply(kh, cos, sin)
        scores = np.einsum("thd,shd->hts", qr, kr) / np.sqrt(dh)
        scores = np.where(mask[None, :, :], scores, -np.inf)
        smax = scores.max(axis=2, keepdims=True)
        ex = np.exp(scores - smax)
        attn = ex / ex.sum(axis=2, keepdims=True)
        ctx = np.einsum("hts,shd->thd", attn, vh)
        attn_in = ctx.reshape(T, cfg.hidden_dim)
        attn_out = attn_in @ blk.w_o.T
        h = h + attn_out
        save.update(x_attn=x_attn, qr=qr, kr=kr, vh=vh, attn=attn,
                    attn_in=attn_in, scores=scores, h_mid=h)
        x_mlp = _rmsnorm(h)
        u = x_mlp @ blk.w_up.T
        act = _silu(u)
        mlp_out = act @ blk.w_down.T
        h = h + mlp_out
        save.update(x_mlp=x_mlp, u=u, act=act)
        cache.layer_saves.append(save)

    cache.h_final = h
    cache.hn = _rmsnorm(h)
    cache.logits = cache.hn @ params.head.T
    lmax = cache.logits.max(axis=1, keepdims=True)
    lex = np.exp(cache.logits - lmax)
    cache.probs = lex / lex.sum(axis=1, keepdims=True)
    n_pred = T - 1
    targets = tokens[1:]
    logp = np.log(cache.probs[np.arange(n_pred), targets])
    cache.loss = float(-logp.sum() / n_pred)
    return cache.loss, cache


def ce_dlogits(cache: ForwardCache) -> np.ndarray:
    """Gradient of the mean next-token loss with respect to the logits."""
    T = cache.tokens.size
    n_pred = T - 1
    dlogits = cache.probs.copy() / n_pred
    dlogits[np.arange(n_pred), cache.tokens[1:]] -= 1.0 / n_pred
    dlogits[n_pred:] = 0.0
    return dlogits


def backward(params: ParamSet, cache: ForwardCache):
    """Exact gradients of the cached loss plus per-layer taps.

    Returns (grads, taps) where grads is ParamSet-shaped and taps hold the
    per-token (x, delta) pairs for every tracked layer.
    """
    return backward_from_dlogits(params, cache, ce_dlogits(cache))


def backward_from_dlogits(params: ParamSet, cache: ForwardCache, dlogits: np.ndarray):
    """Backpropagate an arbitrary logit gradient through the cached forward."""
    if cache.params is not params:
        raise DataError("stale cache: it was produced by a different ParamSet")
    cfg = params.config
    tokens = cache.tokens
    T = tokens.size
    H = cfg.n_heads
    cos, sin = rope_tables(cfg, T)

    grads = zeros_like_params(params)
    taps: list[LayerTap] = []

    grads.head += dlogits.T @ cache.hn
    dhn = dlogits @ params.head
    dh = _rmsnorm_backward(cache.h_final, dhn)

    for li in range(cfg.n_layers - 1, -1, -1):
        blk = params.layers[li]
        save = cache.layer_saves[li]
        gblk = grads.layers[li]

        # MLP block
        delta_m2 = dh  # grad wrt w_down output
        gblk.w_down += delta_m2.T @ save["act"]
        dact = delta_m2 @ blk.w_down
        delta_m1 = dact * _silu_grad(save["u"])
        gblk.w_up += delta_m1.T @ save["x_mlp"]
        dx_mlp = delta_m1 @ blk.w_up
        dh = dh + _rmsnorm_backward(save["h_mid"], dx_mlp)
        taps.append(LayerTap(li, "mlp-2", x=save["act"], delta=delta_m2))
        taps.append(LayerTap(li, "mlp-1", x=save["x_mlp"], delta=delta_m1))

        # attention block
        delta_o = dh  # grad wrt w_o output
        gblk.w_o += delta_o.T @ save["attn_in"]
        d_attn_in = delta_o @ blk.w_o
        dctx = d_attn_in.reshape(T, H, cfg.head_dim)
        attn, vh, qr, kr = save["attn"], save["vh"], save["qr"], save["kr"]
        dattn = np.einsum("thd,shd->hts", dctx, vh)
        dvh = np.einsum("hts,thd->shd", attn, dctx)
        # softmax rows: masked-out entries have attn == 0 so contribute nothing
        dscores = attn * (dattn - np.sum(dattn * attn, axis=2, keepdims=True))
        dscores = dscores / np.sqrt(cfg.head_dim)
        dqr = np.einsum("hts,shd->thd", dscores, kr)
        dkr = np.einsum("hts,thd->shd", dscores, qr)
        dqh = _rope_backward(dqr, cos, sin)
        dkh = _rope_backward(dkr, cos, sin)
        delta_q = dqh.reshape(T, cfg.hidden_dim)
        delta_k = dkh.reshape(T, cfg.hidden_dim)
        delta_v = dvh.reshape(T, cfg.hidden_dim)
        x_attn = save["x_attn"]
        gblk.w_q += delta_q.T @ x_attn
        gblk.w_k += delta_k.T @ x_attn
        gblk.w_v += delta_v.T @ x_attn
        dx_attn = delta_q @ blk.w_q + delta_k @ blk.w_k + delta_v @ blk.w_v
        dh = dh + _rmsnorm_backward(save["h_in"], dx_attn)
        taps.append(LayerTap(li, "attn-out", x=save["attn_in"], delta=delta_o))
        taps.append(
            LayerTap(li, "qkv-joint", x=x_attn,
                     delta=np.concatenate([delta_q, delta_k, delta_v], axis=1))
        )

    np.add.at(grads.embed, tokens, dh)
    taps.reverse()
    return grads, taps


# ----------------------------------------------------------- gradient views


def layer_grad_matrix(grads: ParamSet, tl: TrackedLayer) -> np.ndarray:
    """The (d_out, d_in) weight-gradient matrix for one tracked layer."""
    blk = grads.layers[tl.layer]
    if tl.kind == "qkv-joint":
        return np.concatenate([blk.w_q, blk.w_k, blk.w_v], axis=0)
    if tl.kind == "attn-out":
        return blk.w_o
    if tl.kind == "mlp-1":
        return blk.w_up
    if tl.kind == "mlp-2":
        return blk.w_down
    raise DataError(f"unknown tap kind {tl.kind!r}")


def flat_layer_grads(grads: ParamSet, registry: list[TrackedLayer]) -> dict[str, np.ndarray]:
    """Row-major flattened gradients per tracked layer."""
    return {tl.name: layer_grad_matrix(grads, tl).ravel() for tl in registry}


def grad_of_sequence(params: ParamSet, tokens, registry=None) -> dict[str, np.ndarray]:
    registry = registry if registry is not None else tracked_layers(params.config)
    _, cache = forward(params, tokens)
    grads, _ = backward(params, cache)
    return flat_layer_grads(grads, registry)


def grad_of_set(params: ParamSet, sequences, registry=None) -> dict[str, np.ndarray]:
    """Mean of per-sequence tracked-layer gradients, flattened row-major."""
    if not sequences:
        raise DataError("grad_of_set needs a non-empty sequence set")
    registry = registry if registry is not None else tracked_layers(params.config)
    acc = {tl.name: np.zeros(tl.flat_dim) for tl in registry}
    for seq in sequences:
        g = grad_of_sequence(params, seq, registry)
        for name, vec in g.items():
            acc[name] += vec
    n = float(len(sequences))
    return {name: vec / n for name, vec in acc.items()}


def concat_layer_vectors(vectors: dict[str, np.ndarray], registry: list[TrackedLayer]) -> np.ndarray:
    return np.concatenate([vectors[tl.name] for tl in registry])


def flat_tracked_grad(params: ParamSet, tokens, registry=None) -> np.ndarray:
    registry = registry if registry is not None else tracked_layers(params.config)
    return concat_layer_vectors(grad_of_sequence(params, tokens, registry), registry)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ParamSet) -> None:
    """Named-tensor container; config rides along as a UTF-8 JSON tensor."""
    cfg_json = json.dumps(
        {
            "vocab_size": params.config.vocab_size,
            "hidden_dim": params.config.hidden_dim,
            "n_layers": params.config.n_layers,
            "n_heads": params.config.n_heads,
            "max_context": params.config.max_context,
            "mlp_ratio": params.config.mlp_ratio,
            "rope_base": params.config.rope_base,
        },
        sort_keys=True,
    )
    tensors = {"__config__": np.frombuffer(cfg_json.encode("utf-8"), dtype=np.uint8).copy()}
    for name, arr in params.iter_named():
        tensors[name] = arr
    tensorio.write_tensors(path, tensors)


def load_checkpoint(path) -> ParamSet:
    tensors = tensorio.read_tensors(path)
    if "__config__" not in tensors:
        raise DataError(f"{path}: checkpoint missing __config__ record")
    cfg = ModelConfig(**json.loads(tensors["__config__"].tobytes().decode("utf-8")))
    params = init_params(cfg, seed=0)
    for name, arr in params.iter_named():
        if name not in tensors:
            raise DataError(f"{path}: checkpoint missing tensor {name!r}")
        if tensors[name].shape != arr.shape:
            raise DataError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                            f"expected {arr.shape}")
        arr[...] = tensors[name]
    return params
