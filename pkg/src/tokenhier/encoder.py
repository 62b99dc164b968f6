"""From-scratch pre-norm ViT with hand-written backpropagation.

The token sequence for an image is [class token; projected patches] plus
a learned positional table; L pre-norm blocks (multi-head attention,
then a GELU MLP, each with a residual) and a final layer norm produce
the output sequence.  Masked variants swap selected patch projections
for a learned mask token before positions are added.

Everything is batched as (B, S, D) float64 arrays with S = N + 1 and
the class token at row 0.  ``forward_batch`` returns a cache that
``backward_batch`` consumes to produce parameter gradients; both are
pure functions of their inputs, so batch items can be computed in any
order or split across workers with identical results.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .color import as_raster
from .errors import ConfigError, NumericError, ShapeError
from .numkernel import RngStream, gelu, gelu_grad

_LN_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    token_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size <= 0 or self.token_size <= 0:
            raise ConfigError("image_size and token_size must be positive")
        if self.image_size % self.token_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by "
                f"token_size {self.token_size}")
        if self.depth < 0 or self.num_heads <= 0 or self.embed_dim <= 0:
            raise ConfigError("depth >= 0, num_heads and embed_dim > 0 required")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.token_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.token_size * self.token_size * 3

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def config_hash(cfg: EncoderConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True).encode("ascii")
    return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class TokenSequence:
    cls: np.ndarray        # (D,)
    patches: np.ndarray    # (N, D)
    config_hash: str


def _trunc_normal(rng: RngStream, shape, sigma=0.02):
    n = int(np.prod(shape))
    v = rng.gaussian(n, 0.0, sigma)
    return np.clip(v, -2 * sigma, 2 * sigma).reshape(shape)


def init_params(cfg: EncoderConfig, rng: RngStream) -> dict:
    """Fresh parameter dict. Weights are clipped normal (sigma 0.02),
    biases and the class token start at zero, norm gains at one."""
    d = cfg.embed_dim
    p = {
        "embed.W": _trunc_normal(rng, (cfg.patch_dim, d)),
        "embed.b": np.zeros(d),
        "pos": _trunc_normal(rng, (cfg.seq_len, d)),
        "cls": np.zeros(d),
        "mask_token": _trunc_normal(rng, (d,)),
    }
    for i in range(cfg.depth):
        pre = f"layer{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for w in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + "attn." + w] = _trunc_normal(rng, (d, d))
        for b in ("bq", "bk", "bv", "bo"):
            p[pre + "attn." + b] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "mlp.W1"] = _trunc_normal(rng, (d, cfg.mlp_hidden))
        p[pre + "mlp.b1"] = np.zeros(cfg.mlp_hidden)
        p[pre + "mlp.W2"] = _trunc_normal(rng, (cfg.mlp_hidden, d))
        p[pre + "mlp.b2"] = np.zeros(d)
    p["final_ln.g"] = np.ones(d)
    p["final_ln.b"] = np.zeros(d)
    return p


def param_count(cfg: EncoderConfig) -> int:
    d, hm = cfg.embed_dim, cfg.mlp_hidden
    per_layer = 2 * d + 4 * d * d + 4 * d + 2 * d + d * hm + hm + hm * d + d
    return (cfg.patch_dim * d + d + cfg.seq_len * d + d + d
            + cfg.depth * per_layer + 2 * d)


def patchify(raster, cfg: EncoderConfig) -> np.ndarray:
    """(N, t*t*3) rows in [0,1], patches scanned row-major."""
    r = as_raster(raster)
    if r.shape[0] != cfg.image_size or r.shape[1] != cfg.image_size:
        raise ShapeError(
            f"raster {r.shape[:2]} does not match image_size {cfg.image_size}")
    g, t = cfg.grid, cfg.token_size
    x = r.astype(np.float64) / 255.0
    return (x.reshape(g, t, g, t, 3).transpose(0, 2, 1, 3, 4)
            .reshape(cfg.num_patches, cfg.patch_dim))


def _check_mask(mask, cfg: EncoderConfig):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape != (cfg.num_patches,):
        raise ShapeError(
            f"mask must have shape ({cfg.num_patches},), got {m.shape}")
    return m


def tokenize(raster, cfg: EncoderConfig, params: dict, mask=None) -> np.ndarray:
    """Initial sequence: [cls; patch projections] + positions, (S, D).

    Masked patch positions take the mask token in place of their
    projection (positions still added afterwards).
    """
    mask = _check_mask(mask, cfg)
    proj = patchify(raster, cfg) @ params["embed.W"] + params["embed.b"]
    if mask is not None:
        proj = np.where(mask[:, None], params["mask_token"][None, :], proj)
    z0 = np.concatenate([params["cls"][None, :], proj], axis=0)
    return z0 + params["pos"]


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.maximum(var, _LN_EPS))
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, var)


def _ln_backward(dy, g, stats):
    xhat, inv, var = stats
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    live = (var > _LN_EPS)  # else the denominator was pinned at sqrt(eps)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - np.where(live, xhat * m2, 0.0))
    return dx, dg, db


def _split_heads(x, cfg: EncoderConfig):
    b, s, d = x.shape
    return (x.reshape(b, s, cfg.num_heads, cfg.head_dim)
            .transpose(0, 2, 1, 3))


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def forward_batch(z0: np.ndarray, cfg: EncoderConfig, params: dict,
                  want_cache: bool = False):
    """Run the block stack on a (B, S, D) batch of initial sequences.

    Returns (out, cache); cache is None unless requested.  Non-finite
    activations abort with the offending layer named.
    """
    x = np.asarray(z0, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != cfg.seq_len or x.shape[2] != cfg.embed_dim:
        raise ShapeError(
            f"batch must be (B, {cfg.seq_len}, {cfg.embed_dim}), got {x.shape}")
    scale = 1.0 / np.sqrt(cfg.head_dim)
    layers = []
    for i in range(cfg.depth):
        pre = f"layer{i}."
        h1, ln1_stats = _ln_forward(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = _split_heads(h1 @ params[pre + "attn.Wq"] + params[pre + "attn.bq"], cfg)
        k = _split_heads(h1 @ params[pre + "attn.Wk"] + params[pre + "attn.bk"], cfg)
        v = _split_heads(h1 @ params[pre + "attn.Wv"] + params[pre + "attn.bv"], cfg)
        scores = np.einsum("bhsd,bhtd->bhst", q, k) * scale
        shifted = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(np.einsum("bhst,bhtd->bhsd", attn, v))
        x = x + ctx @ params[pre + "attn.Wo"] + params[pre + "attn.bo"]
        h2, ln2_stats = _ln_forward(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u1 = h2 @ params[pre + "mlp.W1"] + params[pre + "mlp.b1"]
        a1 = gelu(u1)
        x = x + a1 @ params[pre + "mlp.W2"] + params[pre + "mlp.b2"]
        if not np.all(np.isfinite(x)):
            raise NumericError(f"layer {i}: non-finite activations")
        if want_cache:
            layers.append(dict(h1=h1, ln1=ln1_stats, q=q, k=k, v=v,
                               attn=attn, ctx=ctx, h2=h2,
                               ln2=ln2_stats, u1=u1, a1=a1))
    out, fin_stats = _ln_forward(x, params["final_ln.g"], params["final_ln.b"])
    if not np.all(np.isfinite(out)):
        raise NumericError("final norm: non-finite activations")
    cache = dict(layers=layers, fin=fin_stats, cfg=cfg) if want_cache else None
    return out, cache


def backward_batch(dout: np.ndarray, cache: dict, params: dict) -> dict:
    """Parameter gradients plus d(loss)/d(Z_0) under key "z0"."""
    cfg: EncoderConfig = cache["cfg"]
    scale = 1.0 / np.sqrt(cfg.head_dim)
    grads = {}
    dx, dg, db = _ln_backward(np.asarray(dout, dtype=np.float64),
                              params["final_ln.g"], cache["fin"])
    grads["final_ln.g"] = dg
    grads["final_ln.b"] = db
    for i in reversed(range(cfg.depth)):
        pre = f"layer{i}."
        c = cache["layers"][i]
        # MLP half
        da1 = dx @ params[pre + "mlp.W2"].T
        grads[pre + "mlp.W2"] = np.einsum("bsh,bsd->hd", c["a1"], dx)
        grads[pre + "mlp.b2"] = dx.sum(axis=(0, 1))
        du1 = da1 * gelu_grad(c["u1"])
        grads[pre + "mlp.W1"] = np.einsum("bsd,bsh->dh", c["h2"], du1)
        grads[pre + "mlp.b1"] = du1.sum(axis=(0, 1))
        dh2 = du1 @ params[pre + "mlp.W1"].T
        dmid, dg2, db2 = _ln_backward(dh2, params[pre + "ln2.g"], c["ln2"])
        grads[pre + "ln2.g"] = dg2
        grads[pre + "ln2.b"] = db2
        dx = dx + dmid
        # attention half
        dctx = dx @ params[pre + "attn.Wo"].T
        grads[pre + "attn.Wo"] = np.einsum("bsd,bse->de", c["ctx"], dx)
        grads[pre + "attn.bo"] = dx.sum(axis=(0, 1))
        dctx_h = _split_heads(dctx, cfg)
        dattn = np.einsum("bhsd,bhtd->bhst", dctx_h, c["v"])
        dv = np.einsum("bhst,bhsd->bhtd", c["attn"], dctx_h)
        inner = (dattn * c["attn"]).sum(axis=-1, keepdims=True)
        dscores = c["attn"] * (dattn - inner)
        dq = np.einsum("bhst,bhtd->bhsd", dscores, c["k"]) * scale
        dk = np.einsum("bhst,bhsd->bhtd", dscores, c["q"]) * scale
        dh1 = np.zeros_like(c["h1"])
        for w, dgrad in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
            merged = _merge_heads(dgrad)
            grads[pre + "attn." + w] = np.einsum("bsd,bse->de", c["h1"], merged)
            grads[pre + "attn.b" + w[1:].lower()] = merged.sum(axis=(0, 1))
            dh1 = dh1 + merged @ params[pre + "attn." + w].T
        din, dg1, db1 = _ln_backward(dh1, params[pre + "ln1.g"], c["ln1"])
        grads[pre + "ln1.g"] = dg1
        grads[pre + "ln1.b"] = db1
        dx = dx + din
    grads["z0"] = dx
    return grads


def token_gradients(dz0: np.ndarray, patch_mats, masks, params: dict,
                    cfg: EncoderConfig) -> dict:
    """Fold d/d(Z_0) into embedding-level parameter gradients.

    patch_mats: per-item (N, patch_dim) matrices (pre-projection).
    masks: per-item boolean mask or None, aligned with how tokenize was
    called for that item.
    """
    b = dz0.shape[0]
    grads = {
        "pos": dz0.sum(axis=0),
        "cls": dz0[:, 0, :].sum(axis=0),
        "embed.W": np.zeros_like(params["embed.W"]),
        "embed.b": np.zeros_like(params["embed.b"]),
        "mask_token": np.zeros_like(params["mask_token"]),
    }
    for i in range(b):
        dpatch = dz0[i, 1:, :]
        m = masks[i] if masks is not None else None
        if m is None:
            live = np.ones(cfg.num_patches, dtype=bool)
        else:
            live = ~np.asarray(m, dtype=bool)
            grads["mask_token"] += dpatch[~live].sum(axis=0)
        grads["embed.W"] += patch_mats[i][live].T @ dpatch[live]
        grads["embed.b"] += dpatch[live].sum(axis=0)
    return grads


def forward(raster, cfg: EncoderConfig, params: dict) -> TokenSequence:
    """Single-image forward pass to the final token sequence."""
    z0 = tokenize(raster, cfg, params)
    out, _ = forward_batch(z0[None, :, :], cfg, params)
    return TokenSequence(cls=out[0, 0].copy(), patches=out[0, 1:].copy(),
                         config_hash=config_hash(cfg))


def forward_masked(raster, mask, cfg: EncoderConfig, params: dict) -> TokenSequence:
    """Forward pass with selected patch embeddings replaced by the mask
    token before the block stack."""
    m = _check_mask(np.asarray(mask), cfg)
    z0 = tokenize(raster, cfg, params, mask=m)
    out, _ = forward_batch(z0[None, :, :], cfg, params)
    return TokenSequence(cls=out[0, 0].copy(), patches=out[0, 1:].copy(),
                         config_hash=config_hash(cfg))


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    try:
        return EncoderConfig(**d)
    except TypeError as e:
        raise ConfigError(f"bad encoder config: {e}") from None
