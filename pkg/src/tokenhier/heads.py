"""Frozen-encoder evaluation heads: linear probe and attention pooling.

The probe reads only the class token and applies a softmax classifier.
The pooling head forms one query per head from the class token, attends
over the patch tokens, concatenates the per-head summaries through an
output projection, and classifies the pooled vector.  Both heads train
with Adam on mean cross-entropy while the encoder stays untouched;
model selection is by best validation balanced accuracy.

Projections are learnable by default.  The projection-free literal
variant (query = class token, keys = values = raw patch tokens, no
output map) is available via ``identity_projections`` for ablation.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_params, save_params
from .encoder import TokenSequence
from .errors import ConfigError, DataError, ParameterError, ShapeError
from .numkernel import RngStream, softmax_rows
from .optim import AdamConfig, adam_init, adam_step

LINEAR = "linear"
ATTNPOOL = "attnpool"


@dataclass
class ProbeParams:
    W_lp: np.ndarray       # (C, D)
    b: np.ndarray          # (C,)

    def __post_init__(self):
        if self.W_lp.ndim != 2 or self.W_lp.shape[0] < 2:
            raise ParameterError("probe needs a (C>=2, D) weight matrix")
        if self.b.shape != (self.W_lp.shape[0],):
            raise ShapeError("probe bias length must equal class count")


@dataclass
class AttnPoolParams:
    Wq: np.ndarray         # (H, Dh, D)
    Wk: np.ndarray         # (H, Dh, D)
    Wv: np.ndarray         # (H, Dh, D)
    Wo: np.ndarray         # (D, D)
    W_attn: np.ndarray     # (C, D)
    b: np.ndarray          # (C,)
    identity_projections: bool = False

    def __post_init__(self):
        h, dh, d = self.Wq.shape
        if h * dh != d:
            raise ParameterError(
                f"head layout ({h} x {dh}) must tile the embed dim {d}")
        for name in ("Wk", "Wv"):
            if getattr(self, name).shape != (h, dh, d):
                raise ShapeError(f"{name} shape mismatch")
        if self.Wo.shape != (d, d):
            raise ShapeError("output projection must be (D, D)")
        if self.W_attn.ndim != 2 or self.W_attn.shape[0] < 2:
            raise ParameterError("classifier needs C >= 2 rows")

    @property
    def num_heads(self):
        return self.Wq.shape[0]


@dataclass(frozen=True)
class HeadTrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 32
    seed: int = 0
    num_heads: int = 4

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        # lr 0 is allowed: it degenerates to a no-op run with a flat curve
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if self.batch < 1 or self.num_heads < 1:
            raise ConfigError("batch and num_heads must be >= 1")


def make_probe_params(embed_dim: int, num_classes: int) -> ProbeParams:
    if num_classes < 2:
        raise ParameterError("need at least 2 classes")
    return ProbeParams(np.zeros((num_classes, embed_dim)),
                       np.zeros(num_classes))


def make_attnpool_params(embed_dim: int, num_classes: int, num_heads: int,
                         rng: RngStream,
                         identity_projections: bool = False) -> AttnPoolParams:
    if num_classes < 2:
        raise ParameterError("need at least 2 classes")
    if embed_dim % num_heads:
        raise ParameterError(
            f"embed_dim {embed_dim} not divisible by num_heads {num_heads}")
    dh = embed_dim // num_heads
    sigma = 0.02

    def draw(shape):
        v = rng.gaussian(int(np.prod(shape)), 0.0, sigma)
        return np.clip(v, -2 * sigma, 2 * sigma).reshape(shape)

    return AttnPoolParams(
        Wq=draw((num_heads, dh, embed_dim)),
        Wk=draw((num_heads, dh, embed_dim)),
        Wv=draw((num_heads, dh, embed_dim)),
        Wo=np.eye(embed_dim),   # starts as a pass-through
        W_attn=np.zeros((num_classes, embed_dim)),
        b=np.zeros(num_classes),
        identity_projections=identity_projections,
    )


def linear_probe_forward(cls_token, p: ProbeParams) -> np.ndarray:
    """Class probabilities softmax(W z + b)."""
    z = np.asarray(cls_token, dtype=np.float64)
    if z.shape != (p.W_lp.shape[1],):
        raise ShapeError(
            f"class token has dim {z.shape}, probe expects ({p.W_lp.shape[1]},)")
    return softmax_rows((p.W_lp @ z + p.b)[None, :])[0]


def _pool_batch(cls, patches, p: AttnPoolParams, want_cache: bool = False):
    """Vectorized pooling: cls (B,D), patches (B,N,D) -> h (B,D),
    weights (B,H,N)."""
    bsz, n, d = patches.shape
    if n == 0:
        raise ParameterError("no patch tokens to pool over")
    if p.identity_projections:
        # literal form: one head over raw tokens, no projections
        logits = np.einsum("bd,bnd->bn", cls, patches) / np.sqrt(d)
        a = softmax_rows(logits)
        h = np.einsum("bn,bnd->bd", a, patches)
        weights = a[:, None, :]
        cache = dict(a=a) if want_cache else None
        return h, weights, cache
    dh = p.Wq.shape[1]
    q = np.einsum("hpd,bd->bhp", p.Wq, cls)
    k = np.einsum("hpd,bnd->bhnp", p.Wk, patches)
    v = np.einsum("hpd,bnd->bhnp", p.Wv, patches)
    logits = np.einsum("bhp,bhnp->bhn", q, k) / np.sqrt(dh)
    a = softmax_rows(logits)
    hh = np.einsum("bhn,bhnp->bhp", a, v)
    hc = hh.reshape(bsz, d)
    h = hc @ p.Wo.T
    cache = dict(q=q, k=k, v=v, a=a, hh=hh, hc=hc) if want_cache else None
    return h, a, cache


def attention_pool(seq: TokenSequence, p: AttnPoolParams):
    """Pooled vector h and the per-head attention weights (H, N)."""
    h, w, _ = _pool_batch(seq.cls[None, :], seq.patches[None, :, :], p)
    return h[0], w[0]


def attnpool_forward(seq: TokenSequence, p: AttnPoolParams) -> np.ndarray:
    """Class probabilities from the pooled vector."""
    h, _ = attention_pool(seq, p)
    return softmax_rows((p.W_attn @ h + p.b)[None, :])[0]


def _stack(items):
    cls = np.stack([seq.cls for seq, _ in items])
    patches = np.stack([seq.patches for seq, _ in items])
    y = np.array([label for _, label in items], dtype=np.int64)
    return cls, patches, y


def _probs_batch(cls, patches, params, mode):
    if mode == LINEAR:
        return softmax_rows(cls @ params.W_lp.T + params.b), None
    h, _, cache = _pool_batch(cls, patches, params, want_cache=True)
    return softmax_rows(h @ params.W_attn.T + params.b), (h, cache)


def head_gradients(batch, params, mode):
    """Mean cross-entropy gradients for one batch of (sequence, label).

    Returns (grads dict keyed like the param dataclass fields, loss).
    """
    cls, patches, y = _stack(batch)
    bsz = len(batch)
    probs, extra = _probs_batch(cls, patches, params, mode)
    loss = float(-np.mean(np.log(probs[np.arange(bsz), y] + 1e-12)))
    dlogits = probs.copy()
    dlogits[np.arange(bsz), y] -= 1.0
    dlogits /= bsz
    if mode == LINEAR:
        return {"W_lp": dlogits.T @ cls, "b": dlogits.sum(axis=0)}, loss
    h, cache = extra
    grads = {"W_attn": dlogits.T @ h, "b": dlogits.sum(axis=0)}
    dh = dlogits @ params.W_attn
    if params.identity_projections:
        # only the classifier is trainable in the literal form
        return grads, loss
    dhc = dh @ params.Wo
    grads["Wo"] = dh.T @ cache["hc"]
    nh, dhd = params.Wq.shape[0], params.Wq.shape[1]
    dhh = dhc.reshape(bsz, nh, dhd)
    da = np.einsum("bhp,bhnp->bhn", dhh, cache["v"])
    dv = np.einsum("bhn,bhp->bhnp", cache["a"], dhh)
    inner = (da * cache["a"]).sum(axis=-1, keepdims=True)
    dlog = cache["a"] * (da - inner) / np.sqrt(dhd)
    dq = np.einsum("bhn,bhnp->bhp", dlog, cache["k"])
    dk = np.einsum("bhn,bhp->bhnp", dlog, cache["q"])
    grads["Wq"] = np.einsum("bhp,bd->hpd", dq, cls)
    grads["Wk"] = np.einsum("bhnp,bnd->hpd", dk, patches)
    grads["Wv"] = np.einsum("bhnp,bnd->hpd", dv, patches)
    return grads, loss


def _params_dict(params, mode):
    if mode == LINEAR:
        return {"W_lp": params.W_lp, "b": params.b}
    d = {"W_attn": params.W_attn, "b": params.b}
    if not params.identity_projections:
        d.update({"Wq": params.Wq, "Wk": params.Wk, "Wv": params.Wv,
                  "Wo": params.Wo})
    return d


def predict(seq: TokenSequence, params) -> int:
    """argmax class; exact ties resolve to the lowest index."""
    if isinstance(params, ProbeParams):
        probs = linear_probe_forward(seq.cls, params)
    else:
        probs = attnpool_forward(seq, params)
    return int(np.argmax(probs))


def predict_batch(items, params, mode):
    cls, patches, _ = _stack([(seq, 0) for seq in items])
    probs, _ = _probs_batch(cls, patches, params, mode)
    return probs.argmax(axis=1)


@dataclass
class HeadTrainResult:
    params: object
    curve: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_bacc: float = 0.0


def train_head(train_items, val_items, mode, cfg: HeadTrainConfig,
               identity_projections: bool = False) -> HeadTrainResult:
    """Mini-batch Adam on mean cross-entropy; the returned params are
    the epoch snapshot with the best validation balanced accuracy."""
    from .bench import balanced_accuracy  # deferred: bench builds on this module

    if mode not in (LINEAR, ATTNPOOL):
        raise ParameterError(f"unknown head mode {mode!r}")
    if not train_items or not val_items:
        raise ParameterError("need non-empty train and validation sets")
    labels = sorted({int(lab) for _, lab in train_items})
    if len(labels) < 2:
        raise ParameterError("training set has a single class")
    all_labels = labels + [int(lab) for _, lab in val_items]
    c = max(all_labels) + 1
    d = train_items[0][0].cls.shape[0]
    if mode == LINEAR:
        params = make_probe_params(d, c)
    else:
        params = make_attnpool_params(
            d, c, cfg.num_heads, RngStream(seed=cfg.seed, stream_id=77),
            identity_projections=identity_projections)
    adam_cfg = AdamConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    pdict = _params_dict(params, mode)
    opt = adam_init(pdict)
    order_rng = RngStream(seed=cfg.seed, stream_id=78)
    n = len(train_items)
    val_y = np.array([lab for _, lab in val_items], dtype=np.int64)
    val_seqs = [seq for seq, _ in val_items]

    best = HeadTrainResult(copy.deepcopy(params), [], 0, -1.0)
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch):
            batch = [train_items[int(i)] for i in perm[start:start + cfg.batch]]
            grads, loss = head_gradients(batch, params, mode)
            adam_step(pdict, grads, opt, adam_cfg, no_decay=("b",))
            losses.append(loss)
        preds = predict_batch(val_seqs, params, mode)
        bacc = balanced_accuracy(val_y, preds)
        best.curve.append({"epoch": epoch,
                           "train_loss": float(np.mean(losses)),
                           "val_bacc": float(bacc)})
        if bacc > best.best_val_bacc:
            best.best_val_bacc = float(bacc)
            best.best_epoch = epoch
            best.params = copy.deepcopy(params)
    return best


def save_head(path, params, extra: dict = None) -> None:
    if isinstance(params, ProbeParams):
        kind = "linear_head"
        cfgdict = {"classes": int(params.W_lp.shape[0]),
                   "embed_dim": int(params.W_lp.shape[1])}
    else:
        kind = "attnpool_head"
        cfgdict = {"classes": int(params.W_attn.shape[0]),
                   "embed_dim": int(params.Wo.shape[0]),
                   "num_heads": int(params.num_heads),
                   "identity_projections": bool(params.identity_projections)}
    tensors = {k: np.asarray(v) for k, v in _params_dict(
        params, LINEAR if kind == "linear_head" else ATTNPOOL).items()}
    if kind == "attnpool_head" and params.identity_projections:
        # keep the full tensor set so load() can rebuild the dataclass
        tensors.update({"Wq": params.Wq, "Wk": params.Wk, "Wv": params.Wv,
                        "Wo": params.Wo})
    save_params(path, kind, cfgdict, tensors, extra=extra)


def load_head(path):
    kind, cfgdict, tensors, _ = load_params(path)
    if kind == "linear_head":
        return ProbeParams(tensors["W_lp"], tensors["b"])
    if kind == "attnpool_head":
        return AttnPoolParams(
            tensors["Wq"], tensors["Wk"], tensors["Wv"], tensors["Wo"],
            tensors["W_attn"], tensors["b"],
            identity_projections=bool(cfgdict.get("identity_projections")))
    raise DataError(f"{path}: not a head checkpoint (kind {kind!r})")


def dump_attention_weights(items, params: AttnPoolParams, path) -> None:
    """Per-item, per-head attention weights as JSON for inspection."""
    out = []
    for i, seq in enumerate(items):
        _, w = attention_pool(seq, params)
        out.append({"index": i, "weights": [list(map(float, row))
                                            for row in w]})
    with open(path, "w", encoding="ascii") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
        fh.write("\n")
