"""Central finite-difference verification of every backward pass.

Each component check builds a small fixed instance, computes analytic
gradients, and compares a deterministic sample of entries against
central differences.  The reported number is the worst relative error
|a - n| / max(1e-6, |a|, |n|) over the sampled entries, so a single
wrong entry cannot hide behind a large tensor.

A fault hook exists purely so the failure path itself is testable: it
adds a visible offset to one analytic entry of the named component,
which must then be reported as the failing one.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .encoder import (EncoderConfig, backward_batch, forward_batch,
                      init_params, patchify, token_gradients, tokenize)
from .errors import ParameterError
from .heads import (ATTNPOOL, LINEAR, AttnPoolParams, ProbeParams,
                    head_gradients)
from .numkernel import RngStream
from .ssl import (SslConfig, dino_loss, dino_loss_grad, gram_loss,
                  gram_loss_grad, ibot_loss, ibot_loss_grad, koleo_loss,
                  koleo_loss_grad)

TOLERANCE = 1e-4

_H = 1e-5
_MAX_ENTRIES = 24


@dataclass(frozen=True)
class ComponentResult:
    component: str
    worst_rel_err: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.worst_rel_err <= self.tolerance


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(1e-6, abs(a), abs(n))


def _sample_indices(rng: RngStream, size: int):
    if size <= _MAX_ENTRIES:
        return np.arange(size)
    picks = rng.integers(_MAX_ENTRIES - 1, size)
    # entry 0 always goes in: the fault hook lands there, and the
    # failure path must be reachable for every tensor
    return np.unique(np.concatenate([[0], picks]))


def _check_tensor(loss_fn, arr, analytic, rng) -> float:
    """Worst sampled relative error for one tensor, arr mutated in place
    around each probe point."""
    flat = arr.reshape(-1)
    aflat = np.asarray(analytic).reshape(-1)
    worst = 0.0
    for idx in _sample_indices(rng, flat.size):
        keep = flat[idx]
        flat[idx] = keep + _H
        up = loss_fn()
        flat[idx] = keep - _H
        down = loss_fn()
        flat[idx] = keep
        worst = max(worst, _rel(float(aflat[idx]), (up - down) / (2 * _H)))
    return worst


def _apply_fault(grads: dict, component: str, inject_fault):
    if inject_fault == component:
        name = sorted(grads)[0]
        g = np.asarray(grads[name], dtype=np.float64).copy()
        g.reshape(-1)[0] += 1.0
        grads = dict(grads)
        grads[name] = g
    return grads


def _check_encoder_blocks(inject_fault=None) -> float:
    cfg = EncoderConfig(image_size=32, token_size=16, embed_dim=16,
                        depth=2, num_heads=2, mlp_ratio=2.0)
    rng = RngStream(seed=101, stream_id=1)
    params = init_params(cfg, rng.derive(0))
    for k, v in params.items():
        params[k] = v + rng.derive(1, zlib.crc32(k.encode()) % 1000).gaussian(
            v.size, 0.0, 0.05).reshape(v.shape)
    z0 = rng.derive(2).gaussian(2 * cfg.seq_len * cfg.embed_dim).reshape(
        2, cfg.seq_len, cfg.embed_dim)
    w = rng.derive(3).gaussian(z0.size).reshape(z0.shape)

    def loss():
        out, _ = forward_batch(z0, cfg, params)
        return float((w * out).sum())

    out, cache = forward_batch(z0, cfg, params, want_cache=True)
    grads = backward_batch(w, cache, params)
    grads = _apply_fault(grads, "encoder.blocks", inject_fault)
    worst = _check_tensor(loss, z0, grads["z0"], rng.derive(4))
    for name in sorted(grads):
        if name == "z0":
            continue
        worst = max(worst, _check_tensor(loss, params[name], grads[name],
                                         rng.derive(5, zlib.crc32(name.encode()) % 1000)))
    return worst


def _check_encoder_embedding(inject_fault=None) -> float:
    cfg = EncoderConfig(image_size=32, token_size=16, embed_dim=12,
                        depth=0, num_heads=2, mlp_ratio=2.0)
    rng = RngStream(seed=102, stream_id=1)
    params = init_params(cfg, rng.derive(0))
    raster = rng.derive(1).integers(
        cfg.image_size * cfg.image_size * 3, 256).reshape(
        cfg.image_size, cfg.image_size, 3).astype(np.uint8)
    mask = np.zeros(cfg.num_patches, dtype=bool)
    mask[0] = True
    w = rng.derive(2).gaussian(cfg.seq_len * cfg.embed_dim).reshape(
        cfg.seq_len, cfg.embed_dim)

    def loss():
        return float((w * tokenize(raster, cfg, params, mask=mask)).sum())

    grads = token_gradients(w[None, :, :], [patchify(raster, cfg)], [mask],
                            params, cfg)
    grads = _apply_fault(grads, "encoder.embedding", inject_fault)
    worst = 0.0
    for name in sorted(grads):
        worst = max(worst, _check_tensor(loss, params[name], grads[name],
                                         rng.derive(3, zlib.crc32(name.encode()) % 1000)))
    return worst


def _check_dino(inject_fault=None) -> float:
    cfg = SslConfig(prototype_count=8)
    rng = RngStream(seed=103, stream_id=1)
    s = rng.derive(0).gaussian(4 * 8).reshape(4, 8)
    t = rng.derive(1).gaussian(4 * 8).reshape(4, 8)
    center = rng.derive(2).gaussian(8, 0.0, 0.1)
    _, grad = dino_loss_grad(s, t, center, cfg)
    grads = _apply_fault({"logits": grad}, "ssl.dino", inject_fault)
    return _check_tensor(lambda: dino_loss(s, t, center, cfg), s,
                         grads["logits"], rng.derive(3))


def _check_ibot(inject_fault=None) -> float:
    cfg = SslConfig(prototype_count=8)
    rng = RngStream(seed=104, stream_id=1)
    s = rng.derive(0).gaussian(6 * 8).reshape(6, 8)
    t = rng.derive(1).gaussian(6 * 8).reshape(6, 8)
    center = rng.derive(2).gaussian(8, 0.0, 0.1)
    _, grad = ibot_loss_grad(s, t, center, cfg)
    grads = _apply_fault({"logits": grad}, "ssl.ibot", inject_fault)
    return _check_tensor(lambda: ibot_loss(s, t, center, cfg), s,
                         grads["logits"], rng.derive(3))


def _check_koleo(inject_fault=None) -> float:
    rng = RngStream(seed=105, stream_id=1)
    x = rng.derive(0).gaussian(8 * 16).reshape(8, 16)
    _, grad = koleo_loss_grad(x)
    grads = _apply_fault({"features": grad}, "ssl.koleo", inject_fault)
    return _check_tensor(lambda: koleo_loss(x), x, grads["features"],
                         rng.derive(1))


def _check_gram(inject_fault=None) -> float:
    rng = RngStream(seed=106, stream_id=1)
    xs = rng.derive(0).gaussian(8 * 16).reshape(8, 16)
    xg = rng.derive(1).gaussian(8 * 16).reshape(8, 16)
    _, grad = gram_loss_grad(xs, xg)
    grads = _apply_fault({"patches": grad}, "ssl.gram", inject_fault)
    return _check_tensor(lambda: gram_loss(xs, xg), xs, grads["patches"],
                         rng.derive(2))


def _head_batch(rng, d, n, count=4):
    from .encoder import TokenSequence

    items = []
    for i in range(count):
        r = rng.derive(i)
        items.append((TokenSequence(r.derive(0).gaussian(d),
                                    r.derive(1).gaussian(n * d).reshape(n, d),
                                    "gc"), i % 2))
    return items


def _check_linear_head(inject_fault=None) -> float:
    rng = RngStream(seed=107, stream_id=1)
    d = 16
    batch = _head_batch(rng.derive(0), d, 4)
    p = ProbeParams(rng.derive(1).gaussian(2 * d, 0.0, 0.3).reshape(2, d),
                    rng.derive(2).gaussian(2, 0.0, 0.3))

    def loss():
        _, value = head_gradients(batch, p, LINEAR)
        return value

    grads, _ = head_gradients(batch, p, LINEAR)
    grads = _apply_fault(grads, "heads.linear", inject_fault)
    worst = _check_tensor(loss, p.W_lp, grads["W_lp"], rng.derive(3))
    return max(worst, _check_tensor(loss, p.b, grads["b"], rng.derive(4)))


def _check_attnpool_head(inject_fault=None) -> float:
    rng = RngStream(seed=108, stream_id=1)
    d, heads, n = 16, 2, 8
    dh = d // heads
    batch = _head_batch(rng.derive(0), d, n)
    g = lambda shape, k: rng.derive(1, k).gaussian(
        int(np.prod(shape)), 0.0, 0.3).reshape(shape)
    p = AttnPoolParams(Wq=g((heads, dh, d), 0), Wk=g((heads, dh, d), 1),
                       Wv=g((heads, dh, d), 2), Wo=g((d, d), 3),
                       W_attn=g((2, d), 4), b=g((2,), 5))

    def loss():
        _, value = head_gradients(batch, p, ATTNPOOL)
        return value

    grads, _ = head_gradients(batch, p, ATTNPOOL)
    grads = _apply_fault(grads, "heads.attnpool", inject_fault)
    worst = 0.0
    for name in sorted(grads):
        worst = max(worst, _check_tensor(loss, getattr(p, name), grads[name],
                                         rng.derive(2, zlib.crc32(name.encode()) % 1000)))
    return worst


_COMPONENTS = (
    ("encoder.embedding", _check_encoder_embedding),
    ("encoder.blocks", _check_encoder_blocks),
    ("ssl.dino", _check_dino),
    ("ssl.ibot", _check_ibot),
    ("ssl.koleo", _check_koleo),
    ("ssl.gram", _check_gram),
    ("heads.linear", _check_linear_head),
    ("heads.attnpool", _check_attnpool_head),
)


def component_names():
    return [name for name, _ in _COMPONENTS]


def run_all(tolerance: float = TOLERANCE, inject_fault: str = None):
    """Every component's worst sampled relative error, in a fixed order."""
    if inject_fault is not None and inject_fault not in component_names():
        raise ParameterError(
            f"unknown component {inject_fault!r}; "
            f"expected one of {component_names()}")
    return [ComponentResult(name, float(fn(inject_fault)), tolerance)
            for name, fn in _COMPONENTS]
