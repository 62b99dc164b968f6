"""Self-supervised objective and the student/EMA-teacher loop.

Four terms over prototype logits and token embeddings:

- image-level: cross-entropy between the teacher's centered, sharpened
  class-token distribution and the student's (``dino_loss``),
- patch-level: the same cross-entropy at masked positions, student
  masked / teacher unmasked (``ibot_loss``),
- spread: negative mean log nearest-neighbor distance of normalized
  features (``koleo_loss``),
- anchoring: Frobenius gap between normalized patch Gram matrices
  against a frozen earlier checkpoint (``gram_loss``), post-training
  only.

Every loss ships an analytic gradient verified against central
differences.  The training step builds two augmented views per image,
runs the student on masked tokens and the teacher unmasked, applies one
Adam step to the student, and moves the teacher and the logit centers
by momentum.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .checkpoint import load_params, save_params
from .color import StainAugConfig, stain_augment
from .encoder import (
    EncoderConfig,
    backward_batch,
    encoder_config_dict,
    encoder_config_from_dict,
    forward_batch,
    init_params,
    patchify,
    token_gradients,
    tokenize,
)
from .errors import (
    ConfigError,
    DataError,
    NumericError,
    ParameterError,
    ShapeError,
)
from .numkernel import RngStream, gelu, gelu_grad, softmax_rows
from .optim import AdamConfig, adam_init, adam_step

_LOG_EPS = 1e-12
_DIST_EPS = 1e-8

PRETRAIN = "pretrain"
POSTTRAIN = "posttrain"


@dataclass(frozen=True)
class SslConfig:
    prototype_count: int = 256
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    ema_momentum: float = 0.99
    mask_fraction: float = 0.3
    koleo_weight: float = 0.1
    gram_weight: float = 1.0
    gram_teacher_checkpoint: str = None

    def __post_init__(self):
        if self.prototype_count < 2:
            raise ConfigError("prototype_count must be >= 2")
        if not (self.student_temp > self.teacher_temp > 0):
            raise ConfigError(
                "need student_temp > teacher_temp > 0 (teacher sharper), got "
                f"{self.student_temp} vs {self.teacher_temp}")
        for name in ("center_momentum", "mask_fraction"):
            v = getattr(self, name)
            if not (0 < v < 1):
                raise ConfigError(f"{name} must lie in (0,1), got {v}")
        # momentum 1 is legal: it freezes the teacher outright
        if not (0 < self.ema_momentum <= 1):
            raise ConfigError(
                f"ema_momentum must lie in (0,1], got {self.ema_momentum}")
        if self.koleo_weight < 0 or self.gram_weight < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    dino: float
    ibot: float
    koleo: float
    gram: float
    total: float

    @classmethod
    def compute(cls, dino, ibot, koleo, gram, cfg: SslConfig):
        total = dino + ibot + cfg.koleo_weight * koleo + cfg.gram_weight * gram
        return cls(float(dino), float(ibot), float(koleo), float(gram),
                   float(total))


def _centered_ce(student_logits, teacher_logits, center, cfg: SslConfig):
    """Row-wise cross-entropy and its exact student gradient.

    Teacher rows are centered and sharpened at teacher_temp with no
    gradient; the log is stabilized by a 1e-12 floor, and the gradient
    is the true derivative of the stabilized expression.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"student/teacher logit shapes differ: {s.shape} vs {t.shape}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise NumericError("non-finite logits in cross-entropy term")
    pt = softmax_rows((t - center) / cfg.teacher_temp)
    q = softmax_rows(s / cfg.student_temp)
    rows = -(pt * np.log(q + _LOG_EPS)).sum(axis=-1)
    w = pt * q / (q + _LOG_EPS)
    ds = (q * w.sum(axis=-1, keepdims=True) - w) / cfg.student_temp
    return rows, ds


def dino_loss(student_cls_logits, teacher_cls_logits, center,
              cfg: SslConfig) -> float:
    """Image-level term for one (student, teacher) logit pair."""
    rows, _ = _centered_ce(np.atleast_2d(student_cls_logits),
                           np.atleast_2d(teacher_cls_logits), center, cfg)
    return float(rows.mean())


def dino_loss_grad(student_cls_logits, teacher_cls_logits, center,
                   cfg: SslConfig):
    s = np.atleast_2d(student_cls_logits)
    rows, ds = _centered_ce(s, np.atleast_2d(teacher_cls_logits), center, cfg)
    grad = ds / rows.size
    if np.asarray(student_cls_logits).ndim == 1:
        grad = grad[0]
    return float(rows.mean()), grad


def ibot_loss(student_masked_patch_logits, teacher_patch_logits, center,
              cfg: SslConfig) -> float:
    """Mean centered cross-entropy over masked patch positions."""
    return ibot_loss_grad(student_masked_patch_logits, teacher_patch_logits,
                          center, cfg)[0]


def ibot_loss_grad(student_masked_patch_logits, teacher_patch_logits, center,
                   cfg: SslConfig):
    s = np.asarray(student_masked_patch_logits, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ParameterError("need at least one masked position")
    rows, ds = _centered_ce(s, teacher_patch_logits, center, cfg)
    return float(rows.mean()), ds / s.shape[0]


def _normalize_rows(x):
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norms, 1e-12), norms


def koleo_loss(features) -> float:
    """Negative mean log nearest-neighbor distance of normalized rows."""
    return koleo_loss_grad(features)[0]


def koleo_loss_grad(features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ParameterError("need at least 2 feature rows")
    n = x.shape[0]
    z, norms = _normalize_rows(x)
    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    nn = dist.argmin(axis=1)
    d = dist[np.arange(n), nn]
    clamped = np.maximum(d, _DIST_EPS)
    loss = float(-np.mean(np.log(clamped)))
    dz = np.zeros_like(z)
    for i in range(n):
        if d[i] <= _DIST_EPS:
            continue  # clamped: locally constant in the features
        j = nn[i]
        u = (z[i] - z[j]) / d[i]
        dz[i] -= u / (n * d[i])
        dz[j] += u / (n * d[i])
    # through row normalization: dx = (dz - z * <dz, z>) / ||x||
    dot = (dz * z).sum(axis=-1, keepdims=True)
    dx = (dz - z * dot) / np.maximum(norms, 1e-12)
    return loss, dx


def gram_loss(student_patches, gram_teacher_patches) -> float:
    """Normalized-Gram Frobenius gap, averaged by 1/N^2."""
    return gram_loss_grad(student_patches, gram_teacher_patches)[0]


def gram_loss_grad(student_patches, gram_teacher_patches):
    xs = np.asarray(student_patches, dtype=np.float64)
    xg = np.asarray(gram_teacher_patches, dtype=np.float64)
    if xs.ndim != 2 or xg.ndim != 2 or xs.shape[0] != xg.shape[0]:
        raise ShapeError(
            f"patch row counts differ: {xs.shape} vs {xg.shape}")
    n = xs.shape[0]
    zs, norms = _normalize_rows(xs)
    zg, _ = _normalize_rows(xg)
    gap = zs @ zs.T - zg @ zg.T
    loss = float((gap * gap).sum() / (n * n))
    dzs = (4.0 / (n * n)) * gap @ zs
    dot = (dzs * zs).sum(axis=-1, keepdims=True)
    dxs = (dzs - zs * dot) / np.maximum(norms, 1e-12)
    return loss, dxs


def make_head_params(embed_dim: int, prototype_count: int,
                     rng: RngStream) -> dict:
    """2-layer GELU MLP head: D -> 2D -> K prototype logits."""
    hidden = 2 * embed_dim
    sigma = 0.02
    def draw(shape):
        v = rng.gaussian(int(np.prod(shape)), 0.0, sigma)
        return np.clip(v, -2 * sigma, 2 * sigma).reshape(shape)
    return {
        "W1": draw((embed_dim, hidden)),
        "b1": np.zeros(hidden),
        "W2": draw((hidden, prototype_count)),
        "b2": np.zeros(prototype_count),
    }


def head_forward(x, hp: dict, want_cache: bool = False):
    u1 = x @ hp["W1"] + hp["b1"]
    a1 = gelu(u1)
    logits = a1 @ hp["W2"] + hp["b2"]
    cache = dict(x=x, u1=u1, a1=a1) if want_cache else None
    return logits, cache


def head_backward(dlogits, cache, hp: dict):
    grads = {
        "W2": cache["a1"].T @ dlogits,
        "b2": dlogits.sum(axis=0),
    }
    da1 = dlogits @ hp["W2"].T
    du1 = da1 * gelu_grad(cache["u1"])
    grads["W1"] = cache["x"].T @ du1
    grads["b1"] = du1.sum(axis=0)
    dx = du1 @ hp["W1"].T
    return grads, dx


def _prefixed(sub: dict, prefix: str) -> dict:
    return {prefix + k: v for k, v in sub.items()}


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def student_encoder_params(state) -> dict:
    """The student's encoder weights, ready for downstream evaluation."""
    return _sub(state.student, "enc.")


@dataclass
class TrainState:
    student: dict          # enc.* / cls_head.* / patch_head.*
    teacher: dict          # same keys, EMA of student
    cls_center: np.ndarray
    patch_center: np.ndarray
    adam: dict
    step: int = 0
    gram_teacher: dict = None   # enc params only, frozen


def init_train_state(enc_cfg: EncoderConfig, ssl_cfg: SslConfig,
                     rng: RngStream,
                     adam_cfg: AdamConfig = AdamConfig()) -> TrainState:
    d, k = enc_cfg.embed_dim, ssl_cfg.prototype_count
    student = {}
    student.update(_prefixed(init_params(enc_cfg, rng.derive(0)), "enc."))
    student.update(_prefixed(make_head_params(d, k, rng.derive(1)), "cls_head."))
    student.update(_prefixed(make_head_params(d, k, rng.derive(2)), "patch_head."))
    teacher = copy.deepcopy(student)
    return TrainState(
        student=student,
        teacher=teacher,
        cls_center=np.zeros(k),
        patch_center=np.zeros(k),
        adam=adam_init(student),
    )


def _draw_mask(rng: RngStream, n: int, fraction: float) -> np.ndarray:
    m = max(1, int(round(fraction * n)))
    m = min(m, n - 1) if n > 1 else 1  # keep at least one unmasked token
    perm = rng.permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[perm[:m]] = True
    return mask


def _guard(value, term: str, step: int):
    if not np.all(np.isfinite(np.asarray(value))):
        raise NumericError(f"{term} term non-finite at step {step}")
    return value


def train_step(rasters, state: TrainState, ssl_cfg: SslConfig,
               enc_cfg: EncoderConfig, aug_cfg: StainAugConfig,
               rng: RngStream, phase: str = PRETRAIN,
               adam_cfg: AdamConfig = AdamConfig()) -> LossBreakdown:
    """One optimization step over a raster batch.

    Two augmented views per raster; when augmentation is enabled each
    view independently picks LAB or HSV jitter (coin from its own
    stream).  The student sees masked tokens, the teacher never does.
    Gradients flow only into the student; the teacher follows by EMA
    and the centers by momentum on batch-mean teacher logits.
    """
    if phase not in (PRETRAIN, POSTTRAIN):
        raise ParameterError(f"unknown phase {phase!r}")
    if phase == POSTTRAIN and state.gram_teacher is None:
        raise ParameterError("post-training requires a gram teacher checkpoint")
    b = len(rasters)
    if b < 1:
        raise ParameterError("empty batch")
    n = enc_cfg.num_patches

    views = []     # 2b entries: (raster_view, mask); item i views at 2i, 2i+1
    for i in range(b):
        item_rng = rng.derive(state.step, i)
        for vi in range(2):
            view_rng = item_rng.derive(vi)
            if aug_cfg.enabled:
                pick = "lab" if view_rng.uniform(1)[0] < 0.5 else "hsv"
                cfg_v = replace(aug_cfg, space=pick)
                view = stain_augment(rasters[i], cfg_v, view_rng)
            else:
                view = np.asarray(rasters[i])
            mask = _draw_mask(item_rng.derive(2 + vi), n, ssl_cfg.mask_fraction)
            views.append((view, mask))

    enc_s = _sub(state.student, "enc.")
    enc_t = _sub(state.teacher, "enc.")
    masks = [m for _, m in views]
    patch_mats = [patchify(v, enc_cfg) for v, _ in views]

    z0_student = np.stack([tokenize(v, enc_cfg, enc_s, mask=m)
                           for (v, m) in views])
    z0_teacher = np.stack([tokenize(v, enc_cfg, enc_t) for (v, _) in views])
    out_s, cache_s = forward_batch(z0_student, enc_cfg, enc_s, want_cache=True)
    out_t, _ = forward_batch(z0_teacher, enc_cfg, enc_t)

    cls_s = out_s[:, 0, :]
    cls_t = out_t[:, 0, :]

    cls_head_s = _sub(state.student, "cls_head.")
    cls_head_t = _sub(state.teacher, "cls_head.")
    patch_head_s = _sub(state.student, "patch_head.")
    patch_head_t = _sub(state.teacher, "patch_head.")

    logits_s, cls_cache = head_forward(cls_s, cls_head_s, want_cache=True)
    logits_t, _ = head_forward(cls_t, cls_head_t)

    # image-level: cross-view pairs (teacher a -> student b and vice versa)
    swap = np.arange(2 * b).reshape(b, 2)[:, ::-1].reshape(-1)
    dino_rows, d_logits_s = _centered_ce(logits_s, logits_t[swap],
                                         state.cls_center, ssl_cfg)
    dino = _guard(float(dino_rows.mean()), "dino", state.step)
    d_logits_s = d_logits_s / (2 * b)

    # patch-level at masked positions, stacked across views
    masked_rows_s = np.concatenate(
        [out_s[v, 1:, :][masks[v]] for v in range(2 * b)])
    masked_rows_t = np.concatenate(
        [out_t[v, 1:, :][masks[v]] for v in range(2 * b)])
    p_logits_s, patch_cache = head_forward(masked_rows_s, patch_head_s,
                                           want_cache=True)
    p_logits_t, _ = head_forward(masked_rows_t, patch_head_t)
    ibot, d_plogits = ibot_loss_grad(p_logits_s, p_logits_t,
                                     state.patch_center, ssl_cfg)
    _guard(ibot, "ibot", state.step)

    koleo, d_cls_koleo = koleo_loss_grad(cls_s)
    _guard(koleo, "koleo", state.step)

    gram = 0.0
    d_patches_gram = None
    if phase == POSTTRAIN:
        gram_z0 = np.stack([tokenize(v, enc_cfg, state.gram_teacher)
                            for (v, _) in views])
        gram_out, _ = forward_batch(gram_z0, enc_cfg, state.gram_teacher)
        gterms = []
        d_patches_gram = np.zeros_like(out_s[:, 1:, :])
        for v in range(2 * b):
            gv, dgv = gram_loss_grad(out_s[v, 1:, :], gram_out[v, 1:, :])
            gterms.append(gv)
            d_patches_gram[v] = dgv / (2 * b)
        gram = _guard(float(np.mean(gterms)), "gram", state.step)

    # ---- backward: assemble d(total)/d(encoder out) ----
    cls_grads, d_cls = head_backward(d_logits_s, cls_cache, cls_head_s)
    d_cls = d_cls + ssl_cfg.koleo_weight * d_cls_koleo
    patch_grads, d_masked = head_backward(d_plogits, patch_cache, patch_head_s)

    dout = np.zeros_like(out_s)
    dout[:, 0, :] = d_cls
    row = 0
    for v in range(2 * b):
        mcount = int(masks[v].sum())
        sl = d_masked[row:row + mcount]
        buf = np.zeros((n, out_s.shape[2]))
        buf[masks[v]] = sl
        dout[v, 1:, :] += buf
        row += mcount
    if d_patches_gram is not None:
        dout[:, 1:, :] += ssl_cfg.gram_weight * d_patches_gram

    enc_grads = backward_batch(dout, cache_s, enc_s)
    enc_grads.update(token_gradients(enc_grads.pop("z0"), patch_mats, masks,
                                     enc_s, enc_cfg))

    grads = {}
    grads.update(_prefixed(enc_grads, "enc."))
    grads.update(_prefixed(cls_grads, "cls_head."))
    grads.update(_prefixed(patch_grads, "patch_head."))
    adam_step(state.student, grads, state.adam, adam_cfg)

    # EMA teacher and center updates close the step
    m = ssl_cfg.ema_momentum
    for k in state.teacher:
        state.teacher[k] *= m
        state.teacher[k] += (1 - m) * state.student[k]
    cm = ssl_cfg.center_momentum
    state.cls_center = cm * state.cls_center + (1 - cm) * logits_t.mean(axis=0)
    state.patch_center = (cm * state.patch_center
                          + (1 - cm) * p_logits_t.mean(axis=0))
    state.step += 1
    return LossBreakdown.compute(dino, ibot, koleo, gram, ssl_cfg)


def run_training(corpus, state: TrainState, ssl_cfg: SslConfig,
                 enc_cfg: EncoderConfig, aug_cfg: StainAugConfig,
                 rng: RngStream, steps: int, batch_size: int,
                 phase: str = PRETRAIN, adam_cfg: AdamConfig = AdamConfig(),
                 log_path=None):
    """Fixed-step loop with deterministic with-replacement batching.

    Returns the list of per-step LossBreakdowns; optionally appends each
    as a JSON line to log_path.
    """
    if batch_size < 1 or steps < 0:
        raise ParameterError("need batch_size >= 1 and steps >= 0")
    if len(corpus) < 1:
        raise ParameterError("empty corpus")
    history = []
    log_fh = open(log_path, "a", encoding="ascii") if log_path else None
    try:
        for _ in range(steps):
            pick = rng.derive(9001, state.step).integers(batch_size, len(corpus))
            batch = [corpus[int(i)] for i in pick]
            lb = train_step(batch, state, ssl_cfg, enc_cfg, aug_cfg, rng,
                            phase=phase, adam_cfg=adam_cfg)
            history.append(lb)
            if log_fh:
                log_fh.write(json.dumps({
                    "step": state.step, "dino": lb.dino, "ibot": lb.ibot,
                    "koleo": lb.koleo, "gram": lb.gram, "total": lb.total,
                }, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return history


def save_train_state(path, state: TrainState, enc_cfg: EncoderConfig,
                     ssl_cfg: SslConfig, extra: dict = None) -> None:
    """Full training snapshot in the shared tensor container: both model
    copies, the optimizer moments, the centers, and the frozen Gram
    teacher when one is attached."""
    tensors = {}
    tensors.update(_prefixed(state.student, "student."))
    tensors.update(_prefixed(state.teacher, "teacher."))
    tensors.update(_prefixed(state.adam["m"], "adam.m."))
    tensors.update(_prefixed(state.adam["v"], "adam.v."))
    tensors["cls_center"] = state.cls_center
    tensors["patch_center"] = state.patch_center
    if state.gram_teacher is not None:
        tensors.update(_prefixed(state.gram_teacher, "gram."))
    config = {
        "encoder": encoder_config_dict(enc_cfg),
        "ssl": ssl_config_dict(ssl_cfg),
        "step": int(state.step),
        "adam_t": int(state.adam["t"]),
        "has_gram_teacher": state.gram_teacher is not None,
    }
    save_params(path, "train_state", config, tensors, extra=extra or {})


def load_train_state(path):
    """Inverse of save_train_state: (state, enc_cfg, ssl_cfg, extra)."""
    kind, config, tensors, extra = load_params(path)
    if kind != "train_state":
        raise DataError(f"{path}: not a training checkpoint (kind {kind!r})")
    state = TrainState(
        student=_sub(tensors, "student."),
        teacher=_sub(tensors, "teacher."),
        cls_center=tensors["cls_center"],
        patch_center=tensors["patch_center"],
        adam={"t": int(config.get("adam_t", 0)),
              "m": _sub(tensors, "adam.m."),
              "v": _sub(tensors, "adam.v.")},
        step=int(config.get("step", 0)),
        gram_teacher=(_sub(tensors, "gram.")
                      if config.get("has_gram_teacher") else None),
    )
    enc_cfg = encoder_config_from_dict(config.get("encoder", {}))
    ssl_cfg = ssl_config_from_dict(config.get("ssl", {}))
    return state, enc_cfg, ssl_cfg, extra


def ssl_config_dict(cfg: SslConfig) -> dict:
    return asdict(cfg)


def ssl_config_from_dict(d: dict) -> SslConfig:
    try:
        return SslConfig(**d)
    except TypeError as e:
        raise ConfigError(f"bad ssl config: {e}") from None
