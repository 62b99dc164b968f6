"""Datasets, the balanced-accuracy metric, and the ablation harness.

Three synthetic suite families probe specific failure modes at desk
scale: GLOBAL plants the label in whole-image mean color (any sane
classifier separates it), LOCAL plants it as a mean-preserving texture
inside a single tile so whole-image statistics are uninformative (with
an optional smooth color ramp as a nuisance only color-insensitive
features escape), and SHIFTED carries the label in whole-image stripe
orientation while the test split gets a large out-of-protocol color
change, so only shift-robust features survive.

The ablation grid evaluates three rows with shared splits and seeds:
plain-pretrained encoder with a linear probe, stain-augmented encoder
with a linear probe, and stain-augmented encoder with attention
pooling.  Reference full-scale averages for this grid (81.3 / 83.6 /
86.9) are recorded in reports as context only; desk-scale acceptance
relies on ordering properties, never on those absolute numbers.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import config_fingerprint, load_params, save_params
from .color import StainAugConfig, lab_to_rgb, read_ppm, rgb_to_lab
from .encoder import (EncoderConfig, TokenSequence, config_hash,
                      encoder_config_dict, encoder_config_from_dict, forward)
from .errors import ConfigError, DataError, ParameterError
from .heads import (ATTNPOOL, LINEAR, HeadTrainConfig, predict_batch,
                    train_head)
from .numkernel import RngStream
from .ssl import (SslConfig, init_train_state, run_training,
                  student_encoder_params)

TRAIN = "train"
VAL = "val"
TEST = "test"

GLOBAL = "global"
LOCAL = "local"
SHIFTED = "shifted"

# Fixed forward-pass chunk so embeddings are bitwise independent of how
# work is distributed across threads (BLAS kernels vary with shape).
_EMBED_CHUNK = 16


# ---------------------------------------------------------------------------
# metric


def class_recalls(y_true, y_pred, num_classes: int = None):
    """Per-class recall and support; recall is NaN where support is 0."""
    yt = np.asarray(y_true, dtype=np.int64).ravel()
    yp = np.asarray(y_pred, dtype=np.int64).ravel()
    if yt.size == 0:
        raise ParameterError("empty label arrays")
    if yt.shape != yp.shape:
        raise ParameterError("label arrays differ in length")
    c = int(num_classes) if num_classes is not None else int(max(yt.max(), yp.max())) + 1
    if yt.min() < 0 or yp.min() < 0 or yt.max() >= c or yp.max() >= c:
        raise ParameterError(f"labels outside [0, {c})")
    recalls = np.full(c, np.nan)
    support = np.zeros(c, dtype=np.int64)
    for cls in range(c):
        mask = yt == cls
        support[cls] = mask.sum()
        if support[cls]:
            recalls[cls] = np.mean(yp[mask] == cls)
    return recalls, support


def balanced_accuracy(y_true, y_pred, num_classes: int = None) -> float:
    """Unweighted mean of per-class recalls; zero-support classes are
    left out of the mean (callers can report them via class_recalls)."""
    recalls, support = class_recalls(y_true, y_pred, num_classes)
    live = support > 0
    return float(np.mean(recalls[live]))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class LabeledDataset:
    items: list                 # (raster uint8 (H,W,3), class id)
    class_names: list
    split: str
    source_ids: list = field(default_factory=list)

    def __post_init__(self):
        c = len(self.class_names)
        for _, label in self.items:
            if not 0 <= int(label) < c:
                raise ParameterError(f"class id {label} outside [0, {c})")
        if self.source_ids and len(self.source_ids) != len(self.items):
            raise ParameterError("source_ids length mismatch")

    @property
    def labels(self):
        return np.array([lab for _, lab in self.items], dtype=np.int64)

    @property
    def rasters(self):
        return [r for r, _ in self.items]


def split_hash(ds: LabeledDataset) -> str:
    payload = "\n".join(sorted(ds.source_ids))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class SuiteSpec:
    kind: str = GLOBAL
    num_classes: int = 2
    per_class: int = 30
    image_size: int = 64
    tile: int = 16
    noise_sigma: float = 18.0
    color_step: float = 26.0
    texture_amp: float = 55.0
    signal_tile: tuple = (1, 1)
    # LOCAL only: every non-signal tile gets a random texture at this
    # amplitude, so aggregate statistics drown the one informative tile.
    distractor_amp: float = 30.0
    # GLOBAL/SHIFTED: per-item wobble of the class color, so clusters
    # have width and shift damage is graded instead of all-or-nothing.
    # LOCAL: per-item uniform color cast, class-independent.
    color_jitter: float = 5.0
    # LOCAL only: per-item smooth color ramp (random orientation and
    # channel direction).  Token-wise normalization cannot remove it,
    # so it is a nuisance only color-insensitive features escape.
    gradient_amp: float = 0.0
    # SHIFTED only: whole-image stripe orientation at this amplitude is
    # the structural label cue.  The test-split protocol change moves
    # color far outside the train distribution, so features that lean
    # on color transfer worse than structural ones.
    structure_amp: float = 20.0
    # The protocol change: additive LAB offsets riding the class-color
    # axis plus mild spread scaling, per-item magnitude in [0.6, 1.4].
    shift_offset: tuple = (2.0, 14.0, -3.0)
    shift_scale: tuple = (1.0, 1.1, 1.1)

    def __post_init__(self):
        if self.kind not in (GLOBAL, LOCAL, SHIFTED):
            raise ParameterError(f"unknown suite kind {self.kind!r}")
        if not 2 <= self.num_classes <= 4:
            raise ParameterError("suites support 2 to 4 classes")
        if self.per_class < 5:
            raise ParameterError("need at least 5 items per class to split")
        if self.image_size < self.tile or self.image_size % self.tile:
            raise ParameterError("image_size must be a multiple of tile")
        grid = self.image_size // self.tile
        gy, gx = self.signal_tile
        if not (0 <= gy < grid and 0 <= gx < grid):
            raise ParameterError("signal_tile outside the tile grid")
        if self.noise_sigma <= 0 or self.color_step <= 0 or self.texture_amp <= 0:
            raise ParameterError("amplitudes must be positive")
        if self.color_jitter < 0 or self.structure_amp < 0 \
                or self.gradient_amp < 0:
            raise ParameterError("jitter amplitudes must be >= 0")
        if len(self.shift_offset) != 3 or len(self.shift_scale) != 3:
            raise ParameterError("shift parameters are per-channel triples")
        if any(s <= 0 for s in self.shift_scale):
            raise ParameterError("shift scales must be positive")


def _texture(kind_index: int, t: int, amp: float) -> np.ndarray:
    """Mean-preserving patterns: stripe/checker variants, one per class."""
    r = np.arange(t)
    if kind_index == 0:
        pat = np.where(r[:, None] % 2 == 0, amp, -amp) + np.zeros((t, t))
    elif kind_index == 1:
        pat = np.where(r[None, :] % 2 == 0, amp, -amp) + np.zeros((t, t))
    elif kind_index == 2:
        pat = np.where((r[:, None] + r[None, :]) % 2 == 0, amp, -amp)
    else:
        pat = np.where((r[:, None] // 2 + r[None, :] // 2) % 2 == 0, amp, -amp)
    return pat[:, :, None] * np.ones(3)


def _class_mean(c: int, step: float) -> np.ndarray:
    base = np.array([118.0, 118.0, 118.0])
    base[c % 3] += step * (1.0 + 0.5 * (c // 3))
    return base


def apply_protocol_shift(raster, offsets, scales) -> np.ndarray:
    """Deterministic staining-protocol change: per-channel LAB spread
    scaling about the image mean plus an additive offset."""
    lab = rgb_to_lab(raster).astype(np.float64)
    flat = lab.reshape(-1, 3)
    mean = flat.mean(axis=0)
    shifted = (flat - mean) * np.asarray(scales) + mean + np.asarray(offsets)
    return lab_to_rgb(shifted.reshape(lab.shape))


def _make_raster(spec: SuiteSpec, label: int, item_rng: RngStream) -> np.ndarray:
    s = spec.image_size
    noise = item_rng.gaussian(s * s * 3, 0.0, spec.noise_sigma).reshape(s, s, 3)
    if spec.kind == LOCAL:
        img = 120.0 + noise
        if spec.color_jitter:
            # class-independent cast: pure nuisance for the texture label
            img = img + item_rng.derive(5).gaussian(3, 0.0, spec.color_jitter)
        if spec.gradient_amp:
            g_rng = item_rng.derive(6)
            theta = 2.0 * np.pi * float(g_rng.uniform(1)[0])
            vec = g_rng.gaussian(3, 0.0, spec.gradient_amp)
            ax = np.linspace(-1.0, 1.0, s)
            ramp = np.cos(theta) * ax[:, None] + np.sin(theta) * ax[None, :]
            img = img + ramp[:, :, None] * vec
        t = spec.tile
        grid = s // t
        for gy in range(grid):
            for gx in range(grid):
                win = img[gy * t:(gy + 1) * t, gx * t:(gx + 1) * t]
                if (gy, gx) == tuple(spec.signal_tile):
                    win += _texture(label, t, spec.texture_amp)
                else:
                    kind = int(item_rng.derive(gy, gx).integers(1, 4)[0])
                    win += _texture(kind, t, spec.distractor_amp)
    else:
        mean = _class_mean(label, spec.color_step)
        if spec.color_jitter:
            mean = mean + item_rng.derive(5).gaussian(3, 0.0, spec.color_jitter)
        img = mean[None, None, :] + noise
        if spec.kind == SHIFTED and spec.structure_amp:
            img += _texture(label, s, spec.structure_amp)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_synthetic_suite(rng: RngStream, spec: SuiteSpec):
    """Reproducible (train, val, test) triple; splits are stratified per
    class over disjoint source ids, 60/20/20."""
    per_split = {TRAIN: [], VAL: [], TEST: []}
    per_split_ids = {TRAIN: [], VAL: [], TEST: []}
    n_tr = max(1, int(round(0.6 * spec.per_class)))
    n_val = max(1, int(round(0.2 * spec.per_class)))
    if n_tr + n_val >= spec.per_class:
        raise ParameterError("per_class too small for a 60/20/20 split")
    for c in range(spec.num_classes):
        order = rng.derive(888, c).permutation(spec.per_class)
        for rank, j in enumerate(order):
            j = int(j)
            raster = _make_raster(spec, c, rng.derive(c, j))
            sid = f"{spec.kind}-c{c}-{j:03d}"
            if rank < n_tr:
                split = TRAIN
            elif rank < n_tr + n_val:
                split = VAL
            else:
                split = TEST
            if spec.kind == SHIFTED and split == TEST:
                mag = 0.6 + 0.8 * float(rng.derive(c, j, 7).uniform(1)[0])
                raster = apply_protocol_shift(
                    raster, tuple(mag * o for o in spec.shift_offset),
                    spec.shift_scale)
            per_split[split].append((raster, c))
            per_split_ids[split].append(sid)
    names = [f"class{c}" for c in range(spec.num_classes)]
    return tuple(
        LabeledDataset(per_split[sp], names, sp, per_split_ids[sp])
        for sp in (TRAIN, VAL, TEST))


def make_pretrain_corpus(rng: RngStream, count: int = 64,
                         image_size: int = 64) -> list:
    """Unlabeled rasters with block structure for smoke-scale pretraining."""
    out = []
    for i in range(count):
        r = rng.derive(i)
        base = 60.0 + 140.0 * r.uniform(3)
        img = np.ones((image_size, image_size, 3)) * base
        for b in range(2 + int(r.integers(1, 3)[0])):
            br = r.derive(b)
            x0, y0 = (int(v) for v in br.integers(2, image_size - 8))
            w, h = (int(v) + 4 for v in br.integers(2, image_size // 3))
            col = 255.0 * br.uniform(3)
            img[y0:min(y0 + h, image_size), x0:min(x0 + w, image_size)] = col
        img += r.gaussian(image_size * image_size * 3, 0.0, 8.0).reshape(
            image_size, image_size, 3)
        out.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    return out


def make_token_suite(rng: RngStream, embed_dim: int = 64,
                     patch_count: int = 16, per_class_train: int = 128,
                     per_class_val: int = 512, signal_index: int = 3,
                     amplitude: float = 20.0, beacon: float = 10.0):
    """Token-level local-signal benchmark, isolating head behavior from
    the encoder: the class token is pure noise, and the label lives in
    one fixed patch token (a class-independent beacon on dim 0 plus a
    signed class component on dim 1).  A class-token probe can only hit
    chance; pooling over patch tokens can recover the label."""
    if not 0 <= signal_index < patch_count:
        raise ParameterError("signal_index outside the token range")

    def build(n_per_class, tag):
        items = []
        for c in (0, 1):
            for j in range(n_per_class):
                r = rng.derive(tag, c, j)
                cls_tok = r.gaussian(embed_dim)
                patches = r.gaussian(patch_count * embed_dim).reshape(
                    patch_count, embed_dim)
                patches[signal_index, 0] += beacon
                patches[signal_index, 1] += amplitude if c == 0 else -amplitude
                items.append((TokenSequence(cls_tok, patches, "tokensuite"), c))
        return items

    return build(per_class_train, 0), build(per_class_val, 1)


# ---------------------------------------------------------------------------
# directory ingestion


def ingest_directory(root) -> LabeledDataset:
    """Class-per-subdirectory layout: root/<class_name>/*.ppm.  Sorted
    subdirectory order defines the dense class ids."""
    root = Path(root)
    if not root.is_dir():
        raise ParameterError(f"{root}: not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    names, kept_dirs = [], []
    for d in class_dirs:
        files = sorted(d.glob("*.ppm"))
        if not files:
            warnings.warn(f"class directory {d.name!r} has no .ppm files; excluded")
            continue
        names.append(d.name)
        kept_dirs.append((d, files))
    items, source_ids, failures = [], [], []
    for cid, (d, files) in enumerate(kept_dirs):
        for f in files:
            try:
                items.append((read_ppm(f), cid))
                source_ids.append(f"{d.name}/{f.name}")
            except (DataError, OSError) as e:
                failures.append(f"  {f}: {e}")
    if failures:
        raise DataError("unreadable raster files:\n" + "\n".join(failures))
    return LabeledDataset(items, names, "all", source_ids)


def split_dataset(ds: LabeledDataset, seed: int):
    """Seeded stratified 60/20/20 split over disjoint source ids."""
    rng = RngStream(seed=seed, stream_id=4242)
    by_class = {}
    for idx, (_, label) in enumerate(ds.items):
        by_class.setdefault(int(label), []).append(idx)
    per_split = {TRAIN: [], VAL: [], TEST: []}
    for c in sorted(by_class):
        idxs = by_class[c]
        if len(idxs) < 5:
            raise ParameterError(
                f"class {ds.class_names[c]!r} has {len(idxs)} items; "
                "need at least 5 to split")
        order = rng.derive(c).permutation(len(idxs))
        n_tr = max(1, int(round(0.6 * len(idxs))))
        n_val = max(1, int(round(0.2 * len(idxs))))
        if n_tr + n_val >= len(idxs):
            n_tr = len(idxs) - n_val - 1
        for rank, k in enumerate(order):
            idx = idxs[int(k)]
            split = (TRAIN if rank < n_tr
                     else VAL if rank < n_tr + n_val else TEST)
            per_split[split].append(idx)
    out = []
    for sp in (TRAIN, VAL, TEST):
        chosen = sorted(per_split[sp])
        out.append(LabeledDataset(
            [ds.items[i] for i in chosen], list(ds.class_names), sp,
            [ds.source_ids[i] for i in chosen] if ds.source_ids else []))
    return tuple(out)


# ---------------------------------------------------------------------------
# embedding extraction


def embed_dataset(ds: LabeledDataset, enc_params: dict, cfg: EncoderConfig,
                  threads: int = 1) -> list:
    """Frozen-encoder token sequences for every item, in dataset order.

    Work is chunked at a fixed size and chunks may run on a thread
    pool; outputs are assembled in order, so results are byte-identical
    for any thread count."""
    rasters = ds.rasters if isinstance(ds, LabeledDataset) else list(ds)
    chunks = [rasters[i:i + _EMBED_CHUNK]
              for i in range(0, len(rasters), _EMBED_CHUNK)]

    def run(chunk):
        return [forward(r, cfg, enc_params) for r in chunk]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [seq for part in parts for seq in part]


def save_embeddings(path, seqs: list, labels, cfg: EncoderConfig,
                    extra: dict = None) -> None:
    tensors = {
        "cls": np.stack([s.cls for s in seqs]),
        "patches": np.stack([s.patches for s in seqs]),
        "labels": np.asarray(labels, dtype=np.float64),
    }
    save_params(path, "embeddings", encoder_config_dict(cfg), tensors,
                extra=extra or {})


def load_embeddings(path):
    kind, cfgdict, tensors, extra = load_params(path)
    if kind != "embeddings":
        raise DataError(f"{path}: not an embeddings file (kind {kind!r})")
    chash = config_hash(encoder_config_from_dict(cfgdict))
    seqs = [TokenSequence(c, p, chash)
            for c, p in zip(tensors["cls"], tensors["patches"])]
    return seqs, tensors["labels"].astype(np.int64), extra


# ---------------------------------------------------------------------------
# reports


_SCHEMA_CACHE = {}


def _report_schema() -> dict:
    if "schema" not in _SCHEMA_CACHE:
        schema_path = Path(__file__).with_name("bench_report.schema.json")
        _SCHEMA_CACHE["schema"] = json.loads(schema_path.read_text("ascii"))
    return _SCHEMA_CACHE["schema"]


def validate_report(report: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(report, _report_schema())
    except jsonschema.ValidationError as e:
        raise DataError(f"report schema violation: {e.message}") from None


def write_report(report: dict, path) -> None:
    validate_report(report)
    with open(path, "w", encoding="ascii") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


def make_report(task: str, y_true, y_pred, num_classes: int,
                fingerprint: str, seed: int, class_names=None,
                ablation_rows=None, extra: dict = None) -> dict:
    recalls, support = class_recalls(y_true, y_pred, num_classes)
    live = support > 0
    report = {
        "format_version": 1,
        "task": task,
        "bacc": float(np.mean(recalls[live])),
        "per_class_recalls": [None if not live[c] else float(recalls[c])
                              for c in range(num_classes)],
        "zero_support_classes": [int(c) for c in np.nonzero(~live)[0]],
        "config_fingerprint": fingerprint,
        "seed": int(seed),
    }
    if class_names is not None:
        report["class_names"] = list(class_names)
    if ablation_rows is not None:
        report["ablation_rows"] = ablation_rows
    if extra:
        report.update(extra)
    return report


def _fmt_delta(delta: float) -> str:
    arrow = "↑" if delta >= 0 else "↓"
    return f"({abs(delta) * 100:.1f}{arrow})"


def render_ablation_table(report: dict) -> str:
    """Three-row grid as text, deltas as percent points with arrows."""
    lines = [f"{'stain aug':<11}{'head':<10}{'BACC':>7}  delta"]
    prev = None
    for row in report["ablation_rows"]:
        delta = "" if prev is None else _fmt_delta(row["bacc"] - prev)
        flag = "yes" if row["staining_aug"] else "no"
        lines.append(
            f"{flag:<11}{row['head_mode']:<10}{row['bacc'] * 100:>6.1f}  {delta}")
        prev = row["bacc"]
    return "\n".join(lines)


def write_bacc_svg(report: dict, path) -> None:
    """Deterministic bar chart of per-row BACC (no external assets)."""
    rows = report.get("ablation_rows") or [
        {"staining_aug": False, "head_mode": "single", "bacc": report["bacc"]}]
    width, height, pad = 420, 240, 36
    bar_w = (width - 2 * pad) // max(1, len(rows)) - 18
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="#333333"/>']
    for i, row in enumerate(rows):
        x = pad + 12 + i * (bar_w + 18)
        h = int(round((height - 2 * pad) * max(0.0, min(1.0, row["bacc"]))))
        y = height - pad - h
        label = ("aug+" if row["staining_aug"] else "plain+") + row["head_mode"]
        parts.append(f'<rect x="{x}" y="{y}" width="{bar_w}" height="{h}" '
                     f'fill="#5b8db8"/>')
        parts.append(f'<text x="{x + bar_w // 2}" y="{y - 6}" font-size="12" '
                     f'text-anchor="middle" fill="#111111">'
                     f'{row["bacc"] * 100:.1f}</text>')
        parts.append(f'<text x="{x + bar_w // 2}" y="{height - pad + 16}" '
                     f'font-size="11" text-anchor="middle" fill="#111111">'
                     f'{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# ablation harness

# Full-scale averages for the same three-row grid, from the original
# large-corpus training run.  Context only: desk-scale runs must never
# be asserted against them.
FULL_SCALE_CONTEXT = {
    "rows": [81.3, 83.6, 86.9],
    "note": "averages from the original full-scale run; recorded as "
            "non-reproducible context, deltas at desk scale are "
            "ordering-only",
}


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    pretrain_steps: int = 400
    batch_size: int = 8
    ssl_lr: float = 3e-3
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        image_size=64, token_size=16, embed_dim=32, depth=1, num_heads=4,
        mlp_ratio=2.0))
    ssl: SslConfig = field(default_factory=lambda: SslConfig(
        prototype_count=64, mask_fraction=0.3))
    aug: StainAugConfig = field(default_factory=lambda: StainAugConfig(
        space="both",
        lab_mean_sigma=(6.0, 5.0, 5.0),
        lab_std_sigma=(0.15, 0.15, 0.15),
        hsv_mean_sigma=(8.0, 0.06, 0.06),
        hsv_std_sigma=(0.1, 0.1, 0.1)))
    head: HeadTrainConfig = field(default_factory=lambda: HeadTrainConfig(
        epochs=60, lr=1e-2, weight_decay=1e-3, batch=32, num_heads=4))
    threads: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.pretrain_steps < 0 or self.batch_size < 1:
            raise ConfigError("bad pretrain schedule")
        if self.ssl_lr <= 0:
            raise ConfigError("ssl_lr must be positive")


def ablation_config_dict(cfg: AblationConfig) -> dict:
    from dataclasses import asdict

    d = asdict(cfg)
    # thread count is execution infrastructure, not configuration: results
    # are identical for any value, so it stays out of the fingerprint
    d.pop("threads")
    d["seeds"] = list(cfg.seeds)
    d["aug"]["lab_mean_sigma"] = list(cfg.aug.lab_mean_sigma)
    d["aug"]["lab_std_sigma"] = list(cfg.aug.lab_std_sigma)
    d["aug"]["hsv_mean_sigma"] = list(cfg.aug.hsv_mean_sigma)
    d["aug"]["hsv_std_sigma"] = list(cfg.aug.hsv_std_sigma)
    return d


def _pretrain_encoder(corpus, cfg: AblationConfig, seed: int,
                      augmented: bool):
    from .optim import AdamConfig

    aug = cfg.aug if augmented else replace(cfg.aug, enabled=False)
    state = init_train_state(cfg.encoder, cfg.ssl,
                             RngStream(seed=seed, stream_id=11))
    if cfg.pretrain_steps:
        run_training(corpus, state, cfg.ssl, cfg.encoder, aug,
                     RngStream(seed=seed, stream_id=12),
                     steps=cfg.pretrain_steps, batch_size=cfg.batch_size,
                     adam_cfg=AdamConfig(lr=cfg.ssl_lr))
    return student_encoder_params(state)


_ROW_DEFS = (
    {"staining_aug": False, "head_mode": LINEAR},
    {"staining_aug": True, "head_mode": LINEAR},
    {"staining_aug": True, "head_mode": ATTNPOOL},
)


def acceptance_suites(rng: RngStream) -> dict:
    """The shipped desk-scale pair: LOCAL with distractor textures and
    SHIFTED with an out-of-protocol color change over a structural label."""
    return {
        "local": make_synthetic_suite(
            rng.derive(0), SuiteSpec(kind=LOCAL, per_class=60,
                                     color_jitter=0.0, gradient_amp=20.0)),
        "shifted": make_synthetic_suite(
            rng.derive(1), SuiteSpec(kind=SHIFTED, per_class=60,
                                     color_step=2.0, color_jitter=3.0,
                                     structure_amp=20.0,
                                     shift_offset=(20.0, 16.0, -10.0),
                                     shift_scale=(1.25, 1.25, 1.25))),
    }


def run_ablation(datasets: dict, cfg: AblationConfig) -> dict:
    """Three-row grid over named (train, val, test) triples.

    Every row of one seed shares the pretrain corpus, the splits, and
    the head-training seed; only the encoder's augmentation flag and
    the head mode differ.  Returns a schema-valid report dict.
    """
    if not datasets:
        raise ConfigError("no datasets given")
    names = sorted(datasets)
    hashes = {n: [split_hash(s) for s in datasets[n]] for n in names}
    per_row_task = {i: {n: [] for n in names} for i in range(3)}
    for seed in cfg.seeds:
        for n in names:
            tr, va, te = datasets[n]
            # pretraining sees only this task's unlabeled train rasters
            embeds = {}
            for flag in (False, True):
                enc = _pretrain_encoder(tr.rasters, cfg, seed,
                                        augmented=flag)
                embeds[flag] = tuple(
                    embed_dataset(ds, enc, cfg.encoder, cfg.threads)
                    for ds in (tr, va, te))
            for i, rowdef in enumerate(_ROW_DEFS):
                etr, eva, ete = embeds[rowdef["staining_aug"]]
                head_cfg = replace(cfg.head, seed=seed)
                result = train_head(
                    list(zip(etr, tr.labels)), list(zip(eva, va.labels)),
                    rowdef["head_mode"], head_cfg)
                preds = predict_batch(ete, result.params, rowdef["head_mode"])
                per_row_task[i][n].append(
                    balanced_accuracy(te.labels, preds,
                                      len(te.class_names)))
    rows = []
    for i, rowdef in enumerate(_ROW_DEFS):
        task_means = {n: float(np.mean(per_row_task[i][n])) for n in names}
        row = dict(rowdef)
        row["bacc"] = float(np.mean(list(task_means.values())))
        row["per_task_bacc"] = task_means
        row["split_hashes"] = hashes
        rows.append(row)
    for i in (1, 2):
        rows[i]["delta_vs_previous"] = rows[i]["bacc"] - rows[i - 1]["bacc"]
        rows[i]["delta_rendered"] = _fmt_delta(rows[i]["delta_vs_previous"])
    if any(r["split_hashes"] != rows[0]["split_hashes"] for r in rows):
        raise DataError("ablation rows saw different splits")
    fingerprint = config_fingerprint(ablation_config_dict(cfg))
    report = {
        "format_version": 1,
        "task": "+".join(names),
        "bacc": rows[-1]["bacc"],
        "per_class_recalls": [],
        "zero_support_classes": [],
        "config_fingerprint": fingerprint,
        "seed": int(cfg.seeds[0]),
        "seeds": [int(s) for s in cfg.seeds],
        "ablation_rows": rows,
        "full_scale_context": dict(FULL_SCALE_CONTEXT),
        "note": "desk-scale run; row ordering, not absolute level, is the "
                "meaningful signal",
    }
    validate_report(report)
    return report
