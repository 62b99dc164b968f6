"""Command-line entry point for the full pipeline.

One executable, nine subcommands: tile, augment, pretrain, posttrain,
embed, probe, bench, ablate, gradcheck, plus a demo driver that chains
them end to end on synthetic data.

Conventions shared by every command:
  - exit codes: 0 success, 1 verification failure, 2 usage/config
    error, 3 data error
  - configs come from an optional JSON file (flat, module-mirrored
    field names) with command-line flags overriding file values
  - every primary output records a fingerprint of the resolved config;
    thread count is execution infrastructure and deliberately excluded
    from the fingerprint, so outputs are byte-identical for any
    --threads value
  - timestamps appear only in ``<output>.log`` sidecars, never in
    primary outputs
"""

from __future__ import annotations

import argparse
import copy
import datetime
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import bench as B
from .bench import (AblationConfig, SuiteSpec, balanced_accuracy,
                    embed_dataset, ingest_directory, make_report,
                    make_pretrain_corpus, make_synthetic_suite,
                    render_ablation_table, run_ablation, save_embeddings,
                    split_dataset, write_bacc_svg, write_report)
from .checkpoint import config_fingerprint
from .color import StainAugConfig, read_ppm, stain_augment, write_ppm
from .encoder import EncoderConfig, encoder_config_dict
from .errors import (ConfigError, DataError, NumericError, ParameterError,
                     TokenhierError)
from .gradcheck import component_names, run_all
from .heads import ATTNPOOL, LINEAR, HeadTrainConfig, predict_batch, train_head
from .numkernel import RngStream
from .optim import AdamConfig
from .ssl import (POSTTRAIN, SslConfig, init_train_state, load_train_state,
                  run_training, save_train_state, ssl_config_dict,
                  student_encoder_params)
from .tiler import TileManifest, extract_tiles, merge_manifests, write_manifest

_DESK = AblationConfig()   # desk-scale defaults shared with the ablation grid


# ---------------------------------------------------------------------------
# config plumbing


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _build(dc_type, base, flat: dict):
    """Dataclass instance from flat config keys matching its fields."""
    names = {f.name for f in fields(dc_type)}
    picked = {k: v for k, v in flat.items() if k in names}
    for key in ("lab_mean_sigma", "lab_std_sigma", "hsv_mean_sigma",
                "hsv_std_sigma"):
        if key in picked and isinstance(picked[key], list):
            picked[key] = tuple(picked[key])
    try:
        return replace(base, **picked) if base is not None else dc_type(**picked)
    except TypeError as e:
        raise ConfigError(f"bad {dc_type.__name__} config: {e}") from None


def _reject_unknown(flat: dict, known):
    unknown = sorted(set(flat) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def _fingerprint(command: str, resolved: dict) -> str:
    return config_fingerprint({"command": command, **resolved})


def _note(primary_path, message: str) -> None:
    """Timestamped sidecar line; the only place wall-clock time goes."""
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(f"{primary_path}.log", "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {message}\n")


def _say(args, message: str) -> None:
    if getattr(args, "log_level", "info") != "quiet":
        print(message)


def _threads(args) -> int:
    if args.threads is not None:
        value = args.threads
    else:
        value = int(os.environ.get("TOKENHIER_THREADS", "1"))
    if value < 1:
        raise ConfigError(f"--threads must be >= 1, got {value}")
    return value


def _ensure_parent(path) -> None:
    parent = Path(path).resolve().parent
    parent.mkdir(parents=True, exist_ok=True)


def _ppm_files(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{d}: not a readable directory")
    return sorted(d.glob("*.ppm"))


# ---------------------------------------------------------------------------
# tile


def cmd_tile(args) -> int:
    files = _ppm_files(args.input)
    resolved = {"tile_size": args.tile_size, "min_tissue": args.min_tissue,
                "invert": bool(args.invert)}
    fp = _fingerprint("tile", resolved)
    _ensure_parent(args.out)
    if not files:
        print(f"warning: no .ppm files under {args.input}", file=sys.stderr)
        write_manifest(TileManifest([], args.tile_size, 0, args.min_tissue),
                       args.out, extra_header={"config_fingerprint": fp})
        _note(args.out, "tile: empty input directory")
        _say(args, "tiled 0 sources -> 0 tiles")
        return 0
    manifests, degenerate = [], 0
    for f in files:
        try:
            raster = read_ppm(f)
        except (DataError, OSError) as e:
            raise ConfigError(f"unreadable input {f}: {e}") from None
        if np.all(raster == raster.reshape(-1)[0]):
            degenerate += 1
        manifests.append(extract_tiles(raster, f.stem, args.tile_size,
                                       args.min_tissue, invert=args.invert))
    merged = merge_manifests(manifests)
    if not merged.records and degenerate == len(files):
        raise DataError("every input image is single-valued; nothing tiled")
    write_manifest(merged, args.out,
                   extra_header={"config_fingerprint": fp})
    _note(args.out, f"tile: {len(files)} sources")
    _say(args, f"tiled {len(files)} sources -> {len(merged.records)} tiles")
    return 0


# ---------------------------------------------------------------------------
# augment


def cmd_augment(args) -> int:
    flat = _load_config_file(args.config)
    _reject_unknown(flat, [f.name for f in fields(StainAugConfig)])
    aug = _build(StainAugConfig, StainAugConfig(), flat)
    if args.space is not None:
        aug = replace(aug, space=args.space)
    files = _ppm_files(args.input)
    if not files:
        raise DataError(f"no .ppm files under {args.input}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"seed": args.seed, "space": aug.space,
                "lab_mean_sigma": list(aug.lab_mean_sigma),
                "lab_std_sigma": list(aug.lab_std_sigma),
                "hsv_mean_sigma": list(aug.hsv_mean_sigma),
                "hsv_std_sigma": list(aug.hsv_std_sigma)}
    fp = _fingerprint("augment", resolved)
    root = RngStream(seed=args.seed, stream_id=71)
    for i, f in enumerate(files):
        write_ppm(out_dir / f.name, stain_augment(read_ppm(f), aug,
                                                  root.derive(i)))
    summary = {"config_fingerprint": fp, "count": len(files),
               "space": aug.space}
    with open(out_dir / "augment_summary.json", "w", encoding="ascii") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _note(out_dir / "augment_summary.json", f"augment: {len(files)} rasters")
    _say(args, f"augmented {len(files)} rasters -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# pretrain / posttrain


_TRAIN_SCALARS = ("steps", "batch_size", "lr", "seed")


def _training_configs(args):
    flat = _load_config_file(args.config)
    known = ([f.name for f in fields(EncoderConfig)]
             + [f.name for f in fields(SslConfig)]
             + [f.name for f in fields(StainAugConfig)]
             + list(_TRAIN_SCALARS))
    _reject_unknown(flat, known)
    enc = _build(EncoderConfig, _DESK.encoder, flat)
    ssl = _build(SslConfig, _DESK.ssl, flat)
    aug = _build(StainAugConfig, _DESK.aug, flat)
    steps = args.steps if args.steps is not None else int(flat.get("steps", 200))
    batch = (args.batch_size if args.batch_size is not None
             else int(flat.get("batch_size", _DESK.batch_size)))
    lr = float(flat.get("lr", _DESK.ssl_lr))
    seed = args.seed if args.seed is not None else int(flat.get("seed", 0))
    if steps < 0:
        raise ConfigError(f"--steps must be >= 0, got {steps}")
    resolved = {"encoder": encoder_config_dict(enc),
                "ssl": ssl_config_dict(ssl),
                "aug": {"space": aug.space, "enabled": aug.enabled,
                        "lab_mean_sigma": list(aug.lab_mean_sigma),
                        "lab_std_sigma": list(aug.lab_std_sigma),
                        "hsv_mean_sigma": list(aug.hsv_mean_sigma),
                        "hsv_std_sigma": list(aug.hsv_std_sigma)},
                "steps": steps, "batch_size": batch, "lr": lr, "seed": seed}
    return enc, ssl, aug, steps, batch, lr, seed, resolved


def _load_corpus(args, enc: EncoderConfig, seed: int) -> list:
    if args.input:
        files = _ppm_files(args.input)
        if not files:
            raise DataError(f"no .ppm files under {args.input}")
        return [read_ppm(f) for f in files]
    return make_pretrain_corpus(RngStream(seed=seed, stream_id=10),
                                count=64, image_size=enc.image_size)


def _run_ssl(args, phase: str) -> int:
    enc, ssl, aug, steps, batch, lr, seed, resolved = _training_configs(args)
    resolved["phase"] = phase
    fp = _fingerprint(phase, resolved)
    corpus = _load_corpus(args, enc, seed)
    if phase == POSTTRAIN:
        if not args.gram_teacher:
            raise ConfigError("post-training requires --gram-teacher")
        anchor_state, anchor_enc, _, _ = load_train_state(args.gram_teacher)
        if encoder_config_dict(anchor_enc) != encoder_config_dict(enc):
            raise ConfigError("--gram-teacher encoder geometry differs "
                              "from the requested config")
        gram_params = student_encoder_params(anchor_state)
        if args.init:
            state, init_enc, _, _ = load_train_state(args.init)
            if encoder_config_dict(init_enc) != encoder_config_dict(enc):
                raise ConfigError("--init encoder geometry differs "
                                  "from the requested config")
        else:
            state = copy.deepcopy(anchor_state)
        state.gram_teacher = gram_params
    else:
        state = init_train_state(enc, ssl, RngStream(seed=seed, stream_id=11))
    _ensure_parent(args.out)
    log_path = args.log or f"{args.out}.losses.jsonl"
    _ensure_parent(log_path)
    with open(log_path, "w", encoding="ascii") as fh:
        fh.write(json.dumps({"config_fingerprint": fp, "phase": phase},
                            sort_keys=True) + "\n")
    history = run_training(corpus, state, ssl, enc, aug,
                           RngStream(seed=seed, stream_id=12),
                           steps=steps, batch_size=batch, phase=phase,
                           adam_cfg=AdamConfig(lr=lr), log_path=log_path)
    save_train_state(args.out, state, enc, ssl,
                     extra={"config_fingerprint": fp, "phase": phase})
    _note(args.out, f"{phase}: {steps} steps on {len(corpus)} rasters")
    if history:
        _say(args, f"{phase} {steps} steps: total "
                   f"{history[0].total:.4f} -> {history[-1].total:.4f}")
    else:
        _say(args, f"{phase} 0 steps: checkpoint is the initialization")
    return 0


def cmd_pretrain(args) -> int:
    return _run_ssl(args, "pretrain")


def cmd_posttrain(args) -> int:
    return _run_ssl(args, POSTTRAIN)


# ---------------------------------------------------------------------------
# embed


def _encoder_from_checkpoint(path):
    state, enc_cfg, _, _ = load_train_state(path)
    return student_encoder_params(state), enc_cfg


def cmd_embed(args) -> int:
    params, enc_cfg = _encoder_from_checkpoint(args.ckpt)
    ds = ingest_directory(args.data)
    fp = _fingerprint("embed", {"encoder": encoder_config_dict(enc_cfg),
                                "data": sorted(ds.source_ids)})
    seqs = embed_dataset(ds, params, enc_cfg, threads=_threads(args))
    _ensure_parent(args.out)
    save_embeddings(args.out, seqs, ds.labels, enc_cfg,
                    extra={"config_fingerprint": fp,
                           "class_names": ds.class_names})
    _note(args.out, f"embed: {len(seqs)} items from {args.data}")
    _say(args, f"embedded {len(seqs)} items -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# probe


def cmd_probe(args) -> int:
    flat = _load_config_file(args.config)
    _reject_unknown(flat, [f.name for f in fields(HeadTrainConfig)])
    head_cfg = _build(HeadTrainConfig, _DESK.head, flat)
    seed = args.seed if args.seed is not None else head_cfg.seed
    head_cfg = replace(head_cfg, seed=seed)
    params, enc_cfg = _encoder_from_checkpoint(args.ckpt)
    ds = ingest_directory(args.data)
    if len(ds.class_names) < 2:
        raise ParameterError(
            f"{args.data}: found {len(ds.class_names)} class directories; "
            "probing needs at least 2")
    tr, va, te = split_dataset(ds, seed)
    threads = _threads(args)
    etr, eva, ete = (embed_dataset(s, params, enc_cfg, threads=threads)
                     for s in (tr, va, te))
    result = train_head(list(zip(etr, tr.labels)), list(zip(eva, va.labels)),
                        args.mode, head_cfg)
    preds = predict_batch(ete, result.params, args.mode)
    resolved = {"encoder": encoder_config_dict(enc_cfg), "mode": args.mode,
                "seed": seed, "epochs": head_cfg.epochs, "lr": head_cfg.lr,
                "weight_decay": head_cfg.weight_decay,
                "batch": head_cfg.batch, "num_heads": head_cfg.num_heads}
    fp = _fingerprint("probe", resolved)
    report = make_report(Path(args.data).name, te.labels, preds,
                         len(ds.class_names), fp, seed,
                         class_names=ds.class_names,
                         extra={"head_mode": args.mode,
                                "val_bacc": result.best_val_bacc})
    _ensure_parent(args.report)
    write_report(report, args.report)
    _note(args.report, f"probe: mode={args.mode}")
    _say(args, f"probe {args.mode} test bacc {report['bacc']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# bench


_SUITE_SPECS = {
    B.GLOBAL: dict(kind=B.GLOBAL),
    B.LOCAL: dict(kind=B.LOCAL, color_jitter=0.0, gradient_amp=20.0),
    B.SHIFTED: dict(kind=B.SHIFTED, color_step=2.0, color_jitter=3.0,
                    structure_amp=20.0, shift_offset=(20.0, 16.0, -10.0),
                    shift_scale=(1.25, 1.25, 1.25)),
}


def _materialize_suite(kind: str, per_class: int, seed: int, out_dir: Path,
                       distractor_amp=None):
    kw = dict(_SUITE_SPECS[kind])
    if distractor_amp is not None:
        kw["distractor_amp"] = distractor_amp
    spec = SuiteSpec(per_class=per_class, **kw)
    splits = make_synthetic_suite(RngStream(seed=seed, stream_id=5), spec)
    for name in (f"class{c}" for c in range(spec.num_classes)):
        (out_dir / name).mkdir(parents=True, exist_ok=True)
    for split in splits:
        for (raster, label), sid in zip(split.items, split.source_ids):
            name = f"class{label}"
            write_ppm(out_dir / name / f"{sid}.ppm", raster)
    return splits


def cmd_bench(args) -> int:
    out_dir = Path(args.out)
    splits = _materialize_suite(args.suite, args.per_class, args.seed, out_dir)
    tr, va, te = splits

    def feats(ds):
        return np.stack([r.reshape(-1, 3).mean(axis=0) for r in ds.rasters])

    ftr, fte = feats(tr), feats(te)
    cents = np.stack([ftr[tr.labels == c].mean(axis=0)
                      for c in range(len(tr.class_names))])
    d = ((fte[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    preds = np.argmin(d, axis=1)
    baseline = balanced_accuracy(te.labels, preds, len(tr.class_names))
    fp = _fingerprint("bench", {"suite": args.suite,
                                "per_class": args.per_class,
                                "seed": args.seed})
    report = make_report(f"suite-{args.suite}", te.labels, preds,
                         len(tr.class_names), fp, args.seed,
                         class_names=tr.class_names,
                         extra={"note": "mean-color nearest-centroid "
                                        "baseline on the held-out third"})
    write_report(report, out_dir / "report.json")
    _note(out_dir / "report.json", f"bench: suite={args.suite}")
    total = sum(len(s.items) for s in splits)
    _say(args, f"wrote {args.suite} suite ({total} items) -> {out_dir}; "
               f"mean-color baseline bacc {baseline:.4f}")
    return 0


# ---------------------------------------------------------------------------
# ablate


_ABLATE_KEYS = ("seeds", "pretrain_steps", "batch_size", "ssl_lr",
                "suite_seed", "suite_per_class", "head_epochs")


def cmd_ablate(args) -> int:
    flat = _load_config_file(args.config)
    _reject_unknown(flat, _ABLATE_KEYS)
    cfg = _DESK
    if "seeds" in flat:
        cfg = replace(cfg, seeds=tuple(int(s) for s in flat["seeds"]))
    for key in ("pretrain_steps", "batch_size"):
        if key in flat:
            cfg = replace(cfg, **{key: int(flat[key])})
    if "ssl_lr" in flat:
        cfg = replace(cfg, ssl_lr=float(flat["ssl_lr"]))
    if "head_epochs" in flat:
        cfg = replace(cfg, head=replace(cfg.head,
                                        epochs=int(flat["head_epochs"])))
    cfg = replace(cfg, threads=_threads(args))
    suite_seed = int(flat.get("suite_seed", 2024))
    per_class = int(flat.get("suite_per_class", 60))
    rng = RngStream(seed=suite_seed, stream_id=5)
    suites = {
        "local": make_synthetic_suite(
            rng.derive(0), SuiteSpec(per_class=per_class,
                                     **_SUITE_SPECS[B.LOCAL])),
        "shifted": make_synthetic_suite(
            rng.derive(1), SuiteSpec(per_class=per_class,
                                     **_SUITE_SPECS[B.SHIFTED])),
    }
    report = run_ablation(suites, cfg)
    _ensure_parent(args.out)
    write_report(report, args.out)
    svg_path = args.svg or f"{args.out}.svg"
    write_bacc_svg(report, svg_path)
    _note(args.out, f"ablate: seeds={list(cfg.seeds)}")
    _say(args, render_ablation_table(report))
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    results = run_all(inject_fault=args.inject_fault)
    for r in results:
        _say(args, f"{r.component:<20} {r.worst_rel_err:.3e} "
                   f"{'PASS' if r.passed else 'FAIL'}")
    failing = [r.component for r in results if not r.passed]
    if failing:
        print(f"gradient check failed: {', '.join(failing)}",
              file=sys.stderr)
        return 1
    _say(args, f"all {len(results)} components within "
               f"{results[0].tolerance:g}")
    return 0


# ---------------------------------------------------------------------------
# demo


def cmd_demo(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    passthrough = ["--log-level", args.log_level]
    if args.threads is not None:
        passthrough += ["--threads", str(args.threads)]

    def run(argv):
        code = main(argv + passthrough)
        if code:
            raise ConfigError(f"demo step {argv[0]} exited {code}")

    _say(args, "[1/6] synthetic suites")
    run(["bench", "--suite", "global", "--out", str(out / "suite-global"),
         "--per-class", "20", "--seed", str(seed)])
    run(["bench", "--suite", "local", "--out", str(out / "suite-local"),
         "--per-class", "60", "--seed", str(seed)])
    _say(args, "[2/6] tiling + augmentation")
    run(["tile", "--input", str(out / "suite-global" / "class0"),
         "--out", str(out / "tiles.jsonl"), "--tile-size", "16",
         "--min-tissue", "0.0"])
    run(["augment", "--input", str(out / "suite-global" / "class0"),
         "--out", str(out / "augmented"), "--seed", str(seed)])
    _say(args, "[3/6] self-supervised pretraining (100 steps)")
    run(["pretrain", "--steps", "100", "--out", str(out / "encoder.ckpt"),
         "--seed", str(seed)])
    _say(args, "[4/6] frozen embeddings")
    run(["embed", "--ckpt", str(out / "encoder.ckpt"),
         "--data", str(out / "suite-global"),
         "--out", str(out / "global.emb")])
    _say(args, "[5/6] probes")
    for suite, mode in (("global", LINEAR), ("local", LINEAR),
                        ("local", ATTNPOOL)):
        run(["probe", "--ckpt", str(out / "encoder.ckpt"),
             "--data", str(out / f"suite-{suite}"), "--mode", mode,
             "--seed", str(seed),
             "--report", str(out / f"probe-{suite}-{mode}.json")])
    _say(args, "[6/6] gradient checks")
    run(["gradcheck"])
    lines = ["demo reports:"]
    for suite, mode in (("global", LINEAR), ("local", LINEAR),
                        ("local", ATTNPOOL)):
        rep = json.loads((out / f"probe-{suite}-{mode}.json").read_text())
        lines.append(f"  {suite:<7} {mode:<9} test bacc {rep['bacc']:.4f}")
    _say(args, "\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenhier",
        description="tiling, stain augmentation, self-supervised encoder "
                    "training, token probes, and benchmark harness")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="run seed (default 0 or the config file value)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker pool cap; TOKENHIER_THREADS is the "
                             "fallback, then 1")
    common.add_argument("--log-level", choices=("quiet", "info"),
                        default="info")
    common.add_argument("--config", default=None,
                        help="JSON config file; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", parents=[common],
                       help="grid-tile rasters into a JSON-lines manifest")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--min-tissue", type=float, default=0.5)
    p.add_argument("--invert", action="store_true",
                   help="treat bright regions as tissue")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("augment", parents=[common],
                       help="write stain-jittered copies of a raster tree")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--space", choices=("lab", "hsv", "both"), default=None)
    p.set_defaults(func=cmd_augment, seed=0)

    for name, fn in (("pretrain", cmd_pretrain), ("posttrain", cmd_posttrain)):
        p = sub.add_parser(name, parents=[common],
                           help=f"{name} the encoder; JSON-lines loss log "
                                "rides next to the checkpoint")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--input", default=None,
                       help="corpus directory of .ppm files; bundled "
                            "synthetic corpus when omitted")
        p.add_argument("--log", default=None,
                       help="loss log path (default <out>.losses.jsonl)")
        if name == "posttrain":
            p.add_argument("--gram-teacher", default=None,
                           help="checkpoint anchoring patch-token geometry")
            p.add_argument("--init", default=None,
                           help="starting checkpoint (default: the gram "
                                "teacher itself)")
        p.set_defaults(func=fn)

    p = sub.add_parser("embed", parents=[common],
                       help="frozen-encoder embeddings for a class tree")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", parents=[common],
                       help="train a head on frozen embeddings, report BACC")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=(LINEAR, ATTNPOOL), required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("bench", parents=[common],
                       help="materialize a synthetic suite as a class tree")
    p.add_argument("--suite", choices=(B.GLOBAL, B.LOCAL, B.SHIFTED),
                   required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=30)
    p.set_defaults(func=cmd_bench, seed=0)

    p = sub.add_parser("ablate", parents=[common],
                       help="three-row augmentation/head grid with report "
                            "and bar chart")
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None,
                   help="bar chart path (default <out>.svg)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference verification of every "
                            "backward pass")
    p.add_argument("--inject-fault", choices=component_names(), default=None,
                   help="test hook: corrupt one analytic gradient entry of "
                        "the named component")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("demo", parents=[common],
                       help="end-to-end run on synthetic data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"verification error: {e}", file=sys.stderr)
        return 1
    except TokenhierError as e:                 # ShapeError etc.
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
