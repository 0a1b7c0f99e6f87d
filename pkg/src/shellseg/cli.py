"""Command-line entry point.

Subcommands cover the batch workflows end to end: synth (dataset
generation), stats (class statistics + chart), train, finetune, eval
(cross-domain precise testing), prelabel (prediction export for
annotation), and render (spherical panoramas). Every command writes a
resolved-config echo into its output directory; rerunning from that echo
reproduces the outputs byte for byte.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
divergence during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as _io
from .cloud import class_statistics
from .config import ConfigError, RunConfig
from .evaluation import cross_domain_eval, metrics, ConfusionMatrix, precise_test
from .io import FormatError
from .labels import get_label_space
from .network import CheckpointError, build_model, load_checkpoint, save_checkpoint
from .render import class_palette, class_stats_chart, render_panorama, save_png
from .synth import generate_dataset
from .training import (BASELINE_MAX_LR, TrainingDiverged, finetune, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _overrides(args) -> dict:
    over = {}
    if getattr(args, "seed", None) is not None:
        over[("run", "seed")] = str(args.seed)
    if getattr(args, "tta", None) is not None:
        over[("tta", "enabled")] = "true" if args.tta == "on" else "false"
    if getattr(args, "manifest", None):
        over[("data", "manifest")] = args.manifest
    if getattr(args, "checkpoint", None):
        over[("data", "checkpoint")] = args.checkpoint
    if getattr(args, "split", None):
        over[("eval", "split")] = args.split
    if getattr(args, "labels", None):
        over[("render", "mode")] = "class" if args.labels == "class" else "rgb"
    return over


def _setup(args, command: str):
    cfg = RunConfig.load(args.config, _overrides(args))
    out = Path(args.out or f"runs/{command}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out / "config_echo.ini")
    return cfg, out


def _space_of(cfg, manifest=None, fallback="shell11"):
    name = cfg.get("data", "label_space") \
        or (manifest.label_space if manifest is not None else "") or fallback
    return get_label_space(name)


def _write_report(report, out: Path, stem: str):
    (out / f"{stem}.tsv").write_text(report.to_table())
    kv = report.to_dict()
    lines = [f"{k}\t{v!r}" if isinstance(v, float) else f"{k}\t{v}"
             for k, v in sorted(kv.items())]
    (out / f"{stem}.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(args) -> int:
    cfg, out = _setup(args, "synth")
    space = get_label_space(cfg.get("synth", "label_space"))
    manifest = generate_dataset(
        cfg.scene_spec(), cfg.get("synth", "n_scenes"), out,
        split=tuple(cfg.get("synth", "split")), seed=cfg.seed,
        label_space=space, format=cfg.get("synth", "format"))
    counts = {s: len(manifest.subset(s).entries) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} scenes to {out} "
          f"(train/val/test = {counts['train']}/{counts['val']}/{counts['test']})")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg, out = _setup(args, "stats")
    manifest = _io.load_manifest(cfg.get("data", "manifest"))
    space = _space_of(cfg, manifest)
    stats = class_statistics(manifest, len(space.classes),
                             class_names=space.classes)
    (out / "stats.tsv").write_text(stats.to_table())
    class_stats_chart(stats, out / "stats.png")
    share = stats.share_of(("wall", "floor", "ceiling"))
    (out / "summary.txt").write_text(
        f"scenes\t{stats.n_scenes}\nwall_floor_ceiling_share\t{share!r}\n")
    print(f"wall+floor+ceiling share: {share!r} over {stats.n_scenes} scenes")
    return EXIT_OK


def _train_common(args, command: str):
    cfg, out = _setup(args, command)
    manifest = _io.load_manifest(cfg.get("data", "manifest"))
    space = _space_of(cfg, manifest)
    tcfg = cfg.train_config()
    return cfg, out, manifest, space, tcfg


def _finish_training(out, model, history):
    (out / "model.ckpt").write_bytes(save_checkpoint(model))
    (out / "history.tsv").write_text(history.to_table())
    last = f"mIoU={history.miou[-1]!r}" if len(history) else "no epochs"
    print(f"finished after {len(history)} epochs ({history.stop_reason}); {last}")
    return EXIT_OK


def _dump_divergence(out, e: TrainingDiverged):
    if e.model is not None:
        (out / "diverged_model.ckpt").write_bytes(save_checkpoint(e.model))
    if e.history is not None:
        (out / "history.tsv").write_text(e.history.to_table())


def cmd_train(args) -> int:
    cfg, out, manifest, space, tcfg = _train_common(args, "train")
    model = build_model(cfg.model_config(len(space.classes)))
    try:
        model, history = train(model, manifest.subset("train"),
                               manifest.subset("val"), space, tcfg)
    except TrainingDiverged as e:
        _dump_divergence(out, e)
        raise
    return _finish_training(out, model, history)


def cmd_finetune(args) -> int:
    cfg, out, manifest, space, tcfg = _train_common(args, "finetune")
    ckpt_path = cfg.get("data", "checkpoint")
    if not ckpt_path:
        raise ConfigError("[data] checkpoint is required for finetune")
    blob = Path(ckpt_path).read_bytes()
    if tcfg.max_lr >= BASELINE_MAX_LR:
        print(f"warning: fine-tune max_lr {tcfg.max_lr} matches the baseline peak; "
              f"a reduced peak (e.g. 0.001) usually transfers better",
              file=sys.stderr)
    try:
        model, history = finetune(blob, space, manifest.subset("train"),
                                  manifest.subset("val"), tcfg)
    except TrainingDiverged as e:
        _dump_divergence(out, e)
        raise
    return _finish_training(out, model, history)


def cmd_eval(args) -> int:
    cfg, out = _setup(args, "eval")
    manifest = _io.load_manifest(cfg.get("data", "manifest"))
    ckpt_path = cfg.get("data", "checkpoint")
    if not ckpt_path:
        raise ConfigError("[data] checkpoint is required for eval")
    model = load_checkpoint(Path(ckpt_path).read_bytes())
    model_space = get_label_space(model.label_space)
    target_space = get_label_space(manifest.label_space)
    subset = manifest.subset(cfg.get("eval", "split"))
    report = cross_domain_eval(model, model_space, subset, target_space,
                               voxel_size=cfg.get("eval", "voxel_size"),
                               tta=cfg.tta_config(), seed=cfg.seed)
    _write_report(report, out, "metrics")
    print(f"mIoU={report.miou!r} mAcc={report.macc!r} allAcc={report.allacc!r} "
          f"({'precise' if report.precise else 'fast'})")
    return EXIT_OK


def cmd_prelabel(args) -> int:
    cfg, out = _setup(args, "prelabel")
    ckpt_path = cfg.get("data", "checkpoint")
    if not ckpt_path:
        raise ConfigError("[data] checkpoint is required for prelabel")
    model = load_checkpoint(Path(ckpt_path).read_bytes())
    scene_paths = list(args.scenes) or ([cfg.get("data", "scene")]
                                        if cfg.get("data", "scene") else [])
    if not scene_paths:
        raise ConfigError("no scenes given; pass paths or set [data] scene")
    fmt = cfg.get("prelabel", "format")
    ext = ".pcc" if fmt == "columnar" else ".ply"
    summary = ["scene\tpoints\ttop_class\tmean_margin\tmin_margin"]
    for path in scene_paths:
        pc = _io.load_pointcloud(path)
        truth = pc.labels
        pred, _, votes = precise_test(model, pc.with_labels(None),
                                      cfg.get("eval", "voxel_size"),
                                      tta=cfg.tta_config(), seed=cfg.seed,
                                      budget=cfg.get("eval", "budget"),
                                      return_votes=True)
        margin = votes.votes[np.arange(len(pred)), pred] / votes.coverage
        hist = np.bincount(pred, minlength=model.config.num_classes)
        top = int(np.argmax(hist))
        summary.append(f"{pc.scene_id}\t{len(pc)}\t{top}"
                       f"\t{float(margin.mean())!r}\t{float(margin.min())!r}")
        labeled = pc.with_labels(pred)
        _io.save_pointcloud(labeled, out / (Path(path).stem + "_labeled" + ext),
                            format=fmt)
        if truth is not None:
            conf = ConfusionMatrix.empty(model.config.num_classes)
            conf.add(pred, truth)
            _write_report(metrics(conf, precise=True), out,
                          f"{Path(path).stem}_metrics")
    (out / "summary.tsv").write_text("\n".join(summary) + "\n")
    print(f"prelabeled {len(scene_paths)} scene(s) into {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg, out = _setup(args, "render")
    scene = args.scene or cfg.get("data", "scene")
    if not scene:
        raise ConfigError("no scene given; pass a path or set [data] scene")
    pc = _io.load_pointcloud(scene)
    mode = cfg.get("render", "mode")
    palette = None
    if mode == "class":
        palette = class_palette(_space_of(cfg))
    image = render_panorama(pc, width=cfg.get("render", "width"),
                            height=cfg.get("render", "height"), mode=mode,
                            max_range=cfg.get("render", "max_range"),
                            palette=palette)
    save_png(image, out / "panorama.png")
    print(f"rendered {out / 'panorama.png'}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shellseg",
        description="Point cloud semantic segmentation for shell construction scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="class statistics table and chart")
    common(p)
    p.add_argument("--manifest", help="dataset manifest path")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a segmentation model")
    common(p)
    p.add_argument("--manifest", help="dataset manifest path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="transfer a checkpoint to a new label space")
    common(p)
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--checkpoint", help="pretrained checkpoint path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="precise cross-domain evaluation")
    common(p)
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--tta", choices=("on", "off"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prelabel", help="write predicted labels for annotation")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--tta", choices=("on", "off"))
    p.add_argument("scenes", nargs="*", help="scene files to prelabel")
    p.set_defaults(func=cmd_prelabel)

    p = sub.add_parser("render", help="spherical panorama of a scene")
    common(p)
    p.add_argument("--labels", choices=("rgb", "class"))
    p.add_argument("scene", nargs="?", help="scene file")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
