"""Command-line pipeline: synth, patchify, augment, train, eval, segment.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error. Every
flag that has a conventional operating point defaults to it (window 512,
overlap 50, threshold 0.5, Adam learning rate 0.003, mini-batch 8), so the
zero-configuration path runs the standard procedure.
"""

from __future__ import annotations

import argparse
import os
import re
import sys

import numpy as np

from .data import augment_patch, load_patch_corpus, read_manifest, split_dataset
from .errors import ValidationError, ConfigError
from .metrics import emit_report, evaluate_split
from .network import (
    build_network,
    count_params,
    forward,
    load_architecture,
    load_network,
    packaged_config_path,
    save_network,
)
from .raster import RasterScene, crop_scene, read_msr, write_msr
from .synth import SynthConfig, generate_corpus
from .tiling import plan_windows, segment_scene
from .training import parse_train_settings, train, write_history
from .data import DatasetSplit

SPLIT_RATIOS = (0.90, 0.05, 0.05)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="cloudseg", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", formatter_class=fmt,
                       help="generate a synthetic scene/mask corpus")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--scenes", type=int, required=True, help="number of scenes")
    p.add_argument("--size", default="512x512", help="scene size as WxH pixels")
    p.add_argument("--terrain", choices=("flat", "gradient", "speckle"),
                   default="speckle", help="background model")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("patchify", formatter_class=fmt,
                       help="cut scene corpus into square training patches")
    p.add_argument("--data", required=True, help="scene corpus directory (manifest.txt)")
    p.add_argument("--size", type=int, default=512, help="patch size in pixels")
    p.add_argument("--out", required=True, help="output patch directory")

    p = sub.add_parser("augment", formatter_class=fmt,
                       help="materialize the 8 rotation/flip variants of each patch")
    p.add_argument("--data", required=True, help="patch corpus directory")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a network from a key = value config file "
                            "(standard hyperparameters: learning_rate 0.003, "
                            "beta1 0.9, beta2 0.999, batch_size 8)")
    p.add_argument("--config", required=True, help="training config file")
    p.add_argument("--out", default="train_out", help="history/checkpoint directory")

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate checkpoint metrics over a dataset split")
    p.add_argument("--weights", required=True, help="CPW1 weights file")
    p.add_argument("--arch", default=packaged_config_path("full"),
                   help="architecture config file")
    p.add_argument("--data", required=True, help="patch corpus directory")
    p.add_argument("--split", choices=("val", "test"), required=True,
                   help="which split to evaluate")
    p.add_argument("--seed", type=int, default=0, help="split seed (match training)")
    p.add_argument("--threshold", type=float, default=0.5, help="cloud threshold")
    p.add_argument("--method", default="cloudseg", help="method name in the report")
    p.add_argument("--report", required=True, help="CSV report path")

    p = sub.add_parser("segment", formatter_class=fmt,
                       help="segment a whole 4-band scene into a cloud mask")
    p.add_argument("--weights", required=True, help="CPW1 weights file")
    p.add_argument("--arch", default=packaged_config_path("full"),
                   help="architecture config file")
    p.add_argument("--scene", required=True, help="input scene (MSR, 4 bands)")
    p.add_argument("--out", required=True, help="output mask path (MSR)")
    p.add_argument("--window", type=int, default=512, help="sliding window size")
    p.add_argument("--overlap", type=int, default=50, help="window overlap in pixels")
    p.add_argument("--threshold", type=float, default=0.5, help="cloud threshold")
    p.add_argument("--prob", default=None, help="also write the f32 probability canvas here")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    return parser


def _parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m:
        raise ConfigError(f"--size must be WxH (e.g. 512x512), got {text!r}")
    w, h = int(m.group(1)), int(m.group(2))
    if w < 1 or h < 1:
        raise ConfigError(f"--size dims must be >= 1, got {text!r}")
    return w, h


def _cmd_synth(args) -> int:
    w, h = _parse_size(args.size)
    cfg = SynthConfig.for_size(w, h, seed=args.seed, terrain=args.terrain)
    entries = generate_corpus(cfg, args.scenes, args.out, threads=args.threads)
    print(f"wrote {2 * len(entries)} MSR files + manifest to {args.out}")
    return 0


def _cmd_patchify(args) -> int:
    if args.size < 1:
        raise ConfigError(f"--size must be >= 1, got {args.size}")
    entries = read_manifest(args.data)
    if not entries:
        raise ConfigError(f"manifest in {args.data} lists no scenes")
    os.makedirs(args.out, exist_ok=True)
    out_entries = []
    n = 0
    for scene_path, mask_path, _ in entries:
        scene = read_msr(scene_path)
        mask = read_msr(mask_path)
        plan = plan_windows(scene.width, scene.height, window=args.size, overlap=0)
        for x, y in plan.offsets:
            sp = crop_scene(scene, x, y, args.size)
            mp = crop_scene(mask, x, y, args.size)
            s_name = f"patch_{n:05d}.msr"
            m_name = f"patch_{n:05d}_mask.msr"
            write_msr(sp, os.path.join(args.out, s_name))
            write_msr(mp, os.path.join(args.out, m_name))
            fraction = float(np.count_nonzero(mp.data) / mp.data.size)
            out_entries.append((s_name, m_name, fraction))
            n += 1
    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8") as fh:
        for s_name, m_name, fraction in out_entries:
            fh.write(f"{s_name},{m_name},{fraction!r}\n")
    print(f"wrote {n} patches to {args.out}")
    return 0


def _cmd_augment(args) -> int:
    entries = read_manifest(args.data)
    if not entries:
        raise ConfigError(f"manifest in {args.data} lists no patches")
    os.makedirs(args.out, exist_ok=True)
    out_entries = []
    for scene_path, mask_path, _ in entries:
        patch = read_msr(scene_path)
        mask = read_msr(mask_path)
        stem = os.path.splitext(os.path.basename(scene_path))[0]
        for k, (px, mx) in enumerate(augment_patch(patch.data, mask.data)):
            sp = RasterScene(width=patch.width, height=patch.height,
                             bands=patch.bands, data=px, tag=patch.tag)
            mp = RasterScene(width=mask.width, height=mask.height,
                             bands=mask.bands, data=mx, tag=mask.tag)
            s_name = f"{stem}_aug{k}.msr"
            m_name = f"{stem}_aug{k}_mask.msr"
            write_msr(sp, os.path.join(args.out, s_name))
            write_msr(mp, os.path.join(args.out, m_name))
            fraction = float(np.count_nonzero(mx) / mx.size)
            out_entries.append((s_name, m_name, fraction))
    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8") as fh:
        for s_name, m_name, fraction in out_entries:
            fh.write(f"{s_name},{m_name},{fraction!r}\n")
    print(f"wrote {len(out_entries)} augmented patches to {args.out}")
    return 0


def _cmd_train(args) -> int:
    settings = parse_train_settings(args.config)
    config = load_architecture(settings.arch_config_path)
    patches = load_patch_corpus(settings.data_dir)
    split = split_dataset(patches.n_sources, SPLIT_RATIOS, seed=settings.seed)
    net = build_network(config, seed=settings.seed)
    cfg = settings.optimizer()
    print(
        f"training: {count_params(net)} params | adam lr={cfg.learning_rate} "
        f"beta1={cfg.beta1} beta2={cfg.beta2} eps={cfg.epsilon} "
        f"batch={cfg.batch_size} epochs={cfg.epochs} seed={settings.seed}"
    )
    print(
        f"data: {patches.n_sources} sources -> "
        f"{len(split.train)}/{len(split.validation)}/{len(split.test)} "
        f"train/val/test sources (x8 augmented)"
    )
    net, history = train(
        net, patches, split, cfg,
        checkpoint_dir=args.out,
        seed=settings.seed,
        checkpoint_every=settings.checkpoint_every,
        log=print,
    )
    write_history(history, os.path.join(args.out, "history.csv"))
    print(f"final validation accuracy: {history[-1].val_acc:.4f}")
    return 0


def _eval_patches(patches, split: DatasetSplit, name: str):
    for aug_id in split.augmented_ids(name):
        yield patches.augmented(aug_id)


def _cmd_eval(args) -> int:
    config = load_architecture(args.arch)
    net = build_network(config, seed=0)
    load_network(net, args.weights)
    net.set_mode("inference")
    patches = load_patch_corpus(args.data)
    split = split_dataset(patches.n_sources, SPLIT_RATIOS, seed=args.seed)
    row = evaluate_split(
        net, _eval_patches(patches, split, args.split),
        threshold=args.threshold, method=args.method,
    )
    emit_report([row], args.report)
    cells = [f"{v:.2f}" if v is not None else "NA"
             for v in (row.acc, row.prec, row.sn, row.sp)]
    print(f"{row.method} {args.split}: acc={cells[0]} prec={cells[1]} "
          f"sn={cells[2]} sp={cells[3]}")
    return 0


def _cmd_segment(args) -> int:
    config = load_architecture(args.arch)
    net = build_network(config, seed=0)
    load_network(net, args.weights)
    net.set_mode("inference")
    scene = read_msr(args.scene)
    plan = plan_windows(scene.width, scene.height, args.window, args.overlap)
    print(
        f"segmenting {scene.width}x{scene.height} scene: "
        f"{len(plan.offsets)} windows ({len(plan.x_offsets)} x {len(plan.y_offsets)})"
    )
    result = segment_scene(
        scene, net, window=args.window, overlap=args.overlap,
        threshold=args.threshold, threads=args.threads,
        return_canvas=args.prob is not None,
    )
    if args.prob is not None:
        mask, canvas = result
        write_msr(
            RasterScene(width=scene.width, height=scene.height, bands=1,
                        data=canvas.probs[None], tag="cloud-probability"),
            args.prob,
        )
    else:
        mask = result
    write_msr(mask, args.out)
    cloudy = float(np.count_nonzero(mask.data) / mask.data.size)
    print(f"wrote mask to {args.out} ({100 * cloudy:.2f}% cloud)")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "patchify": _cmd_patchify,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "segment": _cmd_segment,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
