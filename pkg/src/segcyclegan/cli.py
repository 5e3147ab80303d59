"""Command-line entry point: ``segcyclegan <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, TrainConfig, config_to_dict, load_config, preset_path, save_config
from .dataset import DatasetError, SplitSpec, build_manifest, list_images, load_image, load_mask, \
    parse_angles, preprocess_directory, save_image, DatasetManifest
from .models import CheckpointError

log = logging.getLogger("segcyclegan")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _hash_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    elif path.exists():
        h.update(path.read_bytes())
    return h.hexdigest()


def write_run_manifest(out_dir: Path, command: str, config: dict, seed: int | None, inputs: list,
                       outputs: list, started: float, name: str = "run.json") -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "torch_version": torch.__version__,
        "inputs": {str(p): _hash_path(Path(p)) for p in inputs if p},
        "outputs": [str(p) for p in outputs],
        "timings": {"started": started, "seconds": round(time.time() - started, 3)},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


@contextlib.contextmanager
def quarantine_on_failure(path: Path):
    """Move an output directory created by a failing command aside as ``<name>.failed``."""
    existed = path.exists()
    try:
        yield
    except BaseException:
        if not existed and path.exists():
            target = path.with_name(path.name + ".failed")
            if target.exists():
                shutil.rmtree(target)
            path.rename(target)
            log.error("partial outputs moved to %s", target)
        raise


def _resolve_config(args) -> TrainConfig:
    source = args.config or (preset_path(args.preset) if args.preset else None)
    if source is None:
        raise ConfigError("give --config FILE or --preset NAME")
    return load_config(source, args.set)


def _data_paths(config: TrainConfig) -> tuple[DatasetManifest, Path]:
    if not config.data.manifest:
        raise ConfigError("data.manifest is not set")
    mpath = Path(config.data.manifest)
    if not mpath.exists():
        raise ConfigError(f"manifest {mpath} not found")
    root = Path(config.data.root) if config.data.root else mpath.parent
    return DatasetManifest.read(mpath), root


# --- commands ---------------------------------------------------------------

def cmd_preprocess(args) -> int:
    started = time.time()
    out = Path(args.output)
    with quarantine_on_failure(out):
        record = preprocess_directory(args.input, out, args.window, args.step, args.min_target_pixels,
                                      parse_angles(args.rotate), args.seed)
        write_run_manifest(out, "preprocess", record, args.seed, [args.input], [out], started)
    c = record["counts"]
    print(f"{c['source_images']} images -> {c['tiles']} tiles, {c['dropped']} dropped, {c['written']} written")
    return EXIT_OK


def cmd_annotate(args) -> int:
    from .annotation import SamOracle, annotate_directory, mock_oracle

    started = time.time()
    if args.oracle == "sam":
        if not args.sam_checkpoint:
            raise ConfigError("--oracle sam needs --sam-checkpoint")
        oracle = SamOracle(args.sam_checkpoint, args.sam_model)
    else:
        oracle = mock_oracle({"mock-box": "box-fill", "mock-ellipse": "ellipse-in-box"}[args.oracle])
    out = Path(args.output)
    with quarantine_on_failure(out):
        sidecar = annotate_directory(args.images, out, oracle, args.boxes, args.coco, args.class_name,
                                     args.threshold)
        write_run_manifest(out, "annotate", {k: v for k, v in sidecar.items() if k != "images"}, None,
                           [args.images, args.boxes or args.coco], [out], started)
    print(f"wrote {len(sidecar['images'])} masks to {out}")
    return EXIT_OK


def cmd_manifest(args) -> int:
    started = time.time()
    spec = SplitSpec(test_fraction=args.test_fraction, unpaired=not args.paired,
                     require_masks=tuple(d for d in args.require_masks.split(",") if d))
    manifest = build_manifest(args.root, spec, args.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.write(out)
    write_run_manifest(out.parent, "manifest", {"test_fraction": args.test_fraction, "paired": args.paired},
                       args.seed, [args.root], [out], started, name=out.stem + ".run.json")
    print(f"{len(manifest.entries)} entries -> {out}")
    return EXIT_OK


def cmd_pretrain_seg(args) -> int:
    from .training import load_domain, pretrain_segmenter

    started = time.time()
    config = _resolve_config(args)
    torch.manual_seed(config.seed)
    manifest, root = _data_paths(config)
    optical = load_domain(manifest, root, "OPT", "train", config.generator.out_channels)
    run_dir = Path(config.run_dir)
    with quarantine_on_failure(run_dir):
        _, history = pretrain_segmenter(config, optical, run_dir)
        save_config(config, run_dir / "config.toml")
        write_run_manifest(run_dir, "pretrain-seg", config_to_dict(config), config.seed,
                           [config.data.manifest], [run_dir / "segmenter.pt"], started,
                           name="pretrain_seg.run.json")
    best = max((r.get("val_miou", 0.0) for r in history), default=0.0)
    print(f"segmenter trained for {len(history)} epochs, best val mIoU {best:.4f} -> {run_dir / 'segmenter.pt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .models import freeze, load_graph
    from .training import load_domain, train

    started = time.time()
    config = _resolve_config(args)
    torch.manual_seed(config.seed)
    manifest, root = _data_paths(config)
    sar = load_domain(manifest, root, "SAR", "train", config.generator.in_channels)
    opt = load_domain(manifest, root, "OPT", "train", config.generator.out_channels)
    panel = None
    if manifest.select("SAR", "test"):
        panel = load_domain(manifest, root, "SAR", "test", config.generator.in_channels)
    run_dir = Path(config.run_dir)
    segmenter = None
    if config.weights.beta > 0:
        seg_path = Path(config.data.segmenter) if config.data.segmenter else run_dir / "segmenter"
        if not seg_path.with_suffix(".pt").exists():
            raise ConfigError(f"beta > 0 but no pretrained segmenter at {seg_path}.pt (run pretrain-seg first)")
        segmenter = freeze(load_graph(seg_path, expect_kind="segmenter"))
    with quarantine_on_failure(run_dir):
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, run_dir / "config.toml")
        model = train(config, sar, opt, segmenter, run_dir, resume=args.resume, panel_data=panel)
        write_run_manifest(run_dir, "train", config_to_dict(config), config.seed,
                           [config.data.manifest, args.resume],
                           [run_dir / "train_log.jsonl", run_dir / "checkpoints"], started)
    print(f"trained {model.epoch} epochs / {model.step} steps -> {run_dir / 'checkpoints'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    from .training import load_translator, translate

    started = time.time()
    generator = load_translator(args.checkpoint)
    src = Path(args.input)
    if (src / "images").is_dir():
        src = src / "images"
    paths = list_images(src)
    if not paths:
        raise ConfigError(f"no images under {args.input}")
    out = Path(args.output)
    with quarantine_on_failure(out):
        out.mkdir(parents=True, exist_ok=True)
        provenance = {}
        for path in paths:
            (result,) = translate(generator, [load_image(path, generator.spec.in_channels)])
            save_image(result, out / f"{path.stem}.png")
            provenance[path.stem] = {"source": str(path), "checkpoint": str(args.checkpoint)}
        (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
        write_run_manifest(out, "translate", {"checkpoint": str(args.checkpoint)}, None,
                           [args.checkpoint, args.input], [out], started)
    print(f"translated {len(paths)} images -> {out}")
    return EXIT_OK


def _load_dir(folder: Path):
    paths = list_images(folder)
    return paths, [load_image(p) for p in paths]


def cmd_eval(args) -> int:
    from .evaluation import (EXTRACTOR_ENV, MetricReport, downstream_protocol, fid_between,
                             load_extractor, paired_scores)
    from .training import samples_to_tensor

    started = time.time()
    pred = Path(args.pred)
    ids = {"pred": str(pred), "ref": args.ref, "masks": args.masks, "checkpoint": args.checkpoint}
    if args.mode in ("paired", "unpaired"):
        if not args.ref:
            raise ConfigError(f"--ref is required in {args.mode} mode")
        p_paths, preds = _load_dir(pred)
        r_paths, refs = _load_dir(Path(args.ref))
        report = MetricReport(args.mode, identifiers=ids)
        if args.mode == "paired":
            by_name = {p.name: im for p, im in zip(r_paths, refs)}
            missing = [p.name for p in p_paths if p.name not in by_name]
            if missing:
                raise ConfigError(f"no reference for: {', '.join(missing[:5])}")
            scores = paired_scores(preds, [by_name[p.name] for p in p_paths], [p.stem for p in p_paths],
                                   per_channel_ssim=args.per_channel_ssim)
        else:
            from .evaluation import MethodScores
            scores = MethodScores({})
        if not args.no_fid:
            extractor = load_extractor(args.extractor)
            scores.metrics["fid"] = fid_between(preds, refs, extractor)
            report.identifiers["extractor"] = extractor.name
        report.methods["pred"] = scores
    else:
        if not args.masks:
            raise ConfigError("--masks is required in downstream mode")
        config = _resolve_config(args) if (args.config or args.preset) else TrainConfig()
        masks_root = Path(args.masks)

        def split(name):
            paths, images = _load_dir(pred / name)
            if not paths:
                raise ConfigError(f"no translated images under {pred / name}")
            labels = [load_mask(masks_root / name / f"{p.stem}.png").labels for p in paths]
            return samples_to_tensor(images), torch.from_numpy(np.stack(labels)).long()

        report = downstream_protocol({"pred": None}, split("train"), split("test"), config.seg_pretrain,
                                     config.segmenter, seed=config.seed, include_raw_sar=False,
                                     identifiers=ids)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    write_run_manifest(out.parent, "eval", {"mode": args.mode}, None,
                       [args.pred, args.ref, args.masks], [out], started, name=out.stem + ".run.json")
    for name, scores in report.methods.items():
        print(name, json.dumps(scores.metrics, sort_keys=True))
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .synthetic import write_toy

    root = write_toy(args.output, args.n_sar, args.n_opt, args.size, args.seed)
    print(f"toy corpus written to {root}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _config_args(p):
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--preset", help="shipped preset name instead of --config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segcyclegan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="tile, filter and rotate a directory of images/masks")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--window", type=int, default=256)
    p.add_argument("--step", type=int, default=205)
    p.add_argument("--min-target-pixels", type=int, default=95, help="0 disables the filter")
    p.add_argument("--rotate", default="none", help='angles as "start:stop:step" or a comma list')
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("annotate", help="turn bounding boxes into masks with a promptable segmenter")
    p.add_argument("--images", required=True)
    p.add_argument("--boxes", help="directory of <stem>.txt box files")
    p.add_argument("--coco", help="COCO-style JSON annotation file")
    p.add_argument("--output", required=True)
    p.add_argument("--oracle", choices=["mock-box", "mock-ellipse", "sam"], default="mock-box")
    p.add_argument("--sam-checkpoint")
    p.add_argument("--sam-model", default="vit_h")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--class-name", default="ship")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("manifest", help="build a train/test manifest over ROOT/{SAR,OPT}")
    p.add_argument("--root", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--paired", action="store_true", help="keep cross-domain order (Pix2Pix-style data)")
    p.add_argument("--require-masks", default="", help="comma list of domains that must have masks")
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("pretrain-seg", help="pretrain the guidance segmenter on annotated optical data")
    _config_args(p)
    p.set_defaults(func=cmd_pretrain_seg)

    p = sub.add_parser("train", help="train the translator")
    _config_args(p)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate SAR images with a trained generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="similarity metrics or the downstream segmentation protocol")
    p.add_argument("--mode", choices=["paired", "unpaired", "downstream"], required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--ref")
    p.add_argument("--masks")
    p.add_argument("--report", required=True)
    p.add_argument("--checkpoint", help="recorded in the report identifiers only")
    p.add_argument("--extractor", help="FID feature model path, or 'stub'")
    p.add_argument("--no-fid", action="store_true")
    p.add_argument("--per-channel-ssim", action="store_true")
    _config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-toy", help="write a synthetic two-domain corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--n-sar", type=int, default=100)
    p.add_argument("--n-opt", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    from .evaluation import ExtractorMissingError
    from .training import TrainingConfigError

    try:
        return args.func(args)
    except (ConfigError, TrainingConfigError, ExtractorMissingError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
