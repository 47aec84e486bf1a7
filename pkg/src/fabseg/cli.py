"""Command line entry point for the whole pipeline: data, training, prediction, scoring, ablation and self-checks."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from .checkpoint import read_checkpoint, write_checkpoint
from .config import AblationFlags, FabsegConfig, load_config
from .exceptions import FabsegError, UsageError
from .metrics import MetricsAccumulator
from .pipeline import Predictor
from .prompts import step_seed
from .sam import HEADS
from .trainer import finetune_sam_block, prompter_from_checkpoint, sam_from_checkpoint, train_prompter

log = logging.getLogger("fabseg")

COMMANDS = ("synth", "prepare", "train-prompter", "finetune", "predict", "evaluate", "ablate", "verify")
MASK_SUFFIXES = ("_region", "_boundary", "_fused", "_parcels")

# ablation settings as (FTD, FTPE, MP, PP); the first row is the full model
ABLATION_ROWS = (
    (True, True, True, True),
    (False, True, True, True),
    (True, False, True, True),
    (True, True, False, True),
    (True, True, True, False),
)


@dataclass
class Command:
    name: str
    options: dict = field(default_factory=dict)
    config_path: str | None = None
    config: FabsegConfig = field(default_factory=FabsegConfig)

    @property
    def flags(self) -> AblationFlags:
        return self.config.ablation


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _split_ratios(text):
    try:
        ratios = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}") from None
    if len(ratios) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated ratios")
    return ratios


def build_parser():
    parser = _Parser(prog="fabseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write synthetic scenes with region/boundary masks")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--parcels", type=int, default=None, help="parcels per scene (default (size // 48)^2)")
    p.add_argument("--out")

    p = sub.add_parser("prepare", help="render, tile and split raw scenes listed in a manifest")
    p.add_argument("--manifest")
    p.add_argument("--lo", type=int, default=0)
    p.add_argument("--hi", type=int, default=3000)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--split", type=_split_ratios, default=(0.7, 0.15, 0.15))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("train-prompter", help="phase 1: train the Prompter")
    p.add_argument("--config")
    p.add_argument("--manifest", help="overrides [data] manifest")
    p.add_argument("--out")
    p.add_argument("--log")

    p = sub.add_parser("finetune", help="phase 2: fine-tune one SAM-block decoder head")
    p.add_argument("--config")
    p.add_argument("--manifest", help="overrides [data] manifest")
    p.add_argument("--head", choices=HEADS)
    p.add_argument("--prompter-ckpt")
    p.add_argument("--out")
    p.add_argument("--log")
    for flag, what in (("ftd", "fine-tuning the decoder"), ("ftpe", "fine-tuning the prompt encoder"),
                       ("mp", "the mask prompt"), ("pp", "point prompts")):
        p.add_argument(f"--no-{flag}", action="store_true", help=f"disable {what}")

    p = sub.add_parser("predict", help="region, boundary, fused and parcel maps for every image")
    p.add_argument("--config")
    p.add_argument("--prompter-ckpt")
    p.add_argument("--sam-ckpt-region")
    p.add_argument("--sam-ckpt-boundary")
    p.add_argument("--images", help="directory of images or a manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="IoU / F1 / accuracy per class and mIOU")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--report")

    p = sub.add_parser("ablate", help="run the five ablation settings and tabulate the metrics")
    p.add_argument("--config")
    p.add_argument("--manifest", help="overrides [data] manifest")
    p.add_argument("--eval-manifest", help="tiles to score on (default: the training manifest)")
    p.add_argument("--prompter-ckpt", help="reuse this Prompter instead of training one")
    p.add_argument("--out-table")

    sub.add_parser("verify", help="run the numerical oracle suite")
    return parser


def parse_args(argv) -> Command:
    ns = build_parser().parse_args(list(argv))
    options = vars(ns)
    name = options.pop("command")
    config_path = options.pop("config", None)
    if config_path is not None:
        if not Path(config_path).is_file():
            raise UsageError(f"config file not found: {config_path}")
        cfg = load_config(config_path)
    else:
        cfg = FabsegConfig()
    if options.get("manifest") and name != "prepare":
        cfg.data.manifest = options["manifest"]
    if name == "finetune":
        cfg.ablation = AblationFlags(**{
            k: getattr(cfg.ablation, k) and not options.pop(f"no_{k}") for k in ("ftd", "ftpe", "mp", "pp")
        })
    return Command(name=name, options=options, config_path=config_path, config=cfg)


# -- command implementations ------------------------------------------------------

def _opt(cmd, key):
    value = cmd.options.get(key)
    if value is None:
        raise UsageError(f"{cmd.name} needs --{key.replace('_', '-')}")
    return value


def _need(path, what):
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _dataset(cfg, manifest=None):
    manifest = manifest or cfg.data.manifest
    if not manifest:
        raise UsageError("no training manifest: set [data] manifest or pass --manifest")
    return D.load_dataset(_need(manifest, "manifest"), cfg.data.tile)


def cmd_synth(cmd):
    o = cmd.options
    out = Path(_opt(cmd, "out"))
    out.mkdir(parents=True, exist_ok=True)
    parcels = o["parcels"] or max(1, (o["size"] // 48) ** 2)
    rows = []
    for k in range(o["n"]):
        image, region, boundary = D.generate_synthetic_scene(step_seed(o["seed"], k), parcels, o["size"])
        stem = out / f"scene_{k:03d}"
        paths = (f"{stem}.png", f"{stem}_region.png", f"{stem}_boundary.png")
        D.write_image(paths[0], image)
        D.write_mask(paths[1], region)
        D.write_mask(paths[2], boundary)
        rows.append(paths)
    D.write_manifest(out / "manifest.tsv", rows)
    log.info("wrote %d scenes to %s", o["n"], out)
    return 0


def _to_rgb(pixels):
    if pixels.shape[2] >= 3:
        return pixels[:, :, :3]
    return np.repeat(pixels[:, :, :1], 3, axis=2)


def cmd_prepare(cmd):
    o = cmd.options
    out = Path(_opt(cmd, "out"))
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    rows = D.read_manifest(_need(_opt(cmd, "manifest"), "manifest"))
    stems = [Path(r[0]).stem for r in rows]
    if len(set(stems)) != len(stems):
        raise UsageError("manifest lists two images with the same file stem")
    split = D.split_dataset(stems, o["split"], o["seed"])
    tiles_of = {}
    for (image_path, region_path, boundary_path), stem in zip(rows, stems):
        image = _to_rgb(D.render_bands(D.read_raw(image_path), o["lo"], o["hi"]))
        grids = [D.crop_tiles(image, o["tile"]), D.crop_tiles(D.read_mask(region_path), o["tile"])]
        if boundary_path:
            grids.append(D.crop_tiles(D.read_mask(boundary_path), o["tile"]))
        tiles_of[stem] = []
        for k in range(len(grids[0].tiles)):
            base = out / "tiles" / f"{stem}_r{k // grids[0].cols}_c{k % grids[0].cols}"
            paths = [f"{base}.png", f"{base}_region.png"] + ([f"{base}_boundary.png"] if boundary_path else [])
            D.write_image(paths[0], grids[0].tiles[k])
            for path, grid in zip(paths[1:], grids[1:]):
                D.write_mask(path, grid.tiles[k])
            tiles_of[stem].append(paths)
    for part in ("train", "val", "test"):
        D.write_manifest(out / f"{part}.tsv", [p for stem in getattr(split, part) for p in tiles_of[stem]])
    log.info("split %d scenes into %d/%d/%d", len(stems), len(split.train), len(split.val), len(split.test))
    return 0


def cmd_train_prompter(cmd):
    cfg = cmd.config
    out = _opt(cmd, "out")
    ckpt = train_prompter(dataclasses.replace(cfg.train_prompter, phase="prompter"), _dataset(cfg),
                          cfg.prompter, cfg.prompter_loss, log_path=cmd.options.get("log"))
    write_checkpoint(out, ckpt)
    return 0


def cmd_finetune(cmd):
    cfg, o = cmd.config, cmd.options
    head, out = _opt(cmd, "head"), _opt(cmd, "out")
    prompter_ckpt = read_checkpoint(_need(_opt(cmd, "prompter_ckpt"), "Prompter checkpoint"))
    ckpt = finetune_sam_block(dataclasses.replace(cfg.train_finetune, phase="finetune"), _dataset(cfg),
                              prompter_ckpt, head, cfg.ablation, cfg.sam, cfg.prompts, cfg.finetune_loss,
                              log_path=o.get("log"))
    write_checkpoint(out, ckpt)
    return 0


def _image_paths(spec):
    spec = Path(_need(spec, "images"))
    if spec.is_file():
        return [Path(row[0]) for row in D.read_manifest(spec)]
    return sorted(p for p in spec.glob("*.png") if not p.stem.endswith(MASK_SUFFIXES))


def cmd_predict(cmd):
    cfg, o = cmd.config, cmd.options
    ckpts = [read_checkpoint(_need(_opt(cmd, k), k.replace("_", "-"))) for k in
             ("prompter_ckpt", "sam_ckpt_region", "sam_ckpt_boundary")]
    predictor = Predictor(prompter_from_checkpoint(ckpts[0]), sam_from_checkpoint(ckpts[1]),
                          sam_from_checkpoint(ckpts[2]), ckpts[1].config, ckpts[2].config,
                          threshold=cfg.data.threshold, min_area=cfg.data.min_area, seed=o["seed"])
    out = Path(_opt(cmd, "out"))
    out.mkdir(parents=True, exist_ok=True)
    paths = _image_paths(_opt(cmd, "images"))
    if not paths:
        raise UsageError(f"no images found in {o['images']}")
    for path in paths:
        pred = predictor.predict_scene(D.read_image(path))
        stem = out / path.stem
        D.write_mask(f"{stem}_region.png", pred.region)
        D.write_mask(f"{stem}_boundary.png", pred.boundary)
        D.write_mask(f"{stem}_fused.png", pred.fused)
        Image.fromarray(pred.parcels.labels.astype(np.uint16)).save(f"{stem}_parcels.png")
        Path(f"{stem}_parcels.csv").write_text(pred.parcels.summary_text())
    log.info("predicted %d images into %s", len(paths), out)
    return 0


def evaluate_dirs(pred_dir, gt_dir):
    acc = MetricsAccumulator()
    matched = 0
    for head in HEADS:
        for gt_path in sorted(Path(gt_dir).glob(f"*_{head}.png")):
            pred_path = Path(pred_dir) / gt_path.name
            if not pred_path.exists():
                raise UsageError(f"no prediction for {gt_path.name} in {pred_dir}")
            acc.update(head, D.read_mask(pred_path), D.read_mask(gt_path))
            matched += 1
    if matched == 0:
        raise UsageError(f"no *_region.png / *_boundary.png masks in {gt_dir}")
    return acc.report()


def cmd_evaluate(cmd):
    o = cmd.options
    report = evaluate_dirs(_need(_opt(cmd, "pred"), "prediction directory"),
                           _need(_opt(cmd, "gt"), "ground-truth directory"))
    text = report.to_text()
    if o.get("report"):
        Path(o["report"]).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def ablation_table(cfg, dataset, prompter_ckpt, eval_dataset=None):
    """Fine-tune both heads under each ablation row and score them on ``eval_dataset``."""
    eval_dataset = eval_dataset or dataset
    train_cfg = dataclasses.replace(cfg.train_finetune, phase="finetune")
    prompter = prompter_from_checkpoint(prompter_ckpt)
    lines = ["FTD,FTPE,MP,PP,region_iou,region_f1,boundary_iou,boundary_f1"]
    for row in ABLATION_ROWS:
        flags = AblationFlags(*row)
        sams, confs = {}, {}
        for head in HEADS:
            ck = finetune_sam_block(train_cfg, dataset, prompter_ckpt, head, flags, cfg.sam, cfg.prompts,
                                    cfg.finetune_loss)
            sams[head], confs[head] = sam_from_checkpoint(ck), ck.config
        predictor = Predictor(prompter, sams["region"], sams["boundary"], confs["region"], confs["boundary"],
                              threshold=cfg.data.threshold)
        logits = predictor.tile_logits(eval_dataset.images)
        acc = MetricsAccumulator()
        for head in HEADS:
            acc.update(head, (logits[head] > 0).astype(np.uint8), eval_dataset.labels(head))
        m = acc.report().per_class
        marks = ",".join("on" if f else "off" for f in row)
        lines.append(f"{marks},{m['region']['iou'] * 100:.2f},{m['region']['f1'] * 100:.2f},"
                     f"{m['boundary']['iou'] * 100:.2f},{m['boundary']['f1'] * 100:.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(cmd):
    cfg, o = cmd.config, cmd.options
    out_table = _opt(cmd, "out_table")
    dataset = _dataset(cfg)
    eval_dataset = _dataset(cfg, o["eval_manifest"]) if o.get("eval_manifest") else None
    if o.get("prompter_ckpt"):
        prompter_ckpt = read_checkpoint(_need(o["prompter_ckpt"], "Prompter checkpoint"))
    else:
        prompter_ckpt = train_prompter(dataclasses.replace(cfg.train_prompter, phase="prompter"), dataset,
                                       cfg.prompter, cfg.prompter_loss)
    table = ablation_table(cfg, dataset, prompter_ckpt, eval_dataset)
    Path(out_table).write_text(table)
    return 0


def cmd_verify(cmd):
    from .verification import run_oracle_suite

    results = run_oracle_suite()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


HANDLERS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train-prompter": cmd_train_prompter, "finetune": cmd_finetune,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "verify": cmd_verify,
}


def run(cmd: Command) -> int:
    return HANDLERS[cmd.name](cmd)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(parse_args(argv))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"UsageError: {exc}", file=sys.stderr)
        return 2
    except FabsegError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
