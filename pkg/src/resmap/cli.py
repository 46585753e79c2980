"""Command-line pipeline: synth, annotate, train, infer, map, carbon, eval.

Each subcommand reads and writes one stage directory under the run
workspace (``--out``), and the manifest written by one stage is the
input contract of the next.  Exit codes: 0 success, 1 usage error,
2 data or configuration error, 3 numerical failure during training or
inference.  No artifact embeds a timestamp, so a fixed ``--seed`` with
``--deterministic`` reproduces every output byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import secrets
import sys

import numpy as np

from . import rng
from .carbon import area_per_level, sequestration_potential
from .config import ConfigError, RunConfig, load_config
from .fgrid import FgridError, Raster, read_fgrid, write_fgrid, write_gray_pgm, write_level_ppm
from .field import N_LEVELS, annotate_dataset, load_manifest, make_dataset
from .metrics import ResidueDistributionMap, aggregate, build_metrics_report, flag_risk
from .model import (
    CheckpointError,
    NumericalError,
    ProbUNet,
    load_checkpoint,
    predict_samples,
    train,
)

__all__ = ["main"]

_STAGES = ("synth", "annotate", "train", "infer", "map", "carbon", "eval")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="global seed override")
    common.add_argument("--out", metavar="DIR", help="run workspace directory")
    common.add_argument("--samples", type=int, metavar="M",
                        help="segmentation samples per tile")
    common.add_argument("--deterministic", action="store_true",
                        help="bit-reproducible artifacts for a fixed seed")
    parser = _Parser(prog="resmap",
                     description="Residue mapping pipeline: synthetic scenes, "
                                 "probabilistic segmentation, carbon estimates.")
    sub = parser.add_subparsers(dest="stage", metavar="{%s}" % ",".join(_STAGES))
    helps = {
        "synth": "synthesize a scene dataset (inputs, truth, aux rasters)",
        "annotate": "add simulated annotator label maps to a dataset",
        "train": "train the probabilistic segmentation model",
        "infer": "sample segmentations from a trained checkpoint",
        "map": "aggregate samples into distribution, entropy, and risk rasters",
        "carbon": "estimate annual carbon sequestration from the mapped levels",
        "eval": "score samples against the synthetic truth",
    }
    for name in _STAGES:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _resolve(args) -> tuple:
    """Merge CLI flags over the config file into effective settings."""
    cfg = load_config(args.config) if args.config else RunConfig()
    out = args.out or cfg.out
    if not out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    if args.seed is not None:
        seed = args.seed
    elif args.deterministic or args.config:
        seed = cfg.seed
    else:
        seed = secrets.randbits(32)
    samples = args.samples if args.samples is not None else cfg.samples
    if samples < 1:
        raise ConfigError(f"samples must be >= 1, got {samples}")
    return cfg, out, seed, samples


def _dataset_dir(out: str) -> str:
    return os.path.join(out, "dataset")


def _load_tiles(dataset_dir: str, manifest: dict, need_labels: bool) -> list:
    tiles = []
    for tile in manifest["tiles"]:
        x = read_fgrid(os.path.join(dataset_dir, tile["input"])).data
        entry = {"id": tile["id"], "x": x}
        entry["truth"] = read_fgrid(
            os.path.join(dataset_dir, tile["truth"])
        ).data[0].astype(np.uint8)
        labels = [
            read_fgrid(os.path.join(dataset_dir, f)).data[0].astype(np.uint8)
            for f in tile.get("labels", [])
        ]
        if need_labels and not labels:
            raise ValueError(
                f"tile {tile['id']} has no annotator labels; run `resmap annotate` first"
            )
        entry["labels"] = labels
        tiles.append(entry)
    return tiles


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_synth(cfg: RunConfig, out: str, seed: int, samples: int) -> int:
    ds = _dataset_dir(out)
    manifest = make_dataset(ds, cfg.tiles, cfg.scene, [], seed)
    print(f"synth: {len(manifest['tiles'])} tiles "
          f"({cfg.scene.size}x{cfg.scene.size}) -> {ds}")
    return 0


def _cmd_annotate(cfg: RunConfig, out: str, seed: int, samples: int) -> int:
    ds = _dataset_dir(out)
    manifest = annotate_dataset(ds, list(cfg.annotators))
    n_labels = sum(len(t["labels"]) for t in manifest["tiles"])
    print(f"annotate: {len(cfg.annotators)} profiles, {n_labels} label maps -> {ds}")
    return 0


def _cmd_train(cfg: RunConfig, out: str, seed: int, samples: int) -> int:
    ds = _dataset_dir(out)
    manifest = load_manifest(ds)
    tiles = _load_tiles(ds, manifest, need_labels=True)
    model = ProbUNet.build(cfg.model, seed=rng.derive_seed(seed, rng.INIT))
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    model_dir = os.path.join(out, "model")
    os.makedirs(model_dir, exist_ok=True)
    ckpt = os.path.join(model_dir, "checkpoint.fcpt")
    report = train(model, tiles, train_cfg, checkpoint_path=ckpt)
    report.write_csv(os.path.join(model_dir, "loss.csv"))
    print(f"train: {len(report.steps)} steps, final loss {report.final_total:.4f} "
          f"-> {ckpt}")
    return 0


def _cmd_infer(cfg: RunConfig, out: str, seed: int, samples: int) -> int:
    ds = _dataset_dir(out)
    manifest = load_manifest(ds)
    model, _meta = load_checkpoint(os.path.join(out, "model", "checkpoint.fcpt"))
    tiles = _load_tiles(ds, manifest, need_labels=False)
    res = manifest["resolution"]
    sample_dir = os.path.join(out, "samples")
    os.makedirs(sample_dir, exist_ok=True)
    index = []
    for tile in tiles:
        maps = predict_samples(
            model, tile["x"], samples,
            seed=rng.derive_seed(seed, rng.PREDICT, tile["id"]),
        )
        files = []
        for j, m in enumerate(maps):
            fname = f"tile{tile['id']:04d}_s{j:02d}.fgrid"
            write_fgrid(os.path.join(sample_dir, fname), Raster(m, res))
            files.append(fname)
        index.append({"id": tile["id"], "files": files})
    _write_json(os.path.join(sample_dir, "manifest.json"), {
        "format": "resmap-samples",
        "version": 1,
        "samples": samples,
        "resolution": res,
        "tiles": index,
    })
    print(f"infer: {samples} samples x {len(tiles)} tiles -> {sample_dir}")
    return 0


def _load_samples(out: str) -> tuple:
    sample_dir = os.path.join(out, "samples")
    path = os.path.join(sample_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no sample manifest at {path}; run `resmap infer` first")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "resmap-samples" or manifest.get("version") != 1:
        raise ValueError(f"{path}: not a resmap sample manifest")
    per_tile = []
    for tile in manifest["tiles"]:
        maps = [
            read_fgrid(os.path.join(sample_dir, f)).data[0].astype(np.uint8)
            for f in tile["files"]
        ]
        per_tile.append((tile["id"], maps))
    return manifest, per_tile


def _cmd_map(cfg: RunConfig, out: str, seed: int, samples: int) -> int:
    manifest, per_tile = _load_samples(out)
    res = manifest["resolution"]
    map_dir = os.path.join(out, "map")
    os.makedirs(map_dir, exist_ok=True)
    index = []
    for tile_id, maps in per_tile:
        dist = aggregate(maps)
        risk = flag_risk(dist, cfg.risk_tau)
        stem = f"tile{tile_id:04d}"
        names = {
            "dist": f"{stem}_dist.fgrid",
            "entropy": f"{stem}_entropy.fgrid",
            "risk": f"{stem}_risk.pgm",
            "levels": f"{stem}_levels.ppm",
        }
        write_fgrid(os.path.join(map_dir, names["dist"]),
                    Raster(dist.probabilities, res))
        write_fgrid(os.path.join(map_dir, names["entropy"]),
                    Raster(dist.entropy, res))
        write_gray_pgm(os.path.join(map_dir, names["risk"]), risk)
        write_level_ppm(os.path.join(map_dir, names["levels"]),
                        dist.probabilities.argmax(axis=0))
        index.append({"id": tile_id, **names})
    _write_json(os.path.join(map_dir, "manifest.json"), {
        "format": "resmap-map",
        "version": 1,
        "risk_tau": cfg.risk_tau,
        "resolution": res,
        "tiles": index,
    })
    print(f"map: {len(index)} tiles -> {map_dir}")
    return 0


def _cmd_carbon(cfg: RunConfig, out: str, seed: int, samples: int) -> int:
    map_dir = os.path.join(out, "map")
    path = os.path.join(map_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no map manifest at {path}; run `resmap map` first")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    total_areas = np.zeros(N_LEVELS, dtype=np.float64)
    for tile in manifest["tiles"]:
        raster = read_fgrid(os.path.join(map_dir, tile["dist"]))
        probs = raster.data
        ent = np.zeros(probs.shape[1:], dtype=np.float32)
        dist = ResidueDistributionMap(probs, ent, sample_count=1)
        total_areas += area_per_level(dist, raster.resolution)
    est = sequestration_potential(total_areas, cfg.carbon)
    carbon_dir = os.path.join(out, "carbon")
    os.makedirs(carbon_dir, exist_ok=True)
    with open(os.path.join(carbon_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(est.to_json())
    with open(os.path.join(carbon_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(est.to_csv(cfg.carbon.rates))
    print(f"carbon: {est.total_mg_yr:.4f} Mg/yr over "
          f"{sum(est.area_ha):.4f} ha -> {carbon_dir}")
    return 0


def _cmd_eval(cfg: RunConfig, out: str, seed: int, samples: int) -> int:
    ds = _dataset_dir(out)
    manifest = load_manifest(ds)
    tiles = _load_tiles(ds, manifest, need_labels=False)
    _smanifest, per_tile = _load_samples(out)
    truths = {t["id"]: t for t in tiles}
    rows = []
    for tile_id, maps in per_tile:
        if tile_id not in truths:
            raise ValueError(f"sample tile {tile_id} not present in dataset")
        tile = truths[tile_id]
        report = build_metrics_report(maps, tile["truth"], reference=tile["labels"])
        rows.append({
            "id": tile_id,
            "pixel_accuracy": report.pixel_accuracy,
            "class_iou": list(report.class_iou),
            "mean_iou": report.mean_iou,
            "ged": report.ged,
            "sample_count": report.sample_count,
        })
    mean = {
        "pixel_accuracy": float(np.mean([r["pixel_accuracy"] for r in rows])),
        "class_iou": [float(v) for v in
                      np.mean([r["class_iou"] for r in rows], axis=0)],
        "mean_iou": float(np.mean([r["mean_iou"] for r in rows])),
        "ged": float(np.mean([r["ged"] for r in rows])),
    }
    eval_dir = os.path.join(out, "eval")
    os.makedirs(eval_dir, exist_ok=True)
    _write_json(os.path.join(eval_dir, "metrics.json"),
                {"format": "resmap-eval", "version": 1, "tiles": rows, "mean": mean})
    print(f"eval: {len(rows)} tiles, mean accuracy {mean['pixel_accuracy']:.4f}, "
          f"mean GED {mean['ged']:.4f} -> {eval_dir}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "annotate": _cmd_annotate,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "map": _cmd_map,
    "carbon": _cmd_carbon,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.stage is None:
        parser.print_usage(sys.stderr)
        print("resmap: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        cfg, out, seed, samples = _resolve(args)
        return _COMMANDS[args.stage](cfg, out, seed, samples)
    except NumericalError as exc:
        print(f"resmap {args.stage}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FgridError, CheckpointError, FileNotFoundError,
            ValueError, OSError) as exc:
        print(f"resmap {args.stage}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
