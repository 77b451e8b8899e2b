"""Command-line front end.

Subcommands: synth (dataset generation), train (structure learning),
match (rank a probe against the gallery), eval (repeated-split CMC
experiment), inspect (heatmap export of a structure).  Every subcommand
is deterministic given its flags and seed.  Exit codes: 0 ok, 2 usage,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .config import (
    PipelineConfig,
    dump_config,
    load_config,
    save_config,
)
from .errors import DataError, NumericError, PatchCorrError
from .evaluation import (
    IdentityRecord,
    ProtocolConfig,
    extract_features,
    fit_split,
    run_experiment,
)
from .features import apply_pca
from .grid import build_grid
from .manifest import load_identity_records, parse_manifest
from .matching import ImagePatches, rank_gallery
from .metric import load_bank, save_bank
from .multistructure import save_registry
from .structure import export_heatmap_csv, load_structure, save_structure
from .synth import PoseSpec, TransformSpec, generate_dataset


def _parse_pose(text: str) -> PoseSpec:
    parts = text.split(":")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(
            "pose must be label:prob:dy:dx, e.g. front:0.5:8:0"
        )
    return PoseSpec(label=parts[0], prob=float(parts[1]),
                    dy=int(parts[2]), dx=int(parts[3]))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchcorr",
        description="patch correspondence learning and cross-camera matching",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-camera dataset")
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--ids", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dy", type=int, default=0, help="vertical shift, gallery strides")
    p.add_argument("--dx", type=int, default=0, help="horizontal shift, gallery strides")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--gain-lo", type=float, default=1.0)
    p.add_argument("--gain-hi", type=float, default=1.0)
    p.add_argument("--pose", action="append", type=_parse_pose, default=[],
                   help="label:prob:dy:dx, repeatable; overrides --dy/--dx")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--config", type=Path, default=None)

    p = sub.add_parser("train", help="learn a correspondence structure")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", required=True, type=Path,
                   help="output structure file; sibling artifacts share the stem")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace-csv", type=Path, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--multi", choices=("off", "manual", "auto"), default=None)

    p = sub.add_parser("match", help="rank gallery images for probes")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path,
                   help="structure file produced by train")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--probe", default=None, help="probe image_id; default all probes")
    p.add_argument("--config", type=Path, default=None)

    p = sub.add_parser("eval", help="repeated-split CMC experiment")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--splits", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--methods", default=None,
                   help="comma-separated subset of methods")
    p.add_argument("--multi", choices=("off", "manual", "auto"), default=None)
    p.add_argument("--max-iters", type=int, default=None)

    p = sub.add_parser("inspect", help="export a structure heatmap")
    p.add_argument("--structure", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="CSV output path")
    p.add_argument("--downsample", type=int, default=1)
    p.add_argument("--figure", type=Path, default=None,
                   help="PNG heatmap path; default next to the CSV")

    p = sub.add_parser("dump-config", help="print the effective configuration")
    p.add_argument("--config", type=Path, default=None)
    return parser


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    learn_cfg = cfg.learn
    if getattr(args, "max_iters", None) is not None:
        learn_cfg = replace(learn_cfg, max_iters=args.max_iters)
    protocol = cfg.protocol
    if getattr(args, "splits", None) is not None:
        protocol = replace(protocol, splits=args.splits)
    if getattr(args, "fraction", None) is not None:
        protocol = replace(protocol, fraction=args.fraction)
    if getattr(args, "threads", None) is not None:
        protocol = replace(protocol, threads=args.threads)
    if getattr(args, "methods", None):
        protocol = replace(protocol, methods=tuple(args.methods.split(",")))
    if getattr(args, "multi", None) is not None:
        protocol = replace(protocol, multi_mode=args.multi)
    return replace(cfg, learn=learn_cfg, protocol=protocol)


def cmd_synth(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    spec = TransformSpec(
        dy=args.dy, dx=args.dx, pose_mix=tuple(args.pose),
        illum_gain=(args.gain_lo, args.gain_hi), noise_sigma=args.noise_sigma,
    )
    probe = build_grid(cfg.probe_grid)
    gallery = build_grid(cfg.gallery_grid)
    ds = generate_dataset(args.seed, args.ids, spec, probe, gallery,
                          out_dir=args.out_dir, image_format=args.format)
    print(f"wrote {len(ds.rows)} images under {args.out_dir}")
    return 0


def _records_to_train_set(records, cfg, feats):
    probe_grid = build_grid(cfg.probe_grid)
    gallery_grid = build_grid(cfg.gallery_grid)
    out = []
    for r in records:
        out.append((
            ImagePatches(r.probe_id, "A", r.person_id, probe_grid, feats[r.probe_id]),
            ImagePatches(r.gallery_id, "B", r.person_id, gallery_grid,
                         feats[r.gallery_id]),
        ))
    return out


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    manifest = parse_manifest(args.manifest)
    records = load_identity_records(manifest, cfg)
    probe_grid = build_grid(cfg.probe_grid)
    gallery_grid = build_grid(cfg.gallery_grid)

    all_idx = np.arange(len(records))
    fitted, feats = fit_split(
        records, extract_features(records, probe_grid, gallery_grid, cfg.features),
        all_idx, probe_grid, gallery_grid, cfg.learn, cfg.protocol,
        cfg.features, cfg.metric_mode, cfg.ridge, args.seed,
    )
    structure, trace = fitted.structure_single, fitted.trace
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_structure(structure, out)
    save_bank(fitted.bank, out.with_suffix(".bank"))
    save_config(cfg, out.with_suffix(".config.toml"))
    if fitted.pca is not None:
        np.savez(out.with_suffix(".pca.npz"), mean=fitted.pca.mean,
                 basis=fitted.pca.basis,
                 explained=fitted.pca.explained_fraction)
    if fitted.registry is not None:
        save_registry(fitted.registry, out.parent / (out.stem + "_registry"))

    if args.trace_csv is not None:
        args.trace_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(args.trace_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "objective", "accepted"])
            for rec in trace.records:
                writer.writerow([rec.iteration, f"{rec.objective:.17g}",
                                 int(rec.accepted)])
        plotting.save_trace_figure(
            [r.iteration for r in trace.records],
            [r.objective for r in trace.records],
            args.trace_csv.with_suffix(".png"),
        )
    print(f"trained structure -> {out}")
    return 0


def cmd_match(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    config_path = args.model.with_suffix(".config.toml")
    if args.config is None and config_path.exists():
        cfg = load_config(config_path)
    manifest = parse_manifest(args.manifest)
    records = load_identity_records(manifest, cfg)
    structure = load_structure(args.model)
    bank = load_bank(args.model.with_suffix(".bank"))
    probe_grid = build_grid(cfg.probe_grid)
    gallery_grid = build_grid(cfg.gallery_grid)

    raw = extract_features(records, probe_grid, gallery_grid, cfg.features)
    pca_path = args.model.with_suffix(".pca.npz")
    if pca_path.exists():
        from .features import PcaModel

        data = np.load(pca_path)
        pca = PcaModel(mean=data["mean"], basis=data["basis"],
                       explained_fraction=float(data["explained"]))
        feats = {k: apply_pca(pca, v) for k, v in raw.items()}
    else:
        feats = raw
    pairs = _records_to_train_set(records, cfg, feats)
    gallery = [v for _, v in pairs]
    probes = [u for u, _ in pairs]
    if args.probe is not None:
        probes = [u for u in probes if u.image_id == args.probe]
        if not probes:
            raise DataError(f"probe {args.probe!r} not found in manifest")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["probe_id", "gallery_id", "score", "rank"])
        for u in probes:
            result = rank_gallery(u, gallery, structure, bank, cfg.learn.t_c,
                                  threads=cfg.protocol.threads)
            for pos, (gid, score) in enumerate(result.ordered, start=1):
                writer.writerow([u.image_id, gid, f"{score:.17g}", pos])
    print(f"wrote rankings -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    from .evaluation import ALL_METHODS

    unknown = [m for m in cfg.protocol.methods if m not in ALL_METHODS]
    if unknown:
        print(f"ERROR usage: unknown methods {unknown}", file=sys.stderr)
        return 2
    manifest = parse_manifest(args.manifest)
    records = load_identity_records(manifest, cfg)
    seeds = [args.seed + i for i in range(cfg.protocol.splits)]
    report = run_experiment(
        records, cfg.probe_grid, cfg.gallery_grid, cfg.features, cfg.learn,
        cfg.protocol, metric_mode=cfg.metric_mode, ridge=cfg.ridge,
        seeds=seeds, config_fingerprint=cfg.fingerprint(),
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    methods = list(cfg.protocol.methods)
    with open(out / "cmc.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["rank"]
        for m in methods:
            header.append(f"{m}_mean")
            header.extend(f"{m}_split{i}" for i in range(len(report.splits)))
        writer.writerow(header)
        max_rank = report.mean_curves[methods[0]].max_rank
        for r in range(1, max_rank + 1):
            row = [r]
            for m in methods:
                row.append(f"{report.mean_curves[m].rate(r):.17g}")
                row.extend(
                    f"{s.curves[m].rate(r):.17g}" for s in report.splits
                )
            writer.writerow(row)
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "train_seconds", "match_ms_per_pair"])
        for i, s in enumerate(report.splits):
            writer.writerow([i, f"{s.train_seconds:.3f}",
                             f"{s.match_ms_per_pair:.3f}"])
    plotting.save_cmc_figure(report.mean_curves, out / "cmc.png")
    print(f"wrote evaluation report -> {out}")
    return 0


def cmd_inspect(args) -> int:
    structure = load_structure(args.structure)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    matrix = export_heatmap_csv(structure, args.out, downsample=args.downsample)
    figure = args.figure or args.out.with_suffix(".png")
    plotting.save_heatmap_figure(
        matrix, figure, title=structure.tag or "correspondence structure"
    )
    print(f"wrote heatmap -> {args.out} and {figure}")
    return 0


def cmd_dump_config(args) -> int:
    sys.stdout.write(dump_config(load_config(args.config)))
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "match": cmd_match,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "dump-config": cmd_dump_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 4
    except PatchCorrError as exc:  # pragma: no cover - catch-all guard
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
