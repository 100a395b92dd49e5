"""Command-line pipeline: synth -> prior -> train -> densify -> eval.

Exit codes: 0 success, 1 usage error, 2 malformed data or I/O failure,
3 numeric divergence.  All commands accept ``--config`` (JSON, layered
over ``--preset``), ``--set key=value`` overrides, ``--seed``, and
``--threads`` (pins BLAS pools for determinism).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import fileio
from .diffusion import build_cosine_schedule
from .geometry import DegeneratePoint, NegativeRange, PointCloud, decompose
from .metrics import EmptyCloud, EmptyGroundTruth, EvalReport, evaluate
from .network import CheckpointMismatch, Denoiser, NonFiniteActivation
from .pipeline import densify
from .prior import EmptyInput, Stage0Config, build_prior
from .simulator import (InvalidSpec, NoFreeSpace, RayBundle,
                        ResolutionMismatch, SWEEP_PERIOD, generate_scene,
                        make_sweep_pair, random_scene_spec, SweepPair)
from .training import DivergenceDetected, train

log = logging.getLogger("rangediff")

_DATA_ERRORS = (fileio.IoFailure, fileio.BadMagic, fileio.TruncatedFile,
                fileio.UnsupportedVersion, CheckpointMismatch, InvalidSpec,
                ResolutionMismatch, EmptyCloud, EmptyGroundTruth, EmptyInput,
                NoFreeSpace, DegeneratePoint, NegativeRange,
                FileNotFoundError, json.JSONDecodeError)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_Usage(message)


class SystemExit_Usage(Exception):
    pass


def _build_parser() -> _Parser:
    p = _Parser(prog="rangediff",
                description="Scanline-consistent range diffusion pipeline")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None,
                        help="JSON config (bare names resolve via "
                             f"${cfgmod.ENV_CONFIG_DIR})")
        sp.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None)

    sp = sub.add_parser("synth", help="generate synthetic sweep pairs")
    common(sp)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--scenes", type=int, default=8)

    sp = sub.add_parser("prior", help="run the structural prior on a sweep")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--multiplier", type=float, default=None)

    sp = sub.add_parser("train", help="fit the denoiser on synthetic pairs")
    common(sp)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--trace", default=None,
                    help="loss/metric trace CSV (default <checkpoint>.trace.csv)")
    sp.add_argument("--no-holdout", action="store_true",
                    help="train on every scene instead of holding the last "
                         "one out for validation")

    sp = sub.add_parser("densify", help="densify a sparse sweep")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--multiplier", type=float, default=None)
    sp.add_argument("--ply", default=None, help="also export a colored PLY")
    sp.add_argument("--gt", default=None, help="dense GT sweep for an "
                                               "inline evaluation")
    sp.add_argument("--rays", default=None, help="GT ray sidecar for FSVR")
    sp.add_argument("--report", default=None, help="CSV report path")

    sp = sub.add_parser("eval", help="score a generated sweep against GT")
    common(sp)
    sp.add_argument("--generated", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--rays", required=True)
    sp.add_argument("--report", default=None)
    sp.add_argument("--ply", default=None,
                    help="export the generated cloud colored by violation")
    return p


def _load_cfg(args) -> cfgmod.RunConfig:
    path = cfgmod.resolve_config_path(args.config)
    return cfgmod.load_config(path, preset=args.preset,
                              overrides=args.overrides)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dense_sensor = cfg.dense_sensor()
    for i in range(args.scenes):
        scene_seed = int(np.random.SeedSequence((args.seed, i))
                         .generate_state(1)[0])
        spec = random_scene_spec(scene_seed,
                                 max_extent=cfg.stage0.grid_extent)
        geom = generate_scene(spec)
        pair = make_sweep_pair(geom, cfg.sensor, dense_sensor)
        stem = out / f"scene_{i:03d}"
        fileio.save_scene_spec(f"{stem}.scene.json", spec)
        fileio.write_sweep(f"{stem}.sparse.rdns", pair.sparse)
        fileio.write_sweep(f"{stem}.dense.rdns", pair.dense_gt)
        fileio.write_rays(f"{stem}.gtrays.bin", pair.gt_rays.directions,
                          pair.gt_rays.ranges)
        fileio.write_rays(f"{stem}.sprays.bin", pair.sparse_rays.directions,
                          pair.sparse_rays.ranges)
        print(f"{stem}: sparse {len(pair.sparse)} pts, dense "
              f"{len(pair.dense_gt)} pts, ratio {pair.ratio:.2f}")
    return 0


def cmd_prior(args) -> int:
    cfg = _load_cfg(args)
    cloud = fileio.read_sweep(args.input)
    import dataclasses
    s0 = dataclasses.replace(cfg.stage0, target_multiplier=args.multiplier)
    prior_cloud, _ = build_prior(cloud, s0, args.seed)
    fileio.write_sweep(args.output, prior_cloud)
    print(f"{args.output}: {len(prior_cloud)} candidates from "
          f"{len(cloud)} input points")
    return 0


def _bundle_from_files(rays_path, max_range: float) -> RayBundle:
    """Rebuild a ray bundle from a sidecar (ring ids are not stored)."""
    import math
    dirs, ranges = fileio.read_rays(rays_path)
    az = np.arctan2(dirs[:, 1], dirs[:, 0])
    t = (az + math.pi) / (2.0 * math.pi) * SWEEP_PERIOD
    return RayBundle(directions=dirs, ranges=ranges,
                     ring=np.zeros(len(ranges), dtype=np.int32),
                     azimuth=az, time=t, max_range=max_range)


def _load_pairs(data_dir: Path, max_range: float) -> list[SweepPair]:
    pairs = []
    for sparse_path in sorted(data_dir.glob("*.sparse.rdns")):
        stem = sparse_path.name[:-len(".sparse.rdns")]
        sparse = fileio.read_sweep(sparse_path)
        dense = fileio.read_sweep(data_dir / f"{stem}.dense.rdns")
        gt_rays = _bundle_from_files(data_dir / f"{stem}.gtrays.bin", max_range)
        sp_rays = _bundle_from_files(data_dir / f"{stem}.sprays.bin", max_range)
        pairs.append(SweepPair(sparse=sparse, dense_gt=dense, gt_rays=gt_rays,
                               sparse_rays=sp_rays,
                               ratio=len(dense) / max(len(sparse), 1)))
    if not pairs:
        raise fileio.BadMagic(f"no *.sparse.rdns sweeps under {data_dir}")
    return pairs


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    chash = cfgmod.config_hash(cfg)
    pairs = _load_pairs(Path(args.data_dir), cfg.sensor.max_range)
    val_pair = None
    if len(pairs) >= 2 and not args.no_holdout:
        val_pair = pairs[-1]
        pairs = pairs[:-1]
    schedule = build_cosine_schedule(cfg.timesteps)
    result = train(pairs, network=cfg.network, stage0=cfg.stage0,
                   weights=cfg.weights, curriculum=cfg.curriculum,
                   train_cfg=cfg.train, schedule=schedule, sdedit=cfg.sdedit,
                   seed=args.seed, val_pair=val_pair)
    result.model.save(args.checkpoint, chash)
    trace_path = args.trace or f"{args.checkpoint}.trace.csv"
    _write_trace(trace_path, result.trace)
    print(f"{args.checkpoint}: {result.model.n_parameters()} parameters, "
          f"{len(result.trace)} epochs, config {chash}")
    return 0


def _write_trace(path, trace: list[dict]) -> None:
    if not trace:
        return
    cols = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(v) if isinstance(v, float) else v
                        for k, v in row.items()})


def cmd_densify(args) -> int:
    cfg = _load_cfg(args)
    chash = cfgmod.config_hash(cfg)
    sparse = fileio.read_sweep(args.input)
    model = Denoiser.load(args.checkpoint, cfg.network, chash)
    schedule = build_cosine_schedule(cfg.timesteps)
    mult = args.multiplier if args.multiplier is not None \
        else cfg.effective_multiplier()
    result = densify(sparse, model, stage0=cfg.stage0, schedule=schedule,
                     sdedit=cfg.sdedit,
                     vertical_fov=cfg.sensor.vertical_fov, seed=args.seed,
                     occupancy_threshold=cfg.occupancy_threshold,
                     target_multiplier=mult)
    fileio.write_sweep(args.output, result.cloud)
    for stage, secs in result.timings.items():
        print(f"  {stage}: {1000.0 * secs:.1f} ms")
    kept = len(result.cloud)
    print(f"{args.output}: kept {kept}/{result.n_candidates} candidates "
          f"({len(sparse)} input points)")
    if args.ply:
        fileio.export_cloud_ply(args.ply, result.cloud.xyz, color_by="b_hat",
                                values=result.b_hat)
    if args.gt:
        report = _evaluate_files(args.gt, args.rays, result.cloud, cfg, chash,
                                 args.seed)
        _emit_report(report, args.report)
    return 0


def _evaluate_files(gt_path, rays_path, gen_cloud: PointCloud,
                    cfg: cfgmod.RunConfig, chash: str, seed: int) -> EvalReport:
    gt = fileio.read_sweep(gt_path)
    if rays_path:
        dirs, ranges = fileio.read_rays(rays_path)
    else:
        dec = decompose(gt.xyz)
        dirs, ranges = dec.direction, dec.range
    return evaluate(gen_cloud, gt, dirs, ranges, cfg.fsvr,
                    emd_max_pts=cfg.emd_max_pts, seed=seed,
                    config_hash=chash)


def _emit_report(report: EvalReport, path) -> None:
    print(f"  CD   {report.cd:.4f} m")
    print(f"  EMD  {report.emd:.4f}")
    print(f"  FSVR {report.fsvr:.2f} % ({len(report.violations)} violations)")
    print(f"  REAP {report.reap:.2f} % "
          f"({report.n_generated} vs {report.n_gt} points)")
    if path:
        Path(path).write_text(report.to_csv())


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    chash = cfgmod.config_hash(cfg)
    gen = fileio.read_sweep(args.generated)
    report = _evaluate_files(args.gt, args.rays, gen, cfg, chash, args.seed)
    _emit_report(report, args.report)
    if args.ply:
        fileio.export_cloud_ply(
            args.ply, gen.xyz, color_by="violation",
            violation_indices=[v[0] for v in report.violations])
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit_Usage as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")

    handlers = {"synth": cmd_synth, "prior": cmd_prior, "train": cmd_train,
                "densify": cmd_densify, "eval": cmd_eval}
    try:
        if args.threads is not None:
            import threadpoolctl
            with threadpoolctl.threadpool_limits(limits=args.threads):
                return handlers[args.command](args)
        return handlers[args.command](args)
    except (DivergenceDetected, NonFiniteActivation) as e:
        if isinstance(e, DivergenceDetected) and e.model is not None \
                and getattr(args, "checkpoint", None):
            try:
                e.model.save(args.checkpoint + ".diverged",
                             cfgmod.config_hash(_load_cfg(args)))
            except Exception:  # the abort path must never mask the cause
                pass
        print(f"numeric divergence: {e}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
