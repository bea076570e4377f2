#!/usr/bin/env python3
"""
Image Rectangling Tool - CLI Interface
Warps stitched images with irregular boundaries into rectangles by mesh optimization,
synthesizes evaluation triplets and scores results.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from lib.config import ConfigError, ConfigFile, EnergyConfig, parse_resolution
from lib.features import get_extractor
from lib.gradcheck import TOLERANCE, run_gradcheck
from lib.mesh import apply_motion, build_rigid_mesh, mesh_to_json, motion_to_json
from lib.metrics import evaluate_directories, psnr, ssim
from lib.optimizer import NumericalError, rectangle_image
from lib.raster import RasterIOError, load_image, load_mask, save_image
from lib.report import ABLATION_RESOLUTIONS, ABLATION_VARIANTS, generate_pdf_report, run_ablation, write_report_json
from lib.synth import DEFAULT_MAGNITUDE, SPLIT_COUNTS, DatasetError, build_dataset
from lib.warp import WarpError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """Raised for invalid command-line input that argparse cannot catch."""
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that exits with the usage status instead of 2."""

    def error(self, message):
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def load_config(args) -> EnergyConfig:
    """Config file values (if any), then command-line overrides."""
    if getattr(args, 'config', None):
        cfg = ConfigFile(args.config).energy_config()
        print(f"✓ Configuration loaded from {args.config}")
    else:
        cfg = EnergyConfig()

    if getattr(args, 'mesh', None):
        cfg = cfg.with_mesh(*parse_resolution(args.mesh))
    overrides = {}
    for flag, name in (('alpha', 'alpha'), ('wa', 'omega_a'), ('wp', 'omega_p')):
        if getattr(args, flag, None) is not None:
            overrides[name] = getattr(args, flag)
    optimizer = {}
    if getattr(args, 'iters', None) is not None:
        optimizer['iterations'] = args.iters
    if getattr(args, 'step', None) is not None:
        optimizer['step'] = args.step
    if optimizer:
        overrides['optimizer'] = replace(cfg.optimizer, **optimizer)
    return replace(cfg, **overrides) if overrides else cfg


def write_json(data: Dict, path: str):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))
    except OSError as e:
        raise RasterIOError(f"Cannot write {path}: {e}")


def cmd_rectangle(args) -> int:
    cfg = load_config(args)
    image = load_image(args.input)
    mask = load_mask(args.mask)
    label = load_image(args.label) if args.label else None
    print(f"✓ Loaded {args.input} ({image.width}x{image.height}), mask void {mask.void_fraction():.1%}")
    print(f"  Mesh: {cfg.mesh_u}x{cfg.mesh_v}  Objective: "
          f"{'label-free' if args.label_free or label is None else 'full'}")

    output, result = rectangle_image(
        image, mask, cfg,
        label=None if args.label_free else label,
        phi=get_extractor(args.features),
        downsample=args.downsample,
    )
    save_image(output, args.out)
    print(f"✓ Rectangled image written to {args.out} "
          f"({result.iterations_used} iterations, converged={result.converged})")

    rigid = build_rigid_mesh(image.width, image.height, cfg.mesh_u, cfg.mesh_v)
    if args.mesh_out:
        Path(args.mesh_out).write_text(mesh_to_json(apply_motion(rigid, result.motion_f)))
    if args.motion_out:
        Path(args.motion_out).write_text(motion_to_json(result.motion_f))

    report = result.to_dict()
    if label is not None:
        report['metrics'] = {'psnr': psnr(output, label), 'ssim': ssim(output, label)}
        print(f"  PSNR {report['metrics']['psnr']:.2f} dB  SSIM {report['metrics']['ssim']:.4f}")
    if args.report:
        write_json(report, args.report)
        print(f"✓ Report written to {args.report}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args)
    magnitude = args.magnitude
    if magnitude is None and args.config:
        magnitude = ConfigFile(args.config).synth_magnitude
    if magnitude is None:
        magnitude = DEFAULT_MAGNITUDE

    count = args.count
    if count is None:
        if args.split is None:
            raise UsageError("--count is required unless --split is given")
        count = SPLIT_COUNTS[args.split]

    manifest = build_dataset(args.src, args.out, count, cfg, args.seed, magnitude, split=args.split)
    print(f"✓ Wrote {manifest['count']} triplets to {Path(args.out) / (args.split or '')} (seed {args.seed})")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_directories(args.pred, args.gt, args.baseline)
    if report.count == 0:
        raise FileNotFoundError(f"No predictions in {args.pred} match ground truth in {args.gt}")
    print(f"✓ Scored {report.count} images"
          f"{f' ({len(report.missing)} missing)' if report.missing else ''}")
    print(f"  Mean PSNR {report.mean_psnr:.2f} dB  Mean SSIM {report.mean_ssim:.4f}")
    write_json(report.to_dict(), args.report)
    print(f"✓ Report written to {args.report}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed, args.trials)
    print(f"max relative error: {report.max_rel_error:.3e} over {report.trials} trials "
          f"({report.checked} coordinates, {report.excluded} kink-adjacent excluded, "
          f"{report.hinge_trials} trials with an active intra-grid hinge)")
    if args.report:
        write_json(report.to_dict(), args.report)
    if not report.passed:
        print(f"Error: gradient check failed ({report.max_rel_error:.3e} > {TOLERANCE:g})", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = load_config(args)
    resolutions = [parse_resolution(r) for r in args.resolutions.split(',')]
    variants = [v for v in args.variants.split(',') if v]
    report = run_ablation(args.data, cfg, resolutions, label_free=args.label_free, limit=args.limit,
                          variants=variants)
    write_report_json(report, args.report)
    runs = list(report['resolutions']) + list(report['variants'])
    print(f"✓ Ablation over {', '.join(runs)} written to {args.report}")
    if args.pdf:
        generate_pdf_report(report, args.pdf)
        print(f"✓ PDF report written to {args.pdf}")
    return EXIT_OK


def add_energy_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='YAML configuration file')
    parser.add_argument('--mesh', help='Mesh resolution UxV (default 8x6)')
    parser.add_argument('--alpha', type=float, help='Intra-grid threshold fraction (default 0.125)')
    parser.add_argument('--wa', type=float, help='Appearance weight (default 1.0)')
    parser.add_argument('--wp', type=float, help='Perception weight (default 5e-6)')
    parser.add_argument('--iters', type=int, help='Iterations per stage (default 300)')
    parser.add_argument('--step', type=float, help='Step size in pixels (default 0.5)')


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='rectangling', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--verbose', action='store_true', help='Log progress to stderr')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('rectangle', help='Rectangle one stitched image')
    p.add_argument('--input', required=True)
    p.add_argument('--mask', required=True)
    p.add_argument('--label')
    p.add_argument('--out', required=True)
    p.add_argument('--mesh-out')
    p.add_argument('--motion-out')
    p.add_argument('--report')
    p.add_argument('--label-free', action='store_true', help='Boundary and mesh terms only')
    p.add_argument('--downsample', action='store_true', help='Solve the mesh at <= 1 megapixel')
    p.add_argument('--features', default='pyramid', choices=['pyramid', 'identity'])
    add_energy_flags(p)
    p.set_defaults(handler=cmd_rectangle)

    p = sub.add_parser('synth', help='Synthesize (input, mask, label) triplets')
    p.add_argument('--src', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--count', type=int)
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--magnitude', type=float, help=f'Deformation magnitude in pixels (default {DEFAULT_MAGNITUDE:g})')
    p.add_argument('--split', choices=sorted(SPLIT_COUNTS))
    add_energy_flags(p)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('eval', help='Score predictions against ground truth')
    p.add_argument('--pred', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--report', required=True)
    p.add_argument('--baseline', help='Directory of unprocessed inputs to compare against')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('gradcheck', help='Finite-difference check of the energy gradient')
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--trials', type=int, default=100)
    p.add_argument('--report')
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('ablation', help='Compare mesh resolutions and loss-term variants over a triplet directory')
    p.add_argument('--data', required=True)
    p.add_argument('--report', required=True)
    p.add_argument('--pdf')
    p.add_argument('--resolutions', default=','.join(f"{u}x{v}" for u, v in ABLATION_RESOLUTIONS))
    p.add_argument('--limit', type=int)
    p.add_argument('--label-free', action='store_true')
    p.add_argument('--variants', default=','.join(ABLATION_VARIANTS),
                   help='Loss-term variants run at --mesh (empty to skip)')
    add_energy_flags(p)
    p.set_defaults(handler=cmd_ablation)
    return parser


def _fail(label: str, error: Exception, status: int) -> int:
    lines = str(error).splitlines() or ['']
    print(f"{label}: {lines[0]}", file=sys.stderr)
    return status


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format='%(levelname)s %(name)s: %(message)s')

    try:
        return args.handler(args)
    except (RasterIOError, OSError) as e:
        return _fail("I/O Error", e, EXIT_IO)
    except (WarpError, NumericalError, DatasetError) as e:
        return _fail("Numerical Error", e, EXIT_NUMERICAL)
    except ConfigError as e:
        return _fail("Configuration Error", e, EXIT_USAGE)
    except (UsageError, ValueError) as e:
        return _fail("Error", e, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
