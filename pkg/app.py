"""
CTMORPH command line
Single-stage subcommands work on explicit files; `run` drives the whole
pipeline from a config file and `validate` only checks one.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

from atlas_segmentation import read_label_table, segment
from bone_strip import AIR_HU, StripParams, strip
from ct_preprocess import PreprocessParams, preprocess_volume
from dicom_ingest import assemble_series, read_dicom_dir
from errors import ConfigError, CTMorphError
from nifti_io import read_label_nifti, read_nifti, write_nifti
from pipeline_config import validate_config
from pipeline_runner import STAGES, VERSION, run_pipeline
from quantify import (geo_measures, geo_measures_frame, jacobian_determinant, physical_jacobian, warp_stats,
                      warp_stats_frame, write_csv)
from registration import DiffeoParams, Diffeomorphism, apply_transform, diffeo_register, load_field, save_field
from volume_core import TRILINEAR, AffineTransform

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def print_success(message):
    print(f"✅ {message}")


def print_error(message):
    print(f"❌ {message}")


def print_warning(message):
    print(f"⚠️ {message}")


def _split(value):
    return [part.strip() for part in value.split(',') if part.strip()] if value else None


# ---------------------------------------------------------------------------
# single-stage subcommands
# ---------------------------------------------------------------------------

def cmd_convert(args):
    source = Path(args.input)
    if source.is_dir():
        volume = assemble_series(read_dicom_dir(source, args.workers), to_ras=not args.patient_frame)
    else:
        volume = read_nifti(source)
    write_nifti(volume, args.output)
    print_success(f"Converted {source} -> {args.output} (dims {'x'.join(map(str, volume.dims))})")
    return EXIT_OK


def cmd_preprocess(args):
    params = PreprocessParams(target_spacing=args.spacing, prealign_metric=args.metric, prealign_dof=args.dof,
                              correct_bias=not args.no_bias)
    result = preprocess_volume(read_nifti(args.input), read_nifti(args.template), params)
    write_nifti(result['prealigned'], args.output)
    result['transform'].save(args.affine_out)
    if args.native_out:
        write_nifti(result['native'], args.native_out)
    if args.bias_out:
        write_nifti(result['bias_field'], args.bias_out)
    print_success(f"Preprocessed {args.input} -> {args.output}")
    return EXIT_OK


def cmd_bone_strip(args):
    params = StripParams(tissue_low_hu=args.low, tissue_high_hu=args.high)
    result = strip(read_nifti(args.input), params)
    write_nifti(result.stripped, args.output)
    write_nifti(result.mask, args.mask_out)
    for warning in result.warnings:
        print_warning(warning)
    print_success(f"Bone strip kept {int(result.mask.data.sum())} voxels -> {args.output}")
    return EXIT_OK


def cmd_register(args):
    params = DiffeoParams()
    if args.levels is not None:
        params.levels = args.levels
        params.iters_per_level = params.iters_per_level[-args.levels:]
    if args.iters:
        params.iters_per_level = [int(n) for n in _split(args.iters)]
    moving = read_nifti(args.input)
    template = read_nifti(args.template)
    init = AffineTransform.load(args.affine) if args.affine else None
    diffeo = diffeo_register(moving, template, init=init, params=params)

    chain = [diffeo.inverse] if init is None else [init.inverse(), diffeo.inverse]
    warped = apply_transform(moving, chain, template.grid, TRILINEAR.with_fill(AIR_HU))
    write_nifti(warped, args.output)
    save_field(diffeo.forward, args.warp_out)
    save_field(diffeo.inverse, args.inv_warp_out)
    if args.velocity_out:
        save_field(diffeo.velocity, args.velocity_out)
    print_success(f"Registered {args.input}: max |u| {diffeo.forward.max_norm():.2f} mm, "
                  f"{diffeo.steps} squaring steps")
    return EXIT_OK


def cmd_segment(args):
    table = read_label_table(args.labels) if args.labels else None
    atlas = read_label_nifti(args.atlas, table)
    velocity = load_field(args.velocity) if args.velocity else None
    diffeo = Diffeomorphism(load_field(args.warp), load_field(args.inv_warp), velocity)
    native = read_nifti(args.native)
    result = segment(atlas, diffeo, AffineTransform.load(args.affine), native.grid, table)
    write_nifti(result.labels_physical, args.output)
    if args.normalized_out:
        write_nifti(result.labels_normalized, args.normalized_out)
    if result.unknown_labels:
        print_warning(f"Labels missing from the label table: {', '.join(map(str, result.unknown_labels))}")
    print_success(f"Segmented {len(result.labels_physical.labels())} labels -> {args.output}")
    return EXIT_OK


def cmd_warp_stats(args):
    jacobian = jacobian_determinant(load_field(args.warp))
    if args.jacobian_out:
        write_nifti(jacobian, args.jacobian_out)
    entries = []
    if args.affine and args.native_mask:
        native_mask = read_label_nifti(args.native_mask)
        physical = physical_jacobian(jacobian, AffineTransform.load(args.affine), native_mask.grid)
        entries.append((args.subject, 'physical', warp_stats(physical, native_mask, args.bins)))
    entries.append((args.subject, 'normalized', warp_stats(jacobian, read_label_nifti(args.mask), args.bins)))
    write_csv(warp_stats_frame(entries), args.output)
    for _, space, stats in entries:
        print_success(f"{space}: mean {stats.jac_mean:.4f}, std {stats.jac_std:.4f}, "
                      f"entropy {stats.jac_entropy:.4f} bits over {stats.n_voxels} voxels")
    return EXIT_OK


def cmd_geo_measures(args):
    table = read_label_table(args.labels) if args.labels else {}
    expected = read_label_nifti(args.atlas).labels() if args.atlas else None
    rows = []
    for space, path in (('physical', args.physical), ('normalized', args.normalized)):
        if path:
            rows += geo_measures(read_label_nifti(path, table), table, space, expected)
    if not rows:
        print_error("Nothing to measure: give --physical and/or --normalized")
        return EXIT_FAILED
    write_csv(geo_measures_frame(args.subject, rows), args.output)
    print_success(f"Wrote {len(rows)} region rows -> {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline subcommands
# ---------------------------------------------------------------------------

def _load_config(args):
    path = getattr(args, 'config', None) or os.getenv('CTMORPH_CONFIG')
    if not path:
        raise ConfigError(["no config file given (use --config or set CTMORPH_CONFIG)"])
    return validate_config(path)


def cmd_validate(args):
    config = _load_config(args)
    if getattr(args, 'print_config', False):
        print(config.to_text(), end='')
    print_success(f"Config OK: {len(config.subjects)} subject(s), output root {config.output_root}")
    return EXIT_OK


def cmd_run(args):
    config = _load_config(args)
    if getattr(args, 'print_config', False):
        print(config.to_text(), end='')
    manifest = run_pipeline(config, stage_filter=_split(getattr(args, 'stages', None)),
                            resume=getattr(args, 'resume', False),
                            subjects=_split(getattr(args, 'subjects', None)),
                            jobs=getattr(args, 'jobs', None))

    counts = {}
    for record in manifest.records.values():
        counts[record.status] = counts.get(record.status, 0) + 1
    summary = ', '.join(f"{counts[s]} {s}" for s in ('done', 'skipped', 'failed') if s in counts)
    for record in manifest.failed:
        print_error(f"{record.subject}/{record.stage}: {record.message}")
    if manifest.exit_code:
        print_warning(f"Pipeline finished with failures ({summary}); see {manifest.path}")
    else:
        print_success(f"Pipeline finished ({summary}); manifest {manifest.path}")
    return manifest.exit_code


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _pipeline_flags():
    # SUPPRESS keeps a flag given before the subcommand from being reset by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('--config', help='pipeline config file (default: $CTMORPH_CONFIG)')
    common.add_argument('--subjects', help='comma-separated subject ids to run')
    common.add_argument('--stages', help=f"comma-separated stages ({','.join(STAGES)})")
    common.add_argument('--resume', action='store_true', help='skip stages whose outputs are current')
    common.add_argument('--jobs', type=int, help='subjects processed concurrently')
    common.add_argument('--print-config', action='store_true', help='echo the resolved configuration')
    return common


def build_parser():
    common = _pipeline_flags()
    parser = argparse.ArgumentParser(prog='ctmorph', description='CT morphometry pipeline', parents=[common])
    parser.add_argument('--version', action='version', version=f"ctmorph {VERSION}")
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    parser.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('convert', help='DICOM directory (or NIfTI file) to NIfTI')
    p.add_argument('input')
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--patient-frame', action='store_true', help='keep DICOM LPS coordinates')
    p.add_argument('--workers', type=int, default=4)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser('preprocess', help='reorient, resample, bias-correct and pre-align')
    p.add_argument('input')
    p.add_argument('--template', required=True)
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--affine-out', required=True)
    p.add_argument('--native-out')
    p.add_argument('--bias-out')
    p.add_argument('--spacing', type=float, default=1.0)
    p.add_argument('--metric', choices=('mi', 'ncc', 'msd'), default='mi')
    p.add_argument('--dof', type=int, choices=(6, 9, 12), default=12)
    p.add_argument('--no-bias', action='store_true')
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser('bone-strip', help='soft-tissue extraction')
    p.add_argument('input')
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--mask-out', required=True)
    p.add_argument('--low', type=float, default=0.0)
    p.add_argument('--high', type=float, default=100.0)
    p.set_defaults(func=cmd_bone_strip)

    p = sub.add_parser('register', help='diffeomorphic registration to the template')
    p.add_argument('input')
    p.add_argument('--template', required=True)
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--warp-out', required=True)
    p.add_argument('--inv-warp-out', required=True)
    p.add_argument('--velocity-out')
    p.add_argument('--affine', help='pre-alignment affine when the input is on its native grid')
    p.add_argument('--levels', type=int)
    p.add_argument('--iters', help='comma-separated iterations per level, coarsest first')
    p.set_defaults(func=cmd_register)

    p = sub.add_parser('segment', help='pull atlas labels back onto the subject')
    p.add_argument('--atlas', required=True)
    p.add_argument('--warp', required=True)
    p.add_argument('--inv-warp', required=True)
    p.add_argument('--velocity')
    p.add_argument('--affine', required=True)
    p.add_argument('--native', required=True)
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--normalized-out')
    p.add_argument('--labels')
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser('warp-stats', help='Jacobian determinant statistics')
    p.add_argument('--warp', required=True)
    p.add_argument('--mask', required=True)
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--affine')
    p.add_argument('--native-mask')
    p.add_argument('--jacobian-out')
    p.add_argument('--subject', default='subject')
    p.add_argument('--bins', type=int, default=64)
    p.set_defaults(func=cmd_warp_stats)

    p = sub.add_parser('geo-measures', help='per-region volume, surface area and centroid')
    p.add_argument('--physical')
    p.add_argument('--normalized')
    p.add_argument('--labels')
    p.add_argument('--atlas', help='atlas whose labels every space must report')
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--subject', default='subject')
    p.set_defaults(func=cmd_geo_measures)

    p = sub.add_parser('run', help='run the pipeline from a config file', parents=[common])
    p.set_defaults(func=cmd_run)
    p = sub.add_parser('validate', help='check a config file', parents=[common])
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s")

    try:
        return args.func(args)
    except ConfigError as exc:
        print_error("Configuration problems:")
        for problem in exc.problems:
            print(f"   - {problem}")
        return EXIT_CONFIG
    except CTMorphError as exc:
        print_error(str(exc))
        return EXIT_FAILED
    except OSError as exc:
        print_error(f"I/O error: {exc}")
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
