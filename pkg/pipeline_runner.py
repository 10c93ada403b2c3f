"""
Pipeline runner for CTMORPH
Runs the seven stages per subject, writes staged outputs under
<output_root>/<subject>/<stage>/ and keeps manifest.tsv current so a rerun
with resume can skip stages whose outputs and parameters are unchanged.
"""

import hashlib
import json
import logging
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import pandas as pd

from atlas_segmentation import read_label_table, segment
from bone_strip import AIR_HU, strip
from ct_preprocess import preprocess_volume
from dicom_ingest import assemble_series, read_dicom_dir
from errors import CTMorphError, StageError
from nifti_io import atomic_write, read_label_nifti, read_nifti, write_nifti
from quantify import (geo_measures, geo_measures_frame, jacobian_determinant, physical_jacobian, warp_stats,
                      warp_stats_frame, write_csv)
from registration import Diffeomorphism, apply_transform, diffeo_register, load_field, save_field
from volume_core import NEAREST, TRILINEAR, AffineTransform, resample

logger = logging.getLogger(__name__)

VERSION = '1.0.0'
MANIFEST_NAME = 'manifest.tsv'
MANIFEST_COLUMNS = ['subject', 'stage', 'status', 'inputs', 'outputs', 'output_digests', 'param_digest',
                    'wall_time_s', 'tool_version', 'message']

STAGES = ('convert', 'preprocess', 'bone-strip', 'register', 'segment', 'warp-stats', 'geo-measures')
DEPENDS = {
    'convert': (),
    'preprocess': ('convert',),
    'bone-strip': ('preprocess',),
    'register': ('preprocess', 'bone-strip'),
    'segment': ('preprocess', 'bone-strip', 'register'),
    'warp-stats': ('preprocess', 'bone-strip', 'register'),
    'geo-measures': ('segment',),
}
OUTPUTS = {
    'convert': ('input.nii.gz',),
    'preprocess': ('native.nii.gz', 'bias_field.nii.gz', 'pre.nii.gz', 'pre_affine.txt'),
    'bone-strip': ('stripped_native.nii.gz', 'mask_native.nii.gz', 'stripped.nii.gz', 'mask.nii.gz'),
    'register': ('warped.nii.gz', 'fwd.nii.gz', 'fwd.manifest.txt', 'inv.nii.gz', 'inv.manifest.txt',
                 'vel.nii.gz', 'vel.manifest.txt'),
    'segment': ('seg_norm.nii.gz', 'seg_phys.nii.gz', 'segmentation.manifest.txt'),
    'warp-stats': ('jacobian.nii.gz', 'warp_stats.csv'),
    'geo-measures': ('geo_measures.csv',),
}
# upstream files each stage reads
INPUTS = {
    'convert': (),
    'preprocess': (('convert', 'input.nii.gz'),),
    'bone-strip': (('preprocess', 'native.nii.gz'), ('preprocess', 'pre_affine.txt')),
    'register': (('bone-strip', 'stripped_native.nii.gz'), ('preprocess', 'pre_affine.txt')),
    'segment': (('register', 'fwd.nii.gz'), ('register', 'inv.nii.gz'), ('register', 'vel.nii.gz'),
                ('preprocess', 'pre_affine.txt'), ('bone-strip', 'stripped_native.nii.gz')),
    'warp-stats': (('register', 'fwd.nii.gz'), ('bone-strip', 'mask.nii.gz'), ('bone-strip', 'mask_native.nii.gz'),
                   ('preprocess', 'pre_affine.txt')),
    'geo-measures': (('segment', 'seg_norm.nii.gz'), ('segment', 'seg_phys.nii.gz')),
}


def file_digest(path):
    sha = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            sha.update(chunk)
    return sha.hexdigest()


def _digest(payload):
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode('utf-8')).hexdigest()


def input_digest(spec):
    """Content digest of a subject's raw input: the NIfTI file, or every file of a DICOM directory"""
    path = Path(spec.path)
    if spec.kind != 'dicom':
        return file_digest(path)
    entries = [(str(p.relative_to(path)), file_digest(p)) for p in sorted(path.rglob('*')) if p.is_file()]
    return _digest(entries)


@dataclass
class StageRecord:
    subject: str
    stage: str
    status: str
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    output_digests: list = field(default_factory=list)
    param_digest: str = ''
    wall_time_s: float = 0.0
    tool_version: str = VERSION
    message: str = ''

    def as_row(self):
        row = asdict(self)
        for key in ('inputs', 'outputs', 'output_digests'):
            row[key] = ';'.join(row[key])
        row['wall_time_s'] = round(float(self.wall_time_s), 3)
        return row

    @classmethod
    def from_row(cls, row):
        def split(value):
            return [] if pd.isna(value) or value == '' else str(value).split(';')
        return cls(str(row['subject']), str(row['stage']), str(row['status']), split(row['inputs']),
                   split(row['outputs']), split(row['output_digests']),
                   '' if pd.isna(row['param_digest']) else str(row['param_digest']),
                   float(row['wall_time_s']), str(row['tool_version']),
                   '' if pd.isna(row['message']) else str(row['message']))


class RunManifest:
    """Per subject x stage records, rewritten atomically after every stage"""

    def __init__(self, path, records=None):
        self.path = Path(path)
        self.records = dict(records or {})
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            return cls(path)
        frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
        records = {}
        for _, row in frame.iterrows():
            record = StageRecord.from_row(row)
            records[(record.subject, record.stage)] = record
        return cls(path, records)

    def get(self, subject, stage):
        return self.records.get((subject, stage))

    def record(self, record):
        with self._lock:
            self.records[(record.subject, record.stage)] = record
            self._write()

    def _write(self):
        order = {stage: i for i, stage in enumerate(STAGES)}
        ordered = sorted(self.records.values(), key=lambda r: (r.subject, order.get(r.stage, len(order))))
        frame = pd.DataFrame([r.as_row() for r in ordered], columns=MANIFEST_COLUMNS)
        atomic_write(self.path, frame.to_csv(sep='\t', index=False, lineterminator='\n').encode('utf-8'))

    def statuses(self, subject=None):
        return {key: r.status for key, r in self.records.items() if subject is None or key[0] == subject}

    @property
    def failed(self):
        return [r for r in self.records.values() if r.status == 'failed']

    @property
    def exit_code(self):
        return 1 if self.failed else 0


class SharedInputs:
    """Template, atlas and label table loaded once per run"""

    def __init__(self, config):
        self.template = read_nifti(config.template_path)
        self.label_table = read_label_table(config.label_table_path) if config.label_table_path else {}
        atlas = read_label_nifti(config.atlas_path, self.label_table)
        if not atlas.grid.same_as(self.template.grid):
            logger.info("atlas grid %s differs from template grid %s; resampling (nearest)",
                        atlas.dims, self.template.dims)
            atlas = resample(atlas, self.template.grid, NEAREST)
        self.atlas = atlas
        self.digests = {
            'template': file_digest(config.template_path),
            'atlas': file_digest(config.atlas_path),
            'label_table': file_digest(config.label_table_path) if config.label_table_path else '',
        }


class SubjectRun:
    def __init__(self, config, spec, shared):
        self.config = config
        self.spec = spec
        self.shared = shared
        self.root = Path(config.output_root) / spec.id

    def stage_dir(self, stage):
        return self.root / stage

    def upstream(self, stage, name):
        path = self.stage_dir(stage) / name
        if not path.exists():
            raise StageError(stage, f"missing upstream output {path}")
        return path

    def stage_params(self, stage):
        config, digests = self.config, self.shared.digests
        if stage == 'convert':
            return {'kind': self.spec.kind, 'path': str(self.spec.path), 'content': input_digest(self.spec),
                    **asdict(config.convert)}
        if stage == 'preprocess':
            return {'template': digests['template'], **config.preprocess.as_dict()}
        if stage == 'bone-strip':
            return {'template': digests['template'], **config.bone_strip.as_dict()}
        if stage == 'register':
            return {'template': digests['template'], **config.register.as_dict()}
        if stage == 'segment':
            return {'atlas': digests['atlas'], 'label_table': digests['label_table']}
        if stage == 'warp-stats':
            return asdict(config.quantify)
        return {'atlas': digests['atlas'], 'label_table': digests['label_table']}

    def param_digests(self):
        digests = {}
        for stage in STAGES:
            # chained through DEPENDS so upstream changes invalidate downstream stages
            digests[stage] = _digest({'stage': stage, 'version': VERSION, 'params': self.stage_params(stage),
                                      'upstream': [digests[dep] for dep in DEPENDS[stage]]})
        return digests

    # -- stages: each writes into `out` (a temporary directory) ------------------

    def convert(self, out):
        if self.spec.kind == 'dicom':
            volume = assemble_series(read_dicom_dir(self.spec.path, self.config.convert.workers),
                                     to_ras=self.config.convert.to_ras)
        else:
            volume = read_nifti(self.spec.path)
        write_nifti(volume, out / 'input.nii.gz')
        return ''

    def preprocess(self, out):
        volume = read_nifti(self.upstream('convert', 'input.nii.gz'))
        result = preprocess_volume(volume, self.shared.template, self.config.preprocess)
        write_nifti(result['native'], out / 'native.nii.gz')
        write_nifti(result['bias_field'], out / 'bias_field.nii.gz')
        write_nifti(result['prealigned'], out / 'pre.nii.gz')
        result['transform'].save(out / 'pre_affine.txt')
        return ''

    def bone_strip(self, out):
        native = read_nifti(self.upstream('preprocess', 'native.nii.gz'))
        prealign = AffineTransform.load(self.upstream('preprocess', 'pre_affine.txt'))
        result = strip(native, self.config.bone_strip)
        grid = self.shared.template.grid
        write_nifti(result.stripped, out / 'stripped_native.nii.gz')
        write_nifti(result.mask, out / 'mask_native.nii.gz')
        write_nifti(apply_transform(result.stripped, [prealign.inverse()], grid, TRILINEAR.with_fill(AIR_HU)),
                    out / 'stripped.nii.gz')
        write_nifti(apply_transform(result.mask, [prealign.inverse()], grid, NEAREST), out / 'mask.nii.gz')
        return '; '.join(result.warnings)

    def register(self, out):
        stripped = read_nifti(self.upstream('bone-strip', 'stripped_native.nii.gz'))
        prealign = AffineTransform.load(self.upstream('preprocess', 'pre_affine.txt'))
        template = self.shared.template
        diffeo = diffeo_register(stripped, template, init=prealign, params=self.config.register)
        warped = apply_transform(stripped, [prealign.inverse(), diffeo.inverse], template.grid,
                                 TRILINEAR.with_fill(AIR_HU))
        write_nifti(warped, out / 'warped.nii.gz')
        save_field(diffeo.forward, out / 'fwd.nii.gz')
        save_field(diffeo.inverse, out / 'inv.nii.gz')
        save_field(diffeo.velocity, out / 'vel.nii.gz')
        return ''

    def segment(self, out):
        diffeo = Diffeomorphism(load_field(self.upstream('register', 'fwd.nii.gz')),
                                load_field(self.upstream('register', 'inv.nii.gz')),
                                load_field(self.upstream('register', 'vel.nii.gz')))
        prealign = AffineTransform.load(self.upstream('preprocess', 'pre_affine.txt'))
        native = read_nifti(self.upstream('bone-strip', 'stripped_native.nii.gz'))
        result = segment(self.shared.atlas, diffeo, prealign, native.grid, self.shared.label_table)
        write_nifti(result.labels_normalized, out / 'seg_norm.nii.gz')
        write_nifti(result.labels_physical, out / 'seg_phys.nii.gz')
        dims = 'x'.join(str(d) for d in result.labels_normalized.dims)
        native_dims = 'x'.join(str(d) for d in result.labels_physical.dims)
        text = (f"normalized_grid\ttemplate\n"
                f"normalized_dims\t{dims}\n"
                f"physical_grid\tnative\n"
                f"physical_dims\t{native_dims}\n"
                f"unknown_labels\t{','.join(map(str, result.unknown_labels))}\n")
        atomic_write(out / 'segmentation.manifest.txt', text.encode('utf-8'))
        if result.unknown_labels:
            return f"labels missing from label table: {','.join(map(str, result.unknown_labels))}"
        return ''

    def warp_stats(self, out):
        forward = load_field(self.upstream('register', 'fwd.nii.gz'))
        prealign = AffineTransform.load(self.upstream('preprocess', 'pre_affine.txt'))
        mask = read_label_nifti(self.upstream('bone-strip', 'mask.nii.gz'))
        native_mask = read_label_nifti(self.upstream('bone-strip', 'mask_native.nii.gz'))
        bins = self.config.quantify.bins
        jacobian = jacobian_determinant(forward)
        write_nifti(jacobian, out / 'jacobian.nii.gz')
        physical = physical_jacobian(jacobian, prealign, native_mask.grid)
        entries = [(self.spec.id, 'physical', warp_stats(physical, native_mask, bins)),
                   (self.spec.id, 'normalized', warp_stats(jacobian, mask, bins))]
        write_csv(warp_stats_frame(entries), out / 'warp_stats.csv')
        return ''

    def geo_measures(self, out):
        table = self.shared.label_table or self.shared.atlas.label_table
        expected = self.shared.atlas.labels()
        physical = read_label_nifti(self.upstream('segment', 'seg_phys.nii.gz'), table)
        normalized = read_label_nifti(self.upstream('segment', 'seg_norm.nii.gz'), table)
        rows = (geo_measures(physical, table, 'physical', expected)
                + geo_measures(normalized, table, 'normalized', expected))
        write_csv(geo_measures_frame(self.spec.id, rows), out / 'geo_measures.csv')
        return ''


STAGE_METHODS = {
    'convert': SubjectRun.convert,
    'preprocess': SubjectRun.preprocess,
    'bone-strip': SubjectRun.bone_strip,
    'register': SubjectRun.register,
    'segment': SubjectRun.segment,
    'warp-stats': SubjectRun.warp_stats,
    'geo-measures': SubjectRun.geo_measures,
}


def _outputs_current(record, param_digest, stage_dir):
    if record is None or record.status not in ('done', 'skipped') or record.param_digest != param_digest:
        return False
    if len(record.outputs) != len(record.output_digests) or not record.outputs:
        return False
    for name, digest in zip(record.outputs, record.output_digests):
        path = stage_dir / name
        if not path.is_file() or file_digest(path) != digest:
            return False
    return True


def _run_subject(config, spec, shared, manifest, stages, resume):
    run = SubjectRun(config, spec, shared)
    selected = [stage for stage in STAGES if stage in stages]
    try:
        run.root.mkdir(parents=True, exist_ok=True)
        digests = run.param_digests()
    except Exception as exc:
        logger.error("[%s] cannot prepare subject: %s", spec.id, exc)
        for stage in selected:
            manifest.record(StageRecord(spec.id, stage, 'failed', outputs=list(OUTPUTS[stage]),
                                        message=_one_line(f"subject setup failed: {exc}")))
        return

    blocked = None
    for stage in selected:
        stage_dir = run.stage_dir(stage)
        inputs = [str(run.stage_dir(up) / name) for up, name in INPUTS[stage]]
        # everything after a failed stage is recorded as blocked
        if blocked is not None:
            manifest.record(StageRecord(spec.id, stage, 'failed', inputs, list(OUTPUTS[stage]),
                                        param_digest=digests[stage], message=f"blocked by failed {blocked}"))
            continue

        previous = manifest.get(spec.id, stage)
        # same parameter digest and untouched outputs: nothing to do
        if resume and _outputs_current(previous, digests[stage], stage_dir):
            logger.info("[%s] %s: outputs current, skipping", spec.id, stage)
            manifest.record(StageRecord(spec.id, stage, 'skipped', inputs, list(previous.outputs),
                                        list(previous.output_digests), digests[stage], 0.0,
                                        message=previous.message))
            continue

        started = time.perf_counter()
        scratch = run.root / f".{stage}.tmp"
        try:
            shutil.rmtree(scratch, ignore_errors=True)
            scratch.mkdir(parents=True)
            logger.info("[%s] %s: running", spec.id, stage)
            message = STAGE_METHODS[stage](run, scratch) or ''
            missing = [name for name in OUTPUTS[stage] if not (scratch / name).is_file()]
            if missing:
                raise StageError(stage, f"stage did not write {', '.join(missing)}")
            # swap the finished scratch directory into place
            shutil.rmtree(stage_dir, ignore_errors=True)
            scratch.rename(stage_dir)
        except Exception as exc:
            if isinstance(exc, CTMorphError):
                reason = str(exc)
            else:
                logger.exception("[%s] %s raised unexpectedly", spec.id, stage)
                reason = f"{type(exc).__name__}: {exc}"
            logger.error("[%s] %s failed: %s", spec.id, stage, reason)
            manifest.record(StageRecord(spec.id, stage, 'failed', inputs, list(OUTPUTS[stage]),
                                        param_digest=digests[stage], wall_time_s=time.perf_counter() - started,
                                        message=_one_line(reason)))
            blocked = stage
            continue
        finally:
            shutil.rmtree(scratch, ignore_errors=True)

        outputs = list(OUTPUTS[stage])
        manifest.record(StageRecord(spec.id, stage, 'done', inputs, outputs,
                                    [file_digest(stage_dir / name) for name in outputs], digests[stage],
                                    time.perf_counter() - started, message=message))


def _one_line(text):
    return str(text).replace('\t', ' ').replace('\n', ' ')


def run_pipeline(config, stage_filter=None, resume=False, subjects=None, jobs=None):
    """Run the selected stages for the selected subjects; returns the RunManifest"""
    stages = set(STAGES if not stage_filter else stage_filter)
    unknown = stages - set(STAGES)
    if unknown:
        raise StageError('pipeline', f"unknown stage(s): {', '.join(sorted(unknown))}")
    specs = [s for s in config.subjects if not subjects or s.id in set(subjects)]
    if subjects:
        missing = set(subjects) - {s.id for s in specs}
        if missing:
            raise StageError('pipeline', f"unknown subject(s): {', '.join(sorted(missing))}")

    root = Path(config.output_root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        check = root / '.write_check'
        check.write_bytes(b'')
        check.unlink()
    except OSError as exc:
        raise StageError('pipeline', f"output root {root} is not writable: {exc}") from exc

    # a fresh run starts an empty manifest; resume extends the previous one
    manifest = RunManifest.load(root / MANIFEST_NAME) if resume else RunManifest(root / MANIFEST_NAME)
    shared = SharedInputs(config)
    workers = max(1, int(jobs or config.parallel_subjects))
    logger.info("running %d subject(s), %d stage(s), %d worker(s)", len(specs), len(stages), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_subject, config, spec, shared, manifest, stages, resume) for spec in specs]
        for future in futures:
            future.result()
    return manifest
