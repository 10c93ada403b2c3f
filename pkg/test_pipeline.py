"""
End-to-end pipeline tests on a small synthetic study
"""

import numpy as np
import pandas as pd
import pytest

from app import main
from bone_strip import strip
from nifti_io import write_nifti
from phantoms import head_phantom, parcel_atlas
from pipeline_config import SubjectSpec, validate_config
from pipeline_runner import (MANIFEST_COLUMNS, OUTPUTS, STAGE_METHODS, STAGES, RunManifest, file_digest, input_digest,
                             run_pipeline)
from volume_core import Volume3

N_LABELS = 5
FAST_SETTINGS = """
preprocess.bias_sigma_mm = 15
preprocess.bias_shrink = 2
register.levels = 2
register.iters_per_level = 5,5
"""


def make_study(root, extra='', subjects=('s01',), broken=(), n_labels=N_LABELS):
    root.mkdir(parents=True, exist_ok=True)
    template = strip(head_phantom(32)).stripped
    write_nifti(template, root / 'template.nii.gz')
    atlas = parcel_atlas(strip(head_phantom(32)).mask, n_labels, seed=1)
    write_nifti(atlas, root / 'atlas.nii.gz')
    (root / 'labels.tsv').write_text(''.join(f"{k}\t{v}\n" for k, v in sorted(atlas.label_table.items())))

    lines = ["template = template.nii.gz", "atlas = atlas.nii.gz", "label_table = labels.tsv",
             "output_root = out", "parallel_subjects = 2"]
    for index, subject in enumerate(subjects):
        volume = head_phantom(32, shift=(1.0, -1.0, 0.5 * index))
        if subject in broken:
            volume = Volume3(volume.grid, np.full(volume.dims, 3000.0))
        write_nifti(volume, root / f"{subject}.nii.gz")
        lines.append(f"subject.{subject} = nifti:{subject}.nii.gz")
    path = root / 'study.cfg'
    path.write_text('\n'.join(lines) + '\n' + FAST_SETTINGS + extra)
    return path


def output_digests(root):
    return {str(p.relative_to(root)): file_digest(p) for p in sorted(root.rglob('*'))
            if p.is_file() and p.name != 'manifest.tsv'}


@pytest.fixture(scope='module')
def study(tmp_path_factory):
    path = make_study(tmp_path_factory.mktemp('study'))
    config = validate_config(path)
    manifest = run_pipeline(config)
    return path, config, manifest


def test_end_to_end_outputs(study):
    _, config, manifest = study
    assert manifest.exit_code == 0
    assert manifest.statuses('s01') == {('s01', stage): 'done' for stage in STAGES}
    subject_root = config.output_root / 's01'
    for stage in STAGES:
        for name in OUTPUTS[stage]:
            assert (subject_root / stage / name).is_file(), f"{stage}/{name}"
    assert not list(subject_root.glob('.*.tmp'))

    geo = pd.read_csv(subject_root / 'geo-measures' / 'geo_measures.csv')
    assert sorted(geo['space'].value_counts().items()) == [('normalized', N_LABELS), ('physical', N_LABELS)]
    assert set(geo['name']) == {f"parcel_{k:03d}" for k in range(1, N_LABELS + 1)}

    warp = pd.read_csv(subject_root / 'warp-stats' / 'warp_stats.csv')
    assert warp['space'].tolist() == ['physical', 'normalized']
    assert (warp['jac_min'] > 0).all()


def test_manifest_file(study):
    _, config, manifest = study
    table = pd.read_csv(config.output_root / 'manifest.tsv', sep='\t')
    assert list(table.columns) == MANIFEST_COLUMNS
    assert table['stage'].tolist() == list(STAGES)
    loaded = RunManifest.load(config.output_root / 'manifest.tsv')
    record = loaded.get('s01', 'register')
    assert record.outputs == list(OUTPUTS['register'])
    assert record.output_digests[0] == file_digest(config.output_root / 's01' / 'register' / 'warped.nii.gz')


def test_resume_skips_everything(study):
    path, _, _ = study
    manifest = run_pipeline(validate_config(path), resume=True)
    assert set(manifest.statuses().values()) == {'skipped'}
    assert manifest.exit_code == 0


def test_resume_reruns_from_changed_stage(tmp_path):
    path = make_study(tmp_path)
    run_pipeline(validate_config(path))
    changed = make_study(tmp_path, extra="bone_strip.tissue_high_hu = 90\n")
    manifest = run_pipeline(validate_config(changed), resume=True)
    statuses = {stage: status for (_, stage), status in manifest.statuses('s01').items()}
    assert statuses['convert'] == 'skipped'
    assert statuses['preprocess'] == 'skipped'
    for stage in ('bone-strip', 'register', 'segment', 'warp-stats', 'geo-measures'):
        assert statuses[stage] == 'done'


def test_tampered_output_is_recomputed(tmp_path):
    path = make_study(tmp_path)
    config = validate_config(path)
    run_pipeline(config, stage_filter={'convert', 'preprocess'})
    (config.output_root / 's01' / 'preprocess' / 'pre_affine.txt').write_text('garbage\n')
    manifest = run_pipeline(config, stage_filter={'convert', 'preprocess'}, resume=True)
    assert manifest.get('s01', 'convert').status == 'skipped'
    assert manifest.get('s01', 'preprocess').status == 'done'


def test_runs_are_byte_identical(tmp_path, study):
    _, config, _ = study
    path = make_study(tmp_path)
    rerun = validate_config(path)
    run_pipeline(rerun)
    assert output_digests(rerun.output_root) == output_digests(config.output_root)


def test_stages_read_only_declared_inputs(tmp_path):
    path = make_study(tmp_path)
    config = validate_config(path)
    run_pipeline(config)
    subject_root = config.output_root / 's01'
    for undeclared in ('preprocess/pre.nii.gz', 'preprocess/bias_field.nii.gz', 'preprocess/native.nii.gz',
                       'register/warped.nii.gz', 'bone-strip/stripped.nii.gz', 'convert/input.nii.gz'):
        (subject_root / undeclared).unlink()
    manifest = run_pipeline(config, stage_filter={'segment', 'warp-stats', 'geo-measures'})
    assert manifest.exit_code == 0


def test_failed_subject_does_not_stop_others(tmp_path):
    path = make_study(tmp_path, subjects=('good', 'bad'), broken=('bad',))
    manifest = run_pipeline(validate_config(path))
    assert manifest.exit_code == 1
    assert manifest.get('bad', 'bone-strip').status == 'failed'
    assert 'empty mask' in manifest.get('bad', 'bone-strip').message
    assert manifest.get('bad', 'register').message == 'blocked by failed bone-strip'
    assert manifest.get('good', 'geo-measures').status == 'done'
    assert not (validate_config(path).output_root / 'bad' / 'bone-strip').exists()


def test_cli_exit_codes(tmp_path, capsys):
    path = make_study(tmp_path)
    assert main(['validate', '--config', str(path), '--print-config']) == 0
    assert 'register.iters_per_level = 5,5' in capsys.readouterr().out

    bad = tmp_path / 'bad.cfg'
    bad.write_text("atlas = atlas.nii.gz\npreprocess.bais_sigma_mm = 3\n")
    assert main(['validate', '--config', str(bad)]) == 2
    assert "did you mean 'preprocess.bias_sigma_mm'" in capsys.readouterr().out

    assert main(['--config', str(path), 'run', '--stages', 'convert,preprocess']) == 0
    assert (tmp_path / 'out' / 's01' / 'preprocess' / 'pre_affine.txt').is_file()


def test_single_stage_commands(tmp_path):
    path = make_study(tmp_path)
    out = tmp_path / 'single'
    out.mkdir()
    assert main(['convert', str(tmp_path / 's01.nii.gz'), '-o', str(out / 'input.nii.gz')]) == 0
    assert main(['bone-strip', str(out / 'input.nii.gz'), '-o', str(out / 'stripped.nii.gz'),
                 '--mask-out', str(out / 'mask.nii.gz')]) == 0
    assert main(['register', str(out / 'stripped.nii.gz'), '--template', str(tmp_path / 'template.nii.gz'),
                 '-o', str(out / 'warped.nii.gz'), '--warp-out', str(out / 'fwd.nii.gz'),
                 '--inv-warp-out', str(out / 'inv.nii.gz'), '--levels', '1', '--iters', '3']) == 0
    assert (out / 'fwd.manifest.txt').is_file()
    assert main(['bone-strip', str(tmp_path / 'missing.nii.gz'), '-o', str(out / 'x.nii.gz'),
                 '--mask-out', str(out / 'y.nii.gz')]) == 1
    assert path.is_file()


def test_unexpected_stage_error_is_recorded(tmp_path, monkeypatch):
    path = make_study(tmp_path, subjects=('good', 'bad'))
    original = STAGE_METHODS['segment']

    def crashing_segment(run, out):
        if run.spec.id == 'bad':
            (out / 'seg_norm.nii.gz').write_bytes(b'partial')
            raise RuntimeError('label sampler crashed')
        return original(run, out)

    monkeypatch.setitem(STAGE_METHODS, 'segment', crashing_segment)
    config = validate_config(path)
    manifest = run_pipeline(config)
    assert manifest.exit_code == 1
    assert manifest.get('bad', 'segment').status == 'failed'
    assert manifest.get('bad', 'segment').message == 'RuntimeError: label sampler crashed'
    assert manifest.get('bad', 'geo-measures').message == 'blocked by failed segment'
    assert manifest.get('good', 'geo-measures').status == 'done'
    bad_root = config.output_root / 'bad'
    assert not (bad_root / 'segment').exists()
    assert not list(bad_root.glob('.*.tmp'))


def test_changed_input_reruns_conversion(tmp_path):
    path = make_study(tmp_path)
    stages = {'convert', 'preprocess'}
    run_pipeline(validate_config(path), stage_filter=stages)
    write_nifti(head_phantom(32, shift=(2.0, 0.0, 0.0)), tmp_path / 's01.nii.gz')
    manifest = run_pipeline(validate_config(path), stage_filter=stages, resume=True)
    assert manifest.get('s01', 'convert').status == 'done'
    assert manifest.get('s01', 'preprocess').status == 'done'


def test_dicom_input_digest_follows_file_contents(tmp_path):
    series = tmp_path / 'dicom'
    series.mkdir()
    (series / 'a.dcm').write_bytes(b'first slice')
    (series / 'b.dcm').write_bytes(b'second slice')
    spec = SubjectSpec('s01', 'dicom', series)
    before = input_digest(spec)
    assert input_digest(spec) == before
    (series / 'b.dcm').write_bytes(b'second slice, rescanned')
    assert input_digest(spec) != before


@pytest.mark.slow
def test_full_size_atlas_end_to_end(tmp_path):
    path = make_study(tmp_path, n_labels=115)
    config = validate_config(path)
    manifest = run_pipeline(config)
    assert manifest.exit_code == 0
    geo = pd.read_csv(config.output_root / 's01' / 'geo-measures' / 'geo_measures.csv')
    assert sorted(geo['space'].value_counts().items()) == [('normalized', 115), ('physical', 115)]
    assert geo.groupby('space')['label'].apply(list).tolist() == [list(range(1, 116))] * 2
