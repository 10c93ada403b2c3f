"""
Pipeline configuration for CTMORPH
Flat `key = value` files (dotenv syntax) with global keys, subject
declarations and `<section>.<field>` stage parameters. Every problem in a
file is collected and reported together.
"""

import difflib
import io
import logging
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from dotenv.parser import parse_stream

from bone_strip import StripParams
from ct_preprocess import PreprocessParams
from errors import ConfigError
from quantify import DEFAULT_BINS
from registration import DiffeoParams

logger = logging.getLogger(__name__)

GLOBAL_KEYS = ('template', 'atlas', 'label_table', 'output_root', 'parallel_subjects')
SUBJECT_PREFIX = 'subject.'
SUBJECT_ID = re.compile(r'^[A-Za-z0-9._-]+$')
INPUT_KINDS = ('dicom', 'nifti')
DEFAULT_OUTPUT_ROOT = 'ctmorph_output'
TRUE_WORDS = {'1', 'true', 'yes', 'on'}
FALSE_WORDS = {'0', 'false', 'no', 'off'}


@dataclass
class ConvertParams:
    to_ras: bool = True
    workers: int = 4

    def validate(self):
        return [] if int(self.workers) >= 1 else [f"convert.workers must be >= 1, got {self.workers}"]


@dataclass
class QuantifyParams:
    bins: int = DEFAULT_BINS

    def validate(self):
        return [] if int(self.bins) >= 1 else [f"quantify.bins must be >= 1, got {self.bins}"]


# config section -> parameter dataclass
SECTIONS = {
    'convert': ConvertParams,
    'preprocess': PreprocessParams,
    'bone_strip': StripParams,
    'register': DiffeoParams,
    'quantify': QuantifyParams,
}


@dataclass(frozen=True)
class SubjectSpec:
    id: str
    kind: str
    path: Path
    line: int = 0


@dataclass
class PipelineConfig:
    template_path: Path
    atlas_path: Path
    output_root: Path
    label_table_path: Path = None
    parallel_subjects: int = 1
    subjects: list = field(default_factory=list)
    convert: ConvertParams = field(default_factory=ConvertParams)
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    bone_strip: StripParams = field(default_factory=StripParams)
    register: DiffeoParams = field(default_factory=DiffeoParams)
    quantify: QuantifyParams = field(default_factory=QuantifyParams)
    source_path: Path = None

    def section(self, name):
        return getattr(self, name)

    def subject(self, subject_id):
        for spec in self.subjects:
            if spec.id == subject_id:
                return spec
        raise KeyError(subject_id)

    def to_text(self):
        """Fully resolved configuration in the same key = value syntax"""
        lines = ['# CTMORPH resolved configuration',
                 f"template = {self.template_path}",
                 f"atlas = {self.atlas_path}"]
        if self.label_table_path is not None:
            lines.append(f"label_table = {self.label_table_path}")
        lines += [f"output_root = {self.output_root}",
                  f"parallel_subjects = {self.parallel_subjects}",
                  '']
        for spec in self.subjects:
            lines.append(f"{SUBJECT_PREFIX}{spec.id} = {spec.kind}:{spec.path}")
        for name in SECTIONS:
            lines += ['', f"# {name}"]
            params = self.section(name)
            for f in fields(params):
                lines.append(f"{name}.{f.name} = {_format_value(getattr(params, f.name))}")
        return '\n'.join(lines) + '\n'


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ','.join(str(v) for v in value)
    return str(value)


def _coerce(raw, annotation):
    text = raw.strip()
    if annotation is bool:
        lowered = text.lower()
        if lowered in TRUE_WORDS:
            return True
        if lowered in FALSE_WORDS:
            return False
        raise ValueError(f"expected true/false, got '{raw}'")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation is list:
        return [int(part) for part in text.replace(' ', '').split(',') if part]
    return text


def valid_keys():
    keys = list(GLOBAL_KEYS)
    for name, params_cls in SECTIONS.items():
        keys += [f"{name}.{f.name}" for f in fields(params_cls)]
    return keys


def nearest_key(key):
    """Closest valid key, also matching a bare field name to its section key"""
    candidates = {k: k for k in valid_keys()}
    for full in valid_keys():
        if '.' in full:
            candidates.setdefault(full.split('.', 1)[1], full)
    match = difflib.get_close_matches(key, list(candidates), n=1, cutoff=0.6)
    if not match and '.' in key:
        match = difflib.get_close_matches(key.split('.', 1)[1], list(candidates), n=1, cutoff=0.6)
    return candidates[match[0]] if match else None


def _resolve(base, value):
    path = Path(value).expanduser()
    return path if path.is_absolute() else (base / path)


def validate_config(path, check_paths=True):
    """Parse and validate a config file; raises ConfigError listing every problem"""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    base = path.parent

    problems = []
    globals_seen = {}
    section_values = {name: {} for name in SECTIONS}
    subjects = {}
    known = set(valid_keys())

    for binding in parse_stream(io.StringIO(text)):
        line = binding.original.line
        if binding.error:
            problems.append(f"line {line}: cannot parse '{binding.original.string.strip()}'")
            continue
        if binding.key is None:
            continue
        key, value = binding.key, binding.value if binding.value is not None else ''

        if key.startswith(SUBJECT_PREFIX):
            subject_id = key[len(SUBJECT_PREFIX):]
            if not SUBJECT_ID.match(subject_id):
                problems.append(f"line {line}: subject id '{subject_id}' must match [A-Za-z0-9._-]+")
                continue
            if subject_id in subjects:
                problems.append(f"duplicate subject id '{subject_id}' on lines {subjects[subject_id].line} and {line}")
                continue
            kind, sep, location = value.partition(':')
            if not sep or kind not in INPUT_KINDS:
                problems.append(f"line {line}: subject '{subject_id}' needs '<dicom|nifti>:<path>', got '{value}'")
                continue
            subjects[subject_id] = SubjectSpec(subject_id, kind, _resolve(base, location.strip()), line)
            continue

        if key not in known:
            suggestion = nearest_key(key)
            hint = f"; did you mean '{suggestion}'?" if suggestion else ''
            problems.append(f"line {line}: unknown key '{key}'{hint}")
            continue

        if '.' in key:
            section, name = key.split('.', 1)
            target = section_values[section]
        else:
            name, target = key, globals_seen
        if name in target:
            problems.append(f"line {line}: key '{key}' set more than once")
            continue
        target[name] = (value, line)

    sections = {}
    for section, params_cls in SECTIONS.items():
        kwargs = {}
        annotations = {f.name: f.type for f in fields(params_cls)}
        for name, (raw, line) in section_values[section].items():
            try:
                kwargs[name] = _coerce(raw, annotations[name])
            except ValueError as exc:
                problems.append(f"line {line}: {section}.{name}: {exc}")
        params = params_cls(**kwargs)
        problems += params.validate()
        sections[section] = params

    for required in ('template', 'atlas'):
        if required not in globals_seen:
            problems.append(f"missing required key '{required}'")
    if not subjects:
        problems.append("no subjects declared (add 'subject.<id> = nifti:<path>')")

    parallel = 1
    if 'parallel_subjects' in globals_seen:
        raw, line = globals_seen['parallel_subjects']
        try:
            parallel = int(raw)
            if parallel < 1:
                problems.append(f"line {line}: parallel_subjects must be >= 1, got {parallel}")
        except ValueError:
            problems.append(f"line {line}: parallel_subjects must be an integer, got '{raw}'")

    paths = {name: _resolve(base, raw) for name, (raw, _) in globals_seen.items()
             if name in ('template', 'atlas', 'label_table', 'output_root')}
    if check_paths:
        for name in ('template', 'atlas', 'label_table'):
            if name in paths and not paths[name].is_file():
                problems.append(f"{name} not found: {paths[name]}")
        for spec in subjects.values():
            exists = spec.path.is_dir() if spec.kind == 'dicom' else spec.path.is_file()
            if not exists:
                problems.append(f"subject '{spec.id}' input not found: {spec.path}")

    if problems:
        raise ConfigError(problems)

    config = PipelineConfig(
        template_path=paths['template'],
        atlas_path=paths['atlas'],
        output_root=paths.get('output_root', base / DEFAULT_OUTPUT_ROOT),
        label_table_path=paths.get('label_table'),
        parallel_subjects=parallel,
        subjects=sorted(subjects.values(), key=lambda s: s.id),
        source_path=path,
        **sections,
    )
    logger.info("config %s: %d subjects, output root %s", path, len(config.subjects), config.output_root)
    return config
