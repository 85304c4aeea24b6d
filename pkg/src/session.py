"""
Manifest handling and the run / sweep / verify commands. Commands return
process exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
import copy
import logging
import os
from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd
import yaml

from src.data.generator import synth_dataset
from src.data.loaders import load_csv, load_idx_images
from src.data.partition import PartitionSpec, class_overlap, pathological_partition
from src.federation import FederatedSystem, FederationConfig
from src.metrics import ExperimentLog, write_csv, write_summary
from src.model import MlpSpec
from src.multiprocessing.mp_wrapper import mp_kwargs_wrapper
from src.utils import ConfigError, FormatError, IoError, translation_table
from src import verify


logger = logging.getLogger(__name__)

SEED_ENV = 'FEDCOME_SEED'
DATA_SOURCES = ('synthetic', 'idx', 'csv')
METAPARAM_DEFAULTS = {'repeats': 1, 'multiprocess': False, 'progress': True, 'log_level': 'INFO'}
SUMMARY_STATS = ('final_weighted_acc', 'mean_final_acc', 'acc_std', 'total_violations', 'unselected_upticks')

# sweepable parameter -> manifest edits for one value
SWEEP_PARAMS = {
    'alpha': lambda v: {('federation', 'sampler', 'alpha'): float(v)},
    'mu': lambda v: {('federation', 'sampler', 'mu'): float(v)},
    'participation_ratio': lambda v: {('federation', 'participation'): 'partial',
                                      ('federation', 'participation_ratio'): float(v),
                                      ('federation', 'num_selected'): None},
    'classes_per_client': lambda v: {('partition', 'classes_per_client'): int(v)},
    'method': lambda v: {('federation', 'method'): str(v)},
    'sampler': lambda v: {('federation', 'sampler', 'kind'): str(v)},
}


@dataclass(frozen=True)
class DatasetSpec:
    source: str = 'synthetic'
    num_classes: int = 10
    samples_per_class: int = 100
    dim: int = 10
    separation: float = 3.
    seed: int = 0
    images: str = None
    labels: str = None
    path: str = None
    label_column: str = 'label'

    def validate(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"dataset.source: expected one of {DATA_SOURCES}, got '{self.source}'")
        paths = {'idx': (self.images, self.labels), 'csv': (self.path,)}
        given = {name for name, group in paths.items() if any(p is not None for p in group)}
        if self.source == 'synthetic' and given:
            raise ConfigError("dataset.source: synthetic dataset given file paths as well")
        if self.source == 'idx' and (self.images is None or self.labels is None or self.path is not None):
            raise ConfigError("dataset.images: idx source needs exactly images and labels paths")
        if self.source == 'csv' and (self.path is None or 'idx' in given):
            raise ConfigError("dataset.path: csv source needs exactly one path")
        return self


def _section(cls, raw, prefix):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}: unknown field")
    try:
        return cls(**raw)
    except TypeError as err:
        raise ConfigError(f"{prefix}: ill-typed field ({err})") from err


@dataclass
class RunManifest:
    dataset: DatasetSpec
    partition: PartitionSpec
    federation: FederationConfig
    output_dir: str
    repeats: int = 1
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw, default_output='results/run'):
        if not isinstance(raw, dict):
            raise ConfigError("manifest: expected a mapping at the top level")
        unknown = set(raw) - {'dataset', 'partition', 'federation', 'output_dir', 'repeats'}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown manifest section")
        if 'partition' not in raw or 'num_clients' not in (raw['partition'] or {}):
            raise ConfigError("partition.num_clients: required")
        repeats = raw.get('repeats', 1)
        if not isinstance(repeats, int) or repeats < 1:
            raise ConfigError(f"repeats: must be a positive integer, got {repeats}")
        try:
            federation = FederationConfig.from_dict(raw.get('federation')).validate()
        except TypeError as err:
            raise ConfigError(f"federation: ill-typed field ({err})") from err
        return cls(dataset=_section(DatasetSpec, raw.get('dataset'), 'dataset').validate(),
                   partition=_section(PartitionSpec, raw['partition'], 'partition'),
                   federation=federation,
                   output_dir=str(raw.get('output_dir') or default_output),
                   repeats=repeats,
                   raw=copy.deepcopy(raw))

    def snapshot(self):
        return {'dataset': {f.name: getattr(self.dataset, f.name) for f in fields(self.dataset)},
                'partition': {f.name: getattr(self.partition, f.name) for f in fields(self.partition)},
                'federation': self.federation.as_dict()}


def parse_override(text):
    """'federation.eta=0.01' -> (('federation', 'eta'), 0.01); the value is read as a YAML scalar."""
    if '=' not in text:
        raise ConfigError(f"--set {text}: expected path=value")
    path, value = text.split('=', 1)
    keys = tuple(part for part in path.strip().split('.') if part)
    if not keys:
        raise ConfigError(f"--set {text}: empty field path")
    try:
        return keys, yaml.safe_load(value)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: cannot parse value '{value}'") from err


def set_path(raw, keys, value):
    node = raw
    for depth, key in enumerate(keys[:-1]):
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"{'.'.join(keys[:depth + 1])}: not a section")
        node = child
    node[keys[-1]] = value


def load_manifest_dict(path, overrides=()):
    if not os.path.isfile(path):
        raise ConfigError(f"{path}: manifest not found")
    try:
        with open(path, encoding='utf-8') as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: cannot parse manifest ({err})") from err
    for text in overrides:
        set_path(raw, *parse_override(text))
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        try:
            set_path(raw, ('federation', 'seed'), int(env_seed))
        except ValueError as err:
            raise ConfigError(f"federation.seed: {SEED_ENV}='{env_seed}' is not an integer") from err
    return raw


def default_output_dir(path):
    return os.path.join('results', os.path.splitext(os.path.basename(path))[0])


def load_manifest(path, overrides=()):
    return RunManifest.from_dict(load_manifest_dict(path, overrides), default_output_dir(path))


def load_metaparams(path='cfg/metaparams.yaml'):
    metaparams = dict(METAPARAM_DEFAULTS)
    if path is not None and os.path.isfile(path):
        with open(path, encoding='utf-8') as f:
            metaparams |= yaml.safe_load(f) or {}
    return metaparams


def build_clients(manifest):
    """
    Materialize the dataset and partition it.

    Returns:
        clients:    List of ClientDataset
        spec:       MlpSpec sized to the data and the manifest's model section
    """
    ds = manifest.dataset
    if ds.source == 'synthetic':
        full = synth_dataset(ds.num_classes, ds.samples_per_class, ds.dim, ds.separation, ds.seed)
        num_classes = ds.num_classes
    elif ds.source == 'idx':
        full = load_idx_images(ds.images, ds.labels)
        num_classes = 10
    else:
        full = load_csv(ds.path, ds.label_column)
        num_classes = max(2, int(full.labels.max()) + 1)
    clients = pathological_partition(full, manifest.partition)
    model = manifest.federation.model
    spec = MlpSpec(input_dim=full.features.shape[1], hidden_dims=model.hidden_dims,
                   num_classes=num_classes, activation=model.activation)
    logger.info("partitioned %d samples into %d clients (mean class overlap %.2f)",
                full.n, len(clients), class_overlap(clients))
    return clients, spec


def execute_run(manifest, clients, spec, out_dir, progress=False):
    """Run one experiment and write rounds.csv and summary.json into out_dir."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as err:
        raise IoError(f"{out_dir}: cannot create output directory ({err})") from err
    system = FederatedSystem(manifest.federation, clients, spec)
    records = system.run(progress)
    log = ExperimentLog(manifest.snapshot(), system.num_clients, records, system.initial_losses)
    write_csv(log, os.path.join(out_dir, 'rounds.csv'))
    if manifest.federation.is_partial and manifest.federation.sampler.kind == 'anneal':
        system.table.to_csv(os.path.join(out_dir, 'similarity.csv'))
    return write_summary(log, system.test_sizes, os.path.join(out_dir, 'summary.json'))


def _prepare(path, overrides):
    manifest = load_manifest(path, overrides)
    clients, spec = build_clients(manifest)
    manifest.federation.validate(len(clients))
    return manifest, clients, spec


def cmd_run(manifest_path, overrides=(), metaparams=None):
    metaparams = metaparams or dict(METAPARAM_DEFAULTS)
    try:
        manifest, clients, spec = _prepare(manifest_path, overrides)
    except (ConfigError, FormatError) as err:
        logger.error("%s", err)
        return 2
    try:
        summary = execute_run(manifest, clients, spec, manifest.output_dir, metaparams['progress'])
    except (ConfigError, FormatError) as err:
        logger.error("%s", err)
        return 2
    except Exception:
        logger.exception("run failed")
        return 1
    logger.info("final weighted accuracy %.4f, %d loss upticks (%d while idle)", summary['final_weighted_acc'],
                summary['total_violations'], summary['unselected_upticks'])
    return 0


def run_worker(raw, output_dir, seed, progress=False):
    """One seeded sub-run from a raw manifest; returns the summary or an error string."""
    try:
        raw = copy.deepcopy(raw)
        set_path(raw, ('federation', 'seed'), int(seed))
        manifest = RunManifest.from_dict(raw, output_dir)
        clients, spec = build_clients(manifest)
        manifest.federation.validate(len(clients))
        return execute_run(manifest, clients, spec, output_dir, progress)
    except Exception as err:
        logger.exception("sub-run %s failed", output_dir)
        return {'error': f"{type(err).__name__}: {err}"}


def _value_dir(param, value):
    e_str = str({param: value})
    return e_str.translate(translation_table).replace(' ', '_')


def cmd_sweep(manifest_path, param, values, overrides=(), metaparams=None):
    """
    One run per value of `param` (times `repeats` seeds), each in its own
    subdirectory, plus sweep_summary.csv with _MEAN/_STD columns over seeds.
    """
    metaparams = metaparams or dict(METAPARAM_DEFAULTS)
    if param not in SWEEP_PARAMS:
        logger.error("param: unknown sweep parameter '%s', expected one of %s", param, sorted(SWEEP_PARAMS))
        return 2
    if not values:
        logger.error("values: empty value list")
        return 2
    try:
        base = load_manifest_dict(manifest_path, overrides)
        manifest = RunManifest.from_dict(base, default_output_dir(manifest_path))
        sub_raws = []
        for value in values:
            raw = copy.deepcopy(base)
            for keys, new in SWEEP_PARAMS[param](value).items():
                set_path(raw, keys, new)
            RunManifest.from_dict(raw)
            sub_raws.append(raw)
    except (ConfigError, ValueError) as err:
        logger.error("%s", err)
        return 2

    res_dir = manifest.output_dir
    base_seed = manifest.federation.seed
    repeats = manifest.repeats
    rows, failures = [], 0
    for value, raw in zip(values, sub_raws):
        value_dir = os.path.join(res_dir, _value_dir(param, value))
        seeds = [base_seed + rdx for rdx in range(repeats)]
        dirs = [value_dir if repeats == 1 else os.path.join(value_dir, f'seed_{seed}') for seed in seeds]
        logger.info("sweep %s=%s over seeds %s", param, value, seeds)
        kwargs_list = [{'raw': raw, 'output_dir': out, 'seed': seed} for out, seed in zip(dirs, seeds)]
        if metaparams['multiprocess'] and repeats > 1:
            outs = mp_kwargs_wrapper(run_worker, kwargs_list)
        else:
            outs = [run_worker(**kwargs, progress=metaparams['progress']) for kwargs in kwargs_list]
        good = [out for out in outs if 'error' not in out]
        failures += len(outs) - len(good)
        row = {param: value, 'runs': len(good)}
        for stat in SUMMARY_STATS:
            vals = np.array([out[stat] for out in good], dtype=np.float64)
            row[f'{stat}_MEAN'] = float(np.mean(vals)) if vals.size else float('nan')
            row[f'{stat}_STD'] = float(np.std(vals)) if vals.size else float('nan')
        rows.append(row)

    try:
        os.makedirs(res_dir, exist_ok=True)
        pd.DataFrame(rows).to_csv(os.path.join(res_dir, 'sweep_summary.csv'), mode='w', header=True,
                                  index=False, float_format='%.17g')
    except OSError as err:
        logger.error("%s: cannot write sweep summary (%s)", res_dir, err)
        return 1
    if failures:
        logger.error("%d sub-runs failed", failures)
        return 1
    return 0


def cmd_verify(suite):
    if suite not in verify.SUITES:
        logger.error("suite: unknown suite '%s', expected one of %s", suite, sorted(verify.SUITES))
        return 2
    try:
        return 0 if verify.run_suite(suite) else 1
    except Exception:
        logger.exception("suite %s crashed", suite)
        return 1
