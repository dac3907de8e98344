"""
Configuration - default settings and experiment configs

Settings live in Flask's app.config. Commands combine them with an optional
JSON experiment file and their own flags into an ExperimentConfig:
defaults < app.config (incl. STXPN_* environment variables) < file < flags.
"""

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional

from domain import ConfigError
from services.baseline_service import DEFAULT_MU, HacConfig, STATISTICAL_METRICS, validate_hac_config
from services.bps_service import BpsConfig, validate_bps_config
from services.filter_service import FilterParams, validate_filter_params
from services.pointnet_service import ArchitectureSpec, TrainConfig, validate_train_config

ENV_PREFIX = 'STXPN'

DEFAULTS = {
    'LOG_LEVEL': 'INFO',
    'THREADS': 1,
    'SEED': 0,
    'SC_ROI': 1.0,
    'T_ROI': 0.1,
    'T_CONF': 0.5,
    'W_BB': 0.75,
    'W_PC': 0.25,
    'T_OV': 0.35,
    'BATCH_SIZE': 32,
    'LEARNING_RATE': 3e-3,
    'EPOCHS': 30,
    'LR_DECAY': 1.0,
    'HAC_WINNER': 'area',
    'METRIC': 'l2',
    'BENCH_RUNS': 100,
    'BENCH_WARMUPS': 10,
}

# app.config key -> dotted experiment key
SETTING_KEYS = {
    'SEED': 'seed',
    'THREADS': 'threads',
    'METRIC': 'metric',
    'SC_ROI': 'filter.sc_roi',
    'T_ROI': 'filter.t_roi',
    'T_CONF': 'bps.t_conf',
    'W_BB': 'bps.w_bb',
    'W_PC': 'bps.w_pc',
    'BATCH_SIZE': 'train.batch_size',
    'LEARNING_RATE': 'train.learning_rate',
    'EPOCHS': 'train.epochs',
    'LR_DECAY': 'train.lr_decay',
    'HAC_WINNER': 'hac.winner',
}

SECTIONS = ('filter', 'bps', 'train', 'architecture', 'hac', 'paths')


@dataclass
class ExperimentConfig:
    """Everything one experiment run depends on."""
    seed: int = 0
    threads: int = 1
    metric: str = 'l2'
    standardize: bool = False
    filter: FilterParams = field(default_factory=FilterParams)
    bps: BpsConfig = field(default_factory=BpsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    architecture: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    hac: HacConfig = field(default_factory=HacConfig)
    paths: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'threads': self.threads,
            'metric': self.metric,
            'standardize': self.standardize,
            'filter': {'sc_roi': self.filter.sc_roi, 't_roi': self.filter.t_roi},
            'bps': {'t_conf': self.bps.t_conf, 'w_bb': self.bps.w_bb, 'w_pc': self.bps.w_pc},
            'train': self.train.to_dict(),
            'architecture': self.architecture.to_dict(),
            'hac': {'mu': dict(self.hac.mu), 'winner': self.hac.winner},
            'paths': dict(self.paths),
        }


# Helper Functions

def read_config_file(path: str) -> Dict[str, Any]:
    """Parse a JSON experiment file into a nested dict."""
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            data = json.load(fh)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object.")
    unknown = set(data) - set(SECTIONS) - {'seed', 'threads', 'metric', 'standardize'}
    if unknown:
        raise ConfigError(f"Config file {path} has unknown keys: {', '.join(sorted(unknown))}.")
    return data


def _set_dotted(tree: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split('.')
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def settings_tree(app_config: Mapping[str, Any]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for setting, key in SETTING_KEYS.items():
        _set_dotted(tree, key, app_config.get(setting, DEFAULTS[setting]))
    return tree


def _build(tree: Dict[str, Any]) -> ExperimentConfig:
    try:
        seed = int(tree.get('seed', 0))
        train = dict(tree.get('train', {}))
        train['seed'] = seed
        hac = dict(tree.get('hac', {}))
        mu = dict(DEFAULT_MU)
        mu.update({str(k): float(v) for k, v in hac.get('mu', {}).items()})
        arch = tree.get('architecture')
        config = ExperimentConfig(
            seed=seed,
            threads=int(tree.get('threads', 1)),
            metric=str(tree.get('metric', 'l2')).lower(),
            standardize=bool(tree.get('standardize', False)),
            filter=FilterParams(**{k: float(v) for k, v in tree.get('filter', {}).items()}),
            bps=BpsConfig(**{k: float(v) for k, v in tree.get('bps', {}).items()}),
            train=TrainConfig(**train),
            architecture=ArchitectureSpec.from_dict(arch) if arch else ArchitectureSpec(),
            hac=HacConfig(mu, str(hac.get('winner', 'area'))),
            paths={str(k): str(v) for k, v in tree.get('paths', {}).items()},
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid experiment configuration: {e}") from e
    return config


def validate_experiment_config(config: ExperimentConfig):
    """Check every parameter range with the validator of its owning module."""
    for ok, message in (validate_filter_params(config.filter), validate_bps_config(config.bps),
                        validate_train_config(config.train), validate_hac_config(config.hac)):
        if not ok:
            return False, message
    if config.threads < 1:
        return False, 'Thread count must be at least 1.'
    if config.metric not in STATISTICAL_METRICS:
        return False, f"Metric must be one of {', '.join(STATISTICAL_METRICS)}."
    return True, ''


def load_experiment_config(app_config: Mapping[str, Any], path: Optional[str] = None,
                           overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Build the experiment config of one command invocation.

    Args:
        app_config: Flask app.config (defaults and STXPN_* environment settings)
        path: optional JSON experiment file
        overrides: dotted keys from command-line flags; None values are ignored

    Returns:
        ExperimentConfig: validated configuration

    Raises:
        ConfigError: unreadable file or out-of-range parameter
    """
    tree = settings_tree(app_config)
    if path:
        _merge(tree, read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(tree, key, value)
    config = _build(tree)
    ok, message = validate_experiment_config(config)
    if not ok:
        raise ConfigError(message)
    return config
