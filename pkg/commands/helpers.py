"""
Command helpers - config loading, error mapping and run manifests shared by all commands
"""

import functools
import json
import os
from typing import Any, Dict, Optional

import click
from flask import current_app

from config import ExperimentConfig, load_experiment_config
from domain import ConfigError, StixelPointNetError
from services.baseline_service import MissingPercentageError


def experiment(config_path: Optional[str], overrides: Dict[str, Any]) -> ExperimentConfig:
    """Experiment config of the running command; range errors become usage errors (exit 2)."""
    try:
        return load_experiment_config(current_app.config, config_path, overrides)
    except ConfigError as e:
        raise click.UsageError(str(e)) from e


def handle_errors(fn):
    """Map domain failures to click exceptions: parameter problems exit 2, runtime failures exit 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            raise click.UsageError(str(e)) from e
        except MissingPercentageError as e:
            raise click.ClickException(e.args[0] if e.args else str(e)) from e
        except StixelPointNetError as e:
            current_app.logger.debug('command failed', exc_info=True)
            raise click.ClickException(str(e)) from e
    return wrapper


def write_text(path: str, text: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as fh:
        fh.write(text)


def write_run_manifest(path: str, command: str, config: ExperimentConfig, extra: Optional[Dict] = None) -> str:
    """Write <path>.manifest.json recording the command, its seed and its full configuration."""
    manifest = {'command': command, 'seed': config.seed, 'config': config.to_dict()}
    manifest.update(extra or {})
    target = f'{path}.manifest.json'
    write_text(target, json.dumps(manifest, sort_keys=True, indent=2) + '\n')
    return target


def parse_widths(value: Optional[str], name: str):
    """'64,64,128' -> [64, 64, 128]; None passes through."""
    if value is None:
        return None
    try:
        widths = [int(v) for v in value.split(',') if v.strip()]
    except ValueError as e:
        raise click.BadParameter(f"{name} must be comma-separated integers.") from e
    if not widths:
        raise click.BadParameter(f"{name} needs at least one width.")
    return widths
