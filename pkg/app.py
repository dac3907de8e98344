"""
Main Flask application entry point for StixelPointNet.

This module provides the application factory pattern for creating Flask app instances.
Commands are organized in separate blueprint modules in the commands package and
are run through the Flask CLI, e.g. `flask --app app synth --frames 10 --out data/`.
"""

import logging

from flask import Flask
from flask.cli import FlaskGroup
from flask.logging import default_handler

from commands import register_blueprints
from config import DEFAULTS, ENV_PREFIX


def create_app(overrides=None):
    """
    Application factory function to create and configure Flask app.

    Args:
        overrides: optional mapping applied after defaults and environment

    Returns:
        Flask: Configured Flask application instance
    """
    app = Flask(__name__)
    app.config.from_mapping(DEFAULTS)
    app.config.from_prefixed_env(ENV_PREFIX)
    if overrides:
        app.config.update(overrides)

    level = str(app.config['LOG_LEVEL']).upper()
    app.logger.setLevel(level)
    services_logger = logging.getLogger('services')
    services_logger.setLevel(level)
    services_logger.addHandler(default_handler)

    # Register all command blueprints
    register_blueprints(app)

    return app


cli = FlaskGroup(create_app=create_app, add_default_commands=False)


if __name__ == '__main__':
    cli()
