"""
Commands Package - Initialize all command blueprints
"""

from .dataset_commands import dataset_bp
from .model_commands import model_bp
from .report_commands import report_bp


def register_blueprints(app):
    """Register all command blueprints with the Flask app."""
    app.register_blueprint(dataset_bp)
    app.register_blueprint(model_bp)
    app.register_blueprint(report_bp)
