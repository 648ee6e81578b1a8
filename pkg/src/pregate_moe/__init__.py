"""Pre-gated mixture-of-experts at desk scale: refactoring, routing analysis and serving simulation."""

__version__ = "0.1.0"
