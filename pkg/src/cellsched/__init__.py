"""Resource-cell customization and channel orchestration for edge-cloud dispatch."""

__version__ = "0.1.0"
