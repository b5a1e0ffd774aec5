"""Command-line pipeline, configuration and checkpoint container."""

from .checkpoint import FORMAT_VERSION, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .main import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

__all__ = [
    "EXIT_DATA",
    "EXIT_NUMERIC",
    "EXIT_OK",
    "EXIT_USAGE",
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointError",
    "PipelineConfig",
    "load_checkpoint",
    "main",
    "save_checkpoint",
]
