"""Exception hierarchy shared across the toolkit.

Every error carries a short machine-readable ``code`` so the CLI can emit
``error: <code>: <message>`` lines with a stable vocabulary.
"""

from __future__ import annotations


class DnetError(Exception):
    """Base class for all toolkit errors."""

    code = "internal"


class ShapeError(DnetError):
    """Operand shapes violate an operation's contract."""

    code = "shape"


class GraphError(DnetError):
    """Malformed computation graph (cycle, bad ordering, missing loss)."""

    code = "graph"


class ConfigError(DnetError):
    """Invalid configuration value or file."""

    code = "config"


class PnmError(DnetError):
    """Malformed or unsupported PGM/PPM data."""

    code = "pnm"


class ManifestError(DnetError):
    """Dataset manifest refers to missing or inconsistent files."""

    code = "manifest"


class CheckpointError(DnetError):
    """Checkpoint file is malformed or does not match the model."""

    code = "checkpoint"
