"""Actor Relation Graph engine for group-activity recognition."""

__version__ = "0.1.0"
