"""Static figure reports from socialdrive CSV/JSON/JSONL exports."""

from .render import ReportManifest, render  # noqa: F401

__version__ = "0.1.0"
