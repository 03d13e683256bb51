"""Streaming think/verbalize pipeline: runtime, dataset tooling and metrics."""

from __future__ import annotations

__version__ = "0.1.0"
