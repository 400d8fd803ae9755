"""Python access to the halluscope core: caches, signals, metrics and the CLI."""

import json

from . import _core
from ._core import HalluscopeError, apply_temperature, cache_ids, fit_isotonic, ks_distance, roc_auc, synth

__all__ = [
    "HalluscopeError",
    "apply_temperature",
    "cache_ids",
    "fit_isotonic",
    "ks_distance",
    "load_sample",
    "raw_signals",
    "roc_auc",
    "run",
    "synth",
    "validate",
]


def load_sample(cache_dir, sample_id):
    """One sample of a cache as an inline-capture dict."""
    return json.loads(_core.load_sample(str(cache_dir), sample_id))


def validate(sample):
    """List of (code, message) violations; empty when the capture is valid."""
    return _core.validate(json.dumps(sample))


def raw_signals(cache_dir, s8_source="metadata"):
    """(values, columns, sample_ids); values is a float64 array of shape (n, d)."""
    return _core.raw_signals(str(cache_dir), s8_source)


def run(*args):
    """Runs a CLI command line, e.g. run("--config", "c.json", "extract"). Returns the exit code."""
    return _core.run([str(a) for a in args])
