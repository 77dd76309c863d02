"""Offline feature extraction: run pre-trained visual and textual encoders
over entity images and descriptions and emit MMTK token banks.

This package talks to the graph-completion engine only through files (the
MMTK bank format and the engine's command line); it never imports it.
"""

from .errors import ConfigError, DataError, FeatxError, ManifestError, ModelDirError

__all__ = [
    "ConfigError",
    "DataError",
    "FeatxError",
    "ManifestError",
    "ModelDirError",
]
