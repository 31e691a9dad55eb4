from __future__ import annotations

from pathlib import Path

import numpy as np

from ..blobio import read_blob_set, write_blob_set
from .nn import Module


def save_checkpoint(module: Module, stem, meta: dict | None = None) -> Path:
    """Write parameters as a float32 blob set; returns the manifest path."""
    return write_blob_set(stem, module.state_dict(), meta)


def load_checkpoint(module: Module, stem) -> dict:
    arrays, meta = read_blob_set(stem)
    module.load_state_dict({k: np.asarray(v) for k, v in arrays.items()})
    return meta
