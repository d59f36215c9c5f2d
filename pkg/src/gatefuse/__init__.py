"""Instruction-driven two-level gated fusion of multimodal token streams."""

import os as _os

_threads = _os.environ.get("GATEFUSE_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
