"""Inception nnU-Net style multi-lesion CT segmentation on a small NumPy autodiff engine."""

import os as _os

# LESIONSEG_THREADS caps BLAS threads; it must be applied before numpy loads
_threads = _os.environ.get("LESIONSEG_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
