"""Graph-transformer multi-object tracking on synthetic 3D detections."""

import os as _os

# must run before numpy loads its BLAS
_threads = _os.environ.get("GRAPHMOT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ[_var] = _threads

__version__ = "0.1.0"
