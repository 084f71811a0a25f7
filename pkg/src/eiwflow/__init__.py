"""Multi-scale normalizing flow with entropy-informed channel shuffling."""
import os

# EIWFLOW_THREADS caps BLAS/OpenMP threads; it only takes effect if numpy
# has not been imported yet
_threads = os.environ.get("EIWFLOW_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

from .tensor import Tensor, backward  # noqa: E402,F401

__version__ = "0.1.0"
