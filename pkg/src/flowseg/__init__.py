"""flowseg: memory-conditioned one-prompt segmentation over image flows."""
import os

# The float64 tensor core runs on many small BLAS calls; multithreaded
# BLAS is 2-3x slower at these sizes and thread scheduling is the one
# nondeterminism source we can remove. Pin before numpy spins up a pool.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

try:
    import threadpoolctl as _tpc

    _tpc.threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - env var fallback above still applies
    pass

__version__ = "0.1.0"
