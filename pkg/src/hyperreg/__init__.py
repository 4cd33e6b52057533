"""hyperreg: hypernetwork-amortized hyperparameter learning for 2D deformable registration."""

import os


def configure_threads():
    """Cap BLAS/numba parallelism from HYPERREG_THREADS (run before heavy math)."""
    n = os.environ.get("HYPERREG_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, n)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(n))
    except ImportError:
        pass


configure_threads()

__version__ = "0.1.0"
