import os

# Pin BLAS to one thread before numpy loads: deterministic and, on small
# matrices, faster than oversubscribed thread pools.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
