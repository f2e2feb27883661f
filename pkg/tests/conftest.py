import os

# Single-threaded BLAS: the toy matmuls are too small to gain from threads,
# and timing-sensitive tests need the lower variance. Must be set before
# numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
