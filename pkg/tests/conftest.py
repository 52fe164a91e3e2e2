import os

# single-threaded BLAS before numpy loads, so bitwise determinism checks hold
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, os.environ.get("LANGSEG_THREADS", "1"))
