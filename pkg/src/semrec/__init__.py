"""Semantic-ID sequential recommendation at desk scale."""
import os

# BLAS thread pools can reorder float reductions; pin to one thread so runs
# are bit-reproducible. Only effective if numpy has not been imported yet.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
