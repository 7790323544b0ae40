"""Process-wide test setup.

BLAS thread pools are pinned to one thread before numpy ever loads so
timing-sensitive checks measure single-core behaviour and repeated runs
stay bit-for-bit reproducible.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
os.environ.setdefault("NUMEXPR_NUM_THREADS", "1")
