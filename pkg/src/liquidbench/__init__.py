"""liquidbench: desk-scale comparison of a liquid (CfC + mixture-density) policy
head against a DDPM diffusion head over a shared frozen backbone.

Importing this package caps BLAS worker threads (default 1, override with
LIQUIDBENCH_THREADS) so that training and evaluation are bit-reproducible.
The cap only takes effect if numpy has not been imported yet.
"""

import os

_threads = os.environ.get("LIQUIDBENCH_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
