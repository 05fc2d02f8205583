"""Causal transformers for vehicle diagnostic event streams.

Setting ``DTCFORMER_DETERMINISTIC=1`` pins BLAS to a single thread so
repeated runs reproduce bit for bit. It must be set before numpy is first
imported, which importing this package first guarantees.
"""

import os

DETERMINISTIC_ENV = "DTCFORMER_DETERMINISTIC"

if os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0", "false", "False"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[_var] = "1"

__version__ = "0.1.0"
