"""Desk-scale laboratory for point-set vector-map detection.

Synthetic bird's-eye-view scenes, vector-map decomposition and resampling,
object-query generation schemes, a masked inner-instance attention decoder,
a toy end-to-end detector, and Chamfer-AP / TOPO evaluation metrics.
"""

import os

# Pin BLAS to one thread before numpy loads anywhere in this package: keeps
# training byte-deterministic and lets the ablation harness parallelize over
# processes instead.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
