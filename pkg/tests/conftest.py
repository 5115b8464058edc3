import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import hypothesis

hypothesis.settings.register_profile(
    "default", deadline=None, print_blob=True, derandomize=True
)
hypothesis.settings.load_profile("default")
