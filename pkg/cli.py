"""Launcher for the trusttune command line."""

import os
import sys

# one BLAS thread keeps fp64 reductions identical across runs and worker counts
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from trusttune.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
