"""Incremental layer-wise GPT training at desk scale, with exact compute accounting."""

import os

# The compiled kernels use OpenMP; spinning workers fight the BLAS threads
# for the same cores between parallel regions. Harmless if OpenMP is absent
# and only a default: an explicit environment setting wins.
os.environ.setdefault("OMP_WAIT_POLICY", "passive")

__version__ = "0.1.0"
