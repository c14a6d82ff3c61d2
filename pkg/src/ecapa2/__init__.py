"""ECAPA2 speaker embeddings on a small numpy autodiff engine.

Submodules are imported on demand so that the command-line entry point can
pin BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
