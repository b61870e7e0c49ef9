"""Global-to-local block language model at desk scale.

Three-component hierarchical LM (embedder, block decoder, token decoder)
next to a vanilla baseline, a two-stage cached inference engine, an
analytical inference cost model, and a training/benchmark harness, all on
a small float32 tensor backend with reverse-mode differentiation.
"""

from .backend import BACKEND, HAVE_COMPILED

__version__ = "0.1.0"

__all__ = ["BACKEND", "HAVE_COMPILED", "__version__"]
