"""Kernel backend selection.

In auto mode each kernel picks its measured winner: the compiled
extension for row-reduction and scatter loops (masked softmax, layernorm,
embedding gradient, the optimizer update), numpy for GELU, where the
vectorized transcendental beats a scalar loop (see
benchmarks/kernel_bench.py for the numbers). BLOCKLM_KERNELS=py|cy forces
one module uniformly; cy raises when the extension was not built.
Outputs are deterministic within one backend; the two backends agree to
float32 rounding, not bit-for-bit.
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _ckernels  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:
    _ckernels = None
    HAVE_COMPILED = False

_COMPILED_WINS = ("softmax_fwd", "softmax_bwd", "masked_softmax_fwd",
                  "masked_softmax_bwd", "layernorm_fwd", "layernorm_bwd",
                  "embedding_grad", "adamw_update")
_NUMPY_WINS = ("gelu_fwd", "gelu_bwd")

_choice = os.environ.get("BLOCKLM_KERNELS", "auto")
if _choice == "py":
    _table = {name: getattr(_kernels_py, name) for name in _COMPILED_WINS + _NUMPY_WINS}
    BACKEND = "numpy"
elif _choice == "cy":
    if not HAVE_COMPILED:
        raise ImportError("BLOCKLM_KERNELS=cy but the compiled extension is not available")
    _table = {name: getattr(_ckernels, name) for name in _COMPILED_WINS + _NUMPY_WINS}
    BACKEND = "compiled"
elif _choice == "auto":
    if HAVE_COMPILED:
        _table = {name: getattr(_ckernels, name) for name in _COMPILED_WINS}
        _table.update({name: getattr(_kernels_py, name) for name in _NUMPY_WINS})
        BACKEND = "compiled+numpy"
    else:
        _table = {name: getattr(_kernels_py, name) for name in _COMPILED_WINS + _NUMPY_WINS}
        BACKEND = "numpy"
else:
    raise ValueError(f"BLOCKLM_KERNELS must be auto|py|cy, got {_choice!r}")

gelu_fwd = _table["gelu_fwd"]
gelu_bwd = _table["gelu_bwd"]
softmax_fwd = _table["softmax_fwd"]
softmax_bwd = _table["softmax_bwd"]
masked_softmax_fwd = _table["masked_softmax_fwd"]
masked_softmax_bwd = _table["masked_softmax_bwd"]
layernorm_fwd = _table["layernorm_fwd"]
layernorm_bwd = _table["layernorm_bwd"]
embedding_grad = _table["embedding_grad"]
adamw_update = _table["adamw_update"]


def available_backends() -> dict:
    """name -> kernel module, for parity tests and the kernel benchmark."""
    out = {"numpy": _kernels_py}
    if HAVE_COMPILED:
        out["compiled"] = _ckernels
    return out
