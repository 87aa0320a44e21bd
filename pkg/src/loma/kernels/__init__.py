"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled Cython module is used when it imports cleanly. Set
``LOMA_KERNELS=python`` to force the fallback, or ``LOMA_KERNELS=cython``
to make a missing extension an import error.
"""

import importlib
import os

from . import _pykernels

_NAMES = (
    "softmax_fwd",
    "softmax_bwd",
    "rmsnorm_fwd",
    "rmsnorm_bwd",
    "rope_apply",
    "xent_fwd",
    "embed_bwd",
)


def _load_compiled():
    try:
        return importlib.import_module(f"{__name__}._ckernels")
    except ImportError:
        return None


_compiled = _load_compiled()


def available_backends():
    return ["python"] + (["cython"] if _compiled is not None else [])


def get_backend(name):
    """Return the kernel module for ``name`` ('python' or 'cython')."""
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def use_backend(name):
    """Rebind the module-level kernels to ``name``; returns the previous backend."""
    global BACKEND
    impl = get_backend(name)
    previous, BACKEND = globals().get("BACKEND"), name
    globals().update({n: getattr(impl, n) for n in _NAMES})
    return previous


_choice = os.environ.get("LOMA_KERNELS", "auto").lower()
use_backend(("cython" if _compiled is not None else "python") if _choice == "auto" else _choice)

__all__ = ["BACKEND", "available_backends", "get_backend", "use_backend", *_NAMES]
