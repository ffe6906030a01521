"""Backend selection for the hot kernels.

Two implementations of every hot loop ship with the package: a compiled
path built on numba and a vectorized pure-numpy path.  Both consume the
same counter-based random streams, so results agree across backends (bit
exact for integer streams, to float roundoff for reductions).

The active backend is chosen once per process from the environment
variable GFF_THINLAB_BACKEND:

    auto   use numba when importable, numpy otherwise (default)
    numba  require numba, raise if missing
    numpy  force the pure-numpy path
"""

import os

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        """Fallback decorator: leaves the function as plain Python."""

        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_VALID = ("auto", "numba", "numpy")


def backend_name():
    """Resolve the active backend name ('numba' or 'numpy')."""
    mode = os.environ.get("GFF_THINLAB_BACKEND", "auto").strip().lower()
    if mode not in _VALID:
        raise ValueError(
            "GFF_THINLAB_BACKEND must be one of %s, got %r" % (_VALID, mode)
        )
    if mode == "numba" and not HAVE_NUMBA:
        raise RuntimeError("GFF_THINLAB_BACKEND=numba but numba is not installed")
    if mode == "auto":
        return "numba" if HAVE_NUMBA else "numpy"
    return mode


def use_numba():
    return backend_name() == "numba"
