"""Hot-kernel backend selection.

The matching server spends its time summing 8-part ciphertext dot products
over offer/request pairs. Those reductions live here with two
implementations: a numpy one and a compiled Cython extension. Benchmarks
(`ridecloak bench kernels`) show numpy's BLAS-backed reductions ahead at
the shapes matching produces, so numpy is the default; the extension is
kept for numpy builds without a tuned BLAS and is selected with
RIDECLOAK_KERNELS=compiled (which raises if the extension is missing
rather than silently falling back). RIDECLOAK_KERNELS=python forces the
default explicitly.
"""

from __future__ import annotations

import os

from . import reference

_FORCED = os.environ.get("RIDECLOAK_KERNELS", "").strip().lower()

if _FORCED not in ("", "python", "compiled"):
    raise RuntimeError(f"RIDECLOAK_KERNELS must be 'python' or 'compiled', got {_FORCED!r}")

if _FORCED == "compiled":
    try:
        from . import _simcore as _impl  # type: ignore[attr-defined]
    except ImportError as exc:
        raise RuntimeError("RIDECLOAK_KERNELS=compiled but the extension is not built") from exc
    BACKEND = "compiled"
else:
    _impl = reference
    BACKEND = "python"

paired_dots = _impl.paired_dots
cross_dots = _impl.cross_dots

__all__ = ["BACKEND", "paired_dots", "cross_dots", "reference"]
