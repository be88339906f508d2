"""Dense tensor primitives: unfolding, folding, mode products, kernel reshapes.

Conventions used throughout the package:

* Tensors are plain ``numpy`` arrays. The element linearization is
  column-major ("first index varies fastest"), and every reshape in this
  module uses ``order="F"`` so that unfold/fold/reshape all agree on it.
* ``unfold(t, n)`` produces a matrix with ``t.shape[n]`` rows whose columns
  run over the remaining indices, lower-numbered modes varying fastest.
* Convolution kernels are 4-way arrays indexed ``(h, w, c_out, c_in)`` with
  a square ``h == w`` spatial filter. The 3-way reshaped form merges the two
  spatial modes into a single leading mode of extent ``h * w``.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "unfold",
    "fold",
    "mode_product",
    "reshape_kernel",
    "restore_kernel",
    "rel_error",
    "frobenius",
]


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Matricize ``t`` along ``mode``.

    Rows are the mode-``mode`` fibers; columns are ordered by the remaining
    indices with lower-numbered modes varying fastest.
    """
    t = np.asarray(t)
    if not 0 <= mode < t.ndim:
        raise IndexError(f"mode {mode} out of range for a {t.ndim}-way tensor")
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def fold(m: np.ndarray, mode: int, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`unfold`: rebuild a tensor of ``shape`` from ``m``."""
    m = np.asarray(m)
    shape = tuple(int(s) for s in shape)
    if not 0 <= mode < len(shape):
        raise IndexError(f"mode {mode} out of range for shape {shape}")
    rest = shape[:mode] + shape[mode + 1 :]
    expected = (shape[mode], int(np.prod(rest, dtype=np.int64)) if rest else 1)
    if m.ndim != 2 or m.shape != expected:
        raise ValueError(
            f"matrix of shape {m.shape} cannot fold into {shape} along mode "
            f"{mode} (expected {expected})"
        )
    return np.moveaxis(np.reshape(m, (shape[mode],) + rest, order="F"), 0, mode)


def mode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Multiply tensor ``t`` along ``mode`` by matrix ``m``.

    The extent of ``t`` at ``mode`` must equal ``m.shape[1]``; the result has
    extent ``m.shape[0]`` there. Equivalent to folding ``m @ unfold(t, mode)``.
    """
    t = np.asarray(t)
    m = np.asarray(m)
    if not 0 <= mode < t.ndim:
        raise IndexError(f"mode {mode} out of range for a {t.ndim}-way tensor")
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ValueError(
            f"matrix of shape {m.shape} does not act on mode {mode} of extent "
            f"{t.shape[mode]}"
        )
    return np.moveaxis(np.tensordot(m, t, axes=(1, mode)), 0, mode)


def reshape_kernel(k: np.ndarray) -> np.ndarray:
    """Merge the two spatial modes of a ``(d, d, c_out, c_in)`` kernel.

    Returns a ``(d*d, c_out, c_in)`` array; the merged index runs over the
    spatial positions with the first spatial mode varying fastest. Exact
    inverse is :func:`restore_kernel`.
    """
    k = np.asarray(k)
    if k.ndim != 4:
        raise ValueError(f"expected a 4-way kernel, got {k.ndim} modes")
    if k.shape[0] != k.shape[1]:
        raise ValueError(f"spatial filter must be square, got {k.shape[:2]}")
    d, _, c_out, c_in = k.shape
    return np.reshape(k, (d * d, c_out, c_in), order="F")


def restore_kernel(k3: np.ndarray) -> np.ndarray:
    """Split the merged spatial mode of a ``(d*d, c_out, c_in)`` tensor."""
    k3 = np.asarray(k3)
    if k3.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got {k3.ndim} modes")
    d = math.isqrt(k3.shape[0])
    if d * d != k3.shape[0]:
        raise ValueError(f"leading extent {k3.shape[0]} is not a perfect square")
    return np.reshape(k3, (d, d, k3.shape[1], k3.shape[2]), order="F")


def frobenius(t: np.ndarray) -> float:
    """Frobenius norm of an arbitrary-order tensor."""
    return float(np.linalg.norm(np.asarray(t).ravel()))


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Relative Frobenius error ``||a - b|| / ||a||``.

    When ``||a|| == 0`` the value ``||b||`` is returned instead, so the result
    is still zero iff the tensors are identical.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = frobenius(a)
    if na == 0.0:
        return frobenius(b)
    return frobenius(a - b) / na
