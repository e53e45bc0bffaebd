"""Dense real/complex arrays, centered FFTs and the ``FQT1`` tensor file format.

Real tensors are plain :class:`numpy.ndarray` objects (NCHW for images and
feature maps). Complex spectra carry their layout in :class:`ComplexSpectrum`.

Conventions used throughout the package:

* forward transforms are unnormalized, inverses carry ``1/N``;
* after centering, the zero-frequency bin of an extent ``n`` sits at
  index ``n // 2`` (the ``numpy.fft.fftshift`` layout).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.fft as sfft

MAGIC = b"FQT1"


class DimensionError(ValueError):
    """Raised when a transform is asked for dimensions the tensor lacks."""


class LayoutError(ValueError):
    """Raised when a spectrum is not in the layout an operation expects."""


@dataclass(frozen=True)
class ComplexSpectrum:
    data: np.ndarray
    centered: bool = True
    transformed_dims: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.centered and not self.transformed_dims:
            raise LayoutError("a centered spectrum needs at least one transformed dimension")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def re(self) -> np.ndarray:
        return self.data.real

    @property
    def im(self) -> np.ndarray:
        return self.data.imag

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)


def as_real(t, dtype=None) -> np.ndarray:
    """Validate ``t`` as a RealTensor: real dtype, finite values."""
    arr = np.asarray(t, dtype=dtype)
    if np.iscomplexobj(arr):
        raise TypeError("expected a real tensor, got complex data")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _complex_dtype(arr: np.ndarray):
    return np.complex64 if arr.dtype in (np.float32, np.complex64) else np.complex128


def _norm_dim(dim: int, ndim: int) -> int:
    if not -ndim <= dim < ndim:
        raise DimensionError(f"dimension {dim} out of range for rank {ndim}")
    return dim % ndim


# -- raw array kernels (also used by the differentiable ops) -----------------

def fftc(x: np.ndarray, axes: tuple) -> np.ndarray:
    """Unnormalized DFT over ``axes`` with the zero bin moved to the center."""
    x = np.asarray(x)
    out = sfft.fftn(x.astype(_complex_dtype(x), copy=False), axes=axes)
    return sfft.fftshift(out, axes=axes)


def ifftc(z: np.ndarray, axes: tuple) -> np.ndarray:
    """Inverse of :func:`fftc` (complex result, ``1/N`` normalization)."""
    z = np.asarray(z)
    return sfft.ifftn(sfft.ifftshift(z.astype(_complex_dtype(z), copy=False), axes=axes), axes=axes)


def fftc_adjoint(g: np.ndarray, axes: tuple) -> np.ndarray:
    """Adjoint (conjugate transpose) of :func:`fftc`: ``N * ifft(ifftshift(g))``."""
    n = int(np.prod([g.shape[a] for a in axes]))
    return ifftc(g, axes) * n


def ifftc_adjoint(g: np.ndarray, axes: tuple) -> np.ndarray:
    """Adjoint of :func:`ifftc`: ``fftshift(fft(g)) / N``."""
    n = int(np.prod([g.shape[a] for a in axes]))
    return fftc(g, axes) / n


# -- public transforms --------------------------------------------------------

def fft2_centered(t) -> ComplexSpectrum:
    """2-D DFT over the last two dimensions, zero frequency at ``(H//2, W//2)``."""
    arr = np.asarray(t)
    if arr.ndim < 2:
        raise DimensionError(f"fft2_centered needs at least 2 dimensions, got {arr.ndim}")
    axes = (arr.ndim - 2, arr.ndim - 1)
    return ComplexSpectrum(fftc(arr, axes), True, frozenset(axes))


def ifft2_centered(s: ComplexSpectrum, return_residual: bool = False):
    """Inverse of :func:`fft2_centered`; returns the real part.

    With ``return_residual=True`` also returns the largest discarded
    imaginary magnitude, which is ~0 for Hermitian spectra.
    """
    nd = s.data.ndim
    axes = (nd - 2, nd - 1)
    if not s.centered or not set(axes) <= set(s.transformed_dims):
        raise LayoutError("ifft2_centered expects a spectrum centered over the last two dims")
    full = ifftc(s.data, axes)
    out = np.ascontiguousarray(full.real)
    if return_residual:
        return out, float(np.max(np.abs(full.imag), initial=0.0))
    return out


def fft1_centered(t, dim: int) -> ComplexSpectrum:
    """1-D centered DFT along ``dim``."""
    arr = np.asarray(t)
    d = _norm_dim(dim, arr.ndim)
    return ComplexSpectrum(fftc(arr, (d,)), True, frozenset((d,)))


def ifft1_centered(s: ComplexSpectrum, dim: int, return_residual: bool = False):
    nd = s.data.ndim
    d = _norm_dim(dim, nd)
    if not s.centered or d not in s.transformed_dims:
        raise LayoutError(f"spectrum is not centered along dimension {dim}")
    full = ifftc(s.data, (d,))
    out = np.ascontiguousarray(full.real)
    if return_residual:
        return out, float(np.max(np.abs(full.imag), initial=0.0))
    return out


# -- FQT1 file format -------------------------------------------------------------

def _header(shape: Iterable[int]) -> bytes:
    shape = tuple(int(s) for s in shape)
    return MAGIC + struct.pack(f"<I{len(shape)}I", len(shape), *shape)


def dumps_tensor(arr) -> bytes:
    """Serialize a real or complex array (payload is little-endian float32)."""
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        payload = np.empty(arr.shape + (2,), dtype="<f4")
        payload[..., 0] = arr.real
        payload[..., 1] = arr.imag
    else:
        payload = np.ascontiguousarray(arr, dtype="<f4")
    return _header(arr.shape) + payload.tobytes(order="C")


def loads_tensor(buf: bytes) -> np.ndarray:
    """Parse ``FQT1`` bytes. Complex payloads are recognised by their size."""
    if buf[:4] != MAGIC:
        raise ValueError("not an FQT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    payload = np.frombuffer(buf, dtype="<f4", offset=offset)
    if payload.size == count:
        return payload.reshape(shape).astype(np.float32)
    if payload.size == 2 * count:
        pairs = payload.reshape(tuple(shape) + (2,))
        return (pairs[..., 0] + 1j * pairs[..., 1]).astype(np.complex64)
    raise ValueError(f"payload holds {payload.size} floats, expected {count} or {2 * count}")


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(dumps_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())
