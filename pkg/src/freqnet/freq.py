"""High-frequency extraction and frequency-domain convolution.

``hfri`` works on raw image arrays; ``hfrf_spatial``, ``hfrf_channel`` and
``fcl`` are differentiable and take/return :class:`~freqnet.autodiff.Variable`.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import tensor as T

CARTESIAN = "cartesian"
POLAR = "polar"


@dataclass(frozen=True)
class FilterSpec:
    cut_fraction: Fraction = Fraction(1, 4)
    dims: str = "spatial"  # or "channel"

    def __post_init__(self):
        if not 0 < self.cut_fraction < Fraction(1, 2):
            raise ValueError(f"cut_fraction must lie in (0, 1/2), got {self.cut_fraction}")
        if self.dims not in ("spatial", "channel"):
            raise ValueError(f"dims must be 'spatial' or 'channel', got {self.dims!r}")


DEFAULT_SPEC = FilterSpec()


def _band(n: int, frac: Fraction) -> np.ndarray:
    # True where |i - n//2| < n*frac, compared exactly in rationals
    off = np.abs(np.arange(n) - n // 2)
    lim = Fraction(n) * Fraction(frac)
    return np.array([Fraction(int(o)) < lim for o in off], dtype=bool)


@lru_cache(maxsize=64)
def _mask2(h: int, w: int, frac: Fraction) -> np.ndarray:
    low = _band(h, frac)[:, None] & _band(w, frac)[None, :]
    m = (~low).astype(np.float64)
    m.flags.writeable = False
    return m


@lru_cache(maxsize=64)
def _mask1(n: int, frac: Fraction) -> np.ndarray:
    m = (~_band(n, frac)).astype(np.float64)
    m.flags.writeable = False
    return m


def highpass_mask(h: int, w: int, spec: FilterSpec = DEFAULT_SPEC) -> np.ndarray:
    """h×w {0,1} mask zeroing the central low-frequency rectangle of a centered spectrum."""
    if h < 1 or w < 1:
        raise ValueError("mask extents must be positive")
    return _mask2(int(h), int(w), Fraction(spec.cut_fraction)).copy()


def channel_mask(c: int, spec: FilterSpec = DEFAULT_SPEC) -> np.ndarray:
    """Length-c {0,1} mask zeroing channel-frequency offsets ``|k| < c * cut_fraction``."""
    if c < 1:
        raise ValueError("channel count must be positive")
    return _mask1(int(c), Fraction(spec.cut_fraction)).copy()


def hfri(x, spec: FilterSpec = DEFAULT_SPEC) -> np.ndarray:
    """High-pass residual of an image batch (FFT, central block zeroed, iFFT, real part)."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise T.DimensionError("hfri needs at least 2 dimensions")
    h, w = x.shape[-2:]
    s = T.fft2_centered(x)
    s = T.ComplexSpectrum(s.data * _mask2(h, w, Fraction(spec.cut_fraction)), True, s.transformed_dims)
    return T.ifft2_centered(s).astype(x.dtype, copy=False)


def hfrf_spatial(m, spec: FilterSpec = DEFAULT_SPEC) -> ad.Variable:
    m = ad._v(m)
    if m.value.ndim != 4:
        raise ad.ShapeError(f"hfrf_spatial expects N×C×H×W, got {m.shape}")
    h, w = m.shape[-2:]
    if h < 2 or w < 2:
        raise ad.ShapeError("hfrf_spatial needs H, W >= 2")
    z = ad.fftc(m, (-2, -1))
    z = ad.mask(z, _mask2(h, w, Fraction(spec.cut_fraction)))
    return ad.ifftc_real(z, (-2, -1))


def hfrf_channel(m, spec: FilterSpec = DEFAULT_SPEC) -> ad.Variable:
    m = ad._v(m)
    if m.value.ndim != 4:
        raise ad.ShapeError(f"hfrf_channel expects N×C×H×W, got {m.shape}")
    c = m.shape[1]
    if c < 2:
        raise ad.ShapeError("hfrf_channel needs C >= 2")
    z = ad.fftc(m, (1,))
    z = ad.mask(z, _mask1(c, Fraction(spec.cut_fraction))[:, None, None])
    return ad.ifftc_real(z, (1,))


@dataclass
class FclParams:
    """1×1 spectral convolutions for the two spectrum components."""

    w_am: ad.Variable
    b_am: ad.Variable
    w_ph: ad.Variable
    b_ph: ad.Variable

    def __post_init__(self):
        if self.w_am.shape != self.w_ph.shape:
            raise ad.ShapeError("w_am and w_ph must have identical shapes")

    @property
    def channels(self) -> int:
        return self.w_am.shape[1]

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "FclParams":
        eye = np.eye(channels, dtype=dtype)[:, :, None, None]
        zero = np.zeros(channels, dtype=dtype)
        return cls(ad.Variable(eye.copy(), True), ad.Variable(zero.copy(), True),
                   ad.Variable(eye.copy(), True), ad.Variable(zero.copy(), True))


def fcl(m, p: FclParams, mode: str = CARTESIAN) -> ad.Variable:
    """Learn in the spectrum: FFT over (H, W), conv each component, iFFT, real part.

    ``cartesian`` splits the spectrum into real and imaginary grids;
    ``polar`` into magnitude and angle and recombines as ``amp * exp(i*phase)``.
    """
    m = ad._v(m)
    if m.value.ndim != 4:
        raise ad.ShapeError(f"fcl expects N×C×H×W, got {m.shape}")
    if p.channels != m.shape[1] or p.w_am.shape[0] != m.shape[1]:
        raise ad.ShapeError(f"fcl params expect {p.channels} channels, feature map has {m.shape[1]}")
    f = ad.fftc(m, (-2, -1))
    if mode == CARTESIAN:
        a, b = ad.real(f), ad.imag(f)
    elif mode == POLAR:
        a, b = ad.absolute(f), ad.angle(f)
    else:
        raise ValueError(f"unknown fcl mode {mode!r}")
    a = ad.conv2d(a, p.w_am, p.b_am)
    b = ad.conv2d(b, p.w_ph, p.b_ph)
    g = ad.to_complex(a, b) if mode == CARTESIAN else ad.polar(a, b)
    return ad.ifftc_real(g, (-2, -1))
