"""Corpus loading, image decoding, the synthetic upsampling-artifact corpus
and mean log-magnitude spectra.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .train import Dataset

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
IMAGE_SUFFIXES = (".png", ".ppm")
LUMA = np.array([0.299, 0.587, 0.114])


class DecodeError(ValueError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    source: str


@dataclass
class CorpusManifest:
    root: Path
    records: list
    rejects: list = field(default_factory=list)  # (path, reason)

    def resolve(self, rec: Record) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() else self.root / p

    def select(self, label=None) -> list:
        return [r for r in self.records if label is None or r.label == label]

    def counts(self) -> dict:
        return {lab: sum(r.label == lab for r in self.records) for lab in (0, 1)}


def _looks_like_image(path: Path) -> str:
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        return f"unreadable: {exc.strerror}"
    if head.startswith(b"\x89PNG\r\n\x1a\n") or head.startswith(b"P6"):
        return ""
    return "not a PNG or binary PPM file"


def read_manifest(path) -> list:
    records = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(",", 2)
        if len(parts) != 3 or parts[1].strip() not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'path,label,source' with label 0 or 1")
        records.append(Record(parts[0].strip(), int(parts[1]), parts[2].strip()))
    return records


def write_manifest(records, path) -> None:
    text = "".join(f"{r.path},{r.label},{r.source}\n" for r in records)
    Path(path).write_text(text, encoding="utf-8")


def load_corpus(root, layout: str = "auto") -> CorpusManifest:
    """Index a corpus from ``root/{real,fake}/...`` or from ``root/manifest.txt``.

    ``layout`` is ``"dirs"``, ``"manifest"`` or ``"auto"`` (manifest if present).
    Records are sorted by path; files that are missing or not images are
    collected in ``rejects`` instead of failing the load.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    if layout == "auto":
        layout = "manifest" if (root / MANIFEST_NAME).is_file() else "dirs"
    if layout == "manifest":
        candidates = read_manifest(root / MANIFEST_NAME)
    elif layout == "dirs":
        candidates = []
        for label, cls in ((0, "real"), (1, "fake")):
            d = root / cls
            if not d.is_dir():
                raise FileNotFoundError(f"missing class directory {d}")
            for p in d.rglob("*"):
                if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
                    rel = p.relative_to(root)
                    nested = rel.parts[1:-1]
                    candidates.append(Record(rel.as_posix(), label, nested[0] if nested else "default"))
    else:
        raise ValueError(f"unknown corpus layout {layout!r}")
    manifest = CorpusManifest(root, [])
    for rec in sorted(candidates, key=lambda r: r.path):
        reason = _looks_like_image(manifest.resolve(rec))
        if reason:
            manifest.rejects.append((rec.path, reason))
        else:
            manifest.records.append(rec)
    for path, reason in manifest.rejects:
        log.warning("rejected %s: %s", path, reason)
    return manifest


# -- decoding ---------------------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an H×W×C array with half-pixel center alignment."""
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def taps(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = taps(in_h, out_h)
    c0, c1, fc = taps(in_w, out_w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def fit_square(img: np.ndarray, size: int) -> np.ndarray:
    """Scale the shorter side to ``size`` then center-crop to size×size."""
    h, w = img.shape[:2]
    short = min(h, w)
    nh, nw = (size, round(w * size / short)) if h == short else (round(h * size / short), size)
    img = bilinear_resize(img, nh, nw)
    top, left = (nh - size) // 2, (nw - size) // 2
    return img[top:top + size, left:left + size]


def read_pixels(path) -> np.ndarray:
    """Decode a PNG/PPM file to an H×W×3 uint8 array."""
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise DecodeError(path, f"unsupported format {im.format}")
            if im.mode not in ("1", "L", "LA", "P", "RGB", "RGBA"):
                raise DecodeError(path, f"unsupported pixel mode {im.mode} (8-bit only)")
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except DecodeError:
        raise
    except (OSError, ValueError, SyntaxError) as exc:
        raise DecodeError(path, str(exc)) from exc


def decode_image(path, size: int) -> np.ndarray:
    """Read an 8-bit PNG or PPM as a float32 3×S×S tensor in [0, 1]."""
    px = read_pixels(path).astype(np.float64) / 255.0
    px = fit_square(px, size)
    return np.clip(px, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def load_dataset(manifest: CorpusManifest, size: int, records=None) -> Dataset:
    records = manifest.records if records is None else records
    images = np.zeros((len(records), 3, size, size), dtype=np.float32)
    for i, rec in enumerate(records):
        images[i] = decode_image(manifest.resolve(rec), size)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return Dataset(images, labels, [r.source for r in records])


def write_png(path, arr) -> None:
    """Save a [0,1] float array (H×W or 3×H×W) as 8-bit PNG."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)).save(path, format="PNG")


# -- synthetic corpus ---------------------------------------------------------------------

def smooth_sigma(size: int) -> float:
    return size / 12.0


def smooth_noise_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """3×S×S float image: wrapped Gaussian-filtered white noise with a random palette."""
    sigma = smooth_sigma(size)
    noise = rng.standard_normal((3, size, size))
    field_ = np.stack([gaussian_filter(ch, sigma, mode="wrap") for ch in noise])
    lo_f = field_.min(axis=(1, 2), keepdims=True)
    hi_f = field_.max(axis=(1, 2), keepdims=True)
    unit = (field_ - lo_f) / np.maximum(hi_f - lo_f, 1e-12)
    lo = rng.uniform(0.0, 0.5, (3, 1, 1))
    hi = rng.uniform(0.5, 1.0, (3, 1, 1))
    return lo + (hi - lo) * unit


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def nn_upsample_fake(img: np.ndarray) -> np.ndarray:
    """2×2 average-pool, quantize, then nearest-neighbour ×2 (H×W×3 uint8 result)."""
    c, h, w = img.shape
    small = img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    small = to_uint8(small)
    return small.repeat(2, axis=0).repeat(2, axis=1)


def synth_corpus(out_root, n_per_class: int, size: int, seed: int) -> CorpusManifest:
    """Write ``real/`` and ``fake/`` PNGs plus ``manifest.txt``; deterministic in ``seed``."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if size < 2 or size % 2:
        raise ValueError("size must be even and >= 2")
    root = Path(out_root)
    records = []
    for label, cls in ((0, "real"), (1, "fake")):
        (root / cls).mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, label, i])
            img = smooth_noise_image(rng, size)
            px = to_uint8(img) if label == 0 else nn_upsample_fake(img)
            rel = f"{cls}/{cls}_{i:05d}.png"
            Image.fromarray(px).save(root / rel, format="PNG")
            records.append(Record(rel, label, "synthetic"))
    records.sort(key=lambda r: r.path)
    write_manifest(records, root / MANIFEST_NAME)
    return CorpusManifest(root, records)


def replica_offsets(size: int) -> list:
    """Centered-spectrum offsets where ×2 nearest-neighbour replicas peak.

    Replicas of the baseband sit at ±S/2 on each axis but the 2×2 hold
    notches their exact centers; the peak lies ``j`` bins inward, where
    ``j`` maximizes the hold-filter × average-pool × Gaussian-smoothing
    envelope ``sin(2πj/S) · exp(-2π²σ²j²/S²)``.
    """
    sigma = smooth_sigma(size)
    j = np.arange(1, size // 4 + 1)
    env = np.sin(2 * np.pi * j / size) * np.exp(-2 * np.pi ** 2 * sigma ** 2 * j ** 2 / size ** 2)
    k = size // 2 - int(j[np.argmax(env)])
    out = []
    for a in (-k, 0, k):
        for b in (-k, 0, k):
            if (a, b) != (0, 0):
                out.append((a, b))
    return out


def peak_ratio(grid: np.ndarray, offset) -> float:
    """Value at a centered offset over the mean of its wrapped 5×5 neighbourhood."""
    h, w = grid.shape
    i = (h // 2 + offset[0]) % h
    j = (w // 2 + offset[1]) % w
    rows = (np.arange(i - 2, i + 3)) % h
    cols = (np.arange(j - 2, j + 3)) % w
    hood = grid[np.ix_(rows, cols)].mean()
    return float(grid[i, j] / hood) if hood > 0 else float("inf")


# -- spectrum analysis ------------------------------------------------------------------------

@dataclass
class SpectrumImage:
    grid: np.ndarray  # H×W mean of log(1 + |F|)
    count: int

    def save(self, out_dir, stem: str = "spectrum") -> tuple:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        T.save_tensor(d / f"{stem}.fqt", self.grid)
        g = self.grid
        span = g.max() - g.min()
        write_png(d / f"{stem}.png", (g - g.min()) / span if span > 0 else np.zeros_like(g))
        return d / f"{stem}.fqt", d / f"{stem}.png"


def log_spectrum(image: np.ndarray) -> np.ndarray:
    gray = np.tensordot(LUMA, np.asarray(image, dtype=np.float64), axes=(0, 0))
    return np.log1p(T.fft2_centered(gray).magnitude())


def mean_spectrum(manifest: CorpusManifest, n: int, size: int, label=None, records=None,
                  chunk: int = 64) -> SpectrumImage:
    """Average ``log(1 + |FFT(luma)|)`` over up to ``n`` images.

    Images are taken in path order, and partial sums are formed per
    fixed-size chunk, so the result does not depend on input order.
    """
    pool = manifest.select(label) if records is None else list(records)
    pool = sorted(pool, key=lambda r: r.path)
    if not pool:
        raise ValueError("no images to average")
    if len(pool) < n:
        log.warning("requested %d images, only %d available; using all", n, len(pool))
    chosen = pool[:n]
    partials = []
    for start in range(0, len(chosen), chunk):
        acc = np.zeros((size, size))
        for rec in chosen[start:start + chunk]:
            acc += log_spectrum(decode_image(manifest.resolve(rec), size))
        partials.append(acc)
    while len(partials) > 1:
        partials = [partials[i] + partials[i + 1] if i + 1 < len(partials) else partials[i]
                    for i in range(0, len(partials), 2)]
    return SpectrumImage(partials[0] / len(chosen), len(chosen))
