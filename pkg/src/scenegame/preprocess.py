"""Image enhancement: histogram equalization, ideal-mask DFT filtering,
one-level Haar enhancement, and the least-squares bias model.

Equalization uses integer arithmetic throughout so the mapping is bit-exact.
"""

from dataclasses import dataclass

import numpy as np

from .image import Image

HAAR_GAIN_GRID = (1.0, 1.25, 1.5, 2.0)


@dataclass(frozen=True)
class HistogramSpec:
    """256-bin histogram with its cumulative distribution."""

    counts: np.ndarray  # (256,) int
    cdf: np.ndarray     # (256,) float in [0, 1], nondecreasing, last == 1

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        cdf = np.asarray(self.cdf, dtype=np.float64)
        if counts.shape != (256,) or cdf.shape != (256,):
            raise ValueError("histogram requires 256 bins")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "cdf", cdf)


@dataclass(frozen=True)
class BiasModel:
    """Least-squares line fit: intercept, slope, residuals, and their sum of squares."""

    intercept: float
    slope: float
    residuals: np.ndarray
    sse: float


def compute_histogram(img: Image) -> HistogramSpec:
    flat = img.plane().ravel()
    counts = np.bincount(flat, minlength=256)
    cdf = np.cumsum(counts) / flat.size
    return HistogramSpec(counts=counts, cdf=cdf)


def equalize(img: Image) -> Image:
    """Histogram-equalize a grayscale image.

    out(v) = floor((cdf(v) - cdf_min) / (1 - cdf_min) * 255) with cdf_min the
    cdf of the lowest occupied bin. Constant images come back unchanged
    (the formula degenerates to 0/0 there).
    """
    plane = img.plane()
    counts = np.bincount(plane.ravel(), minlength=256)
    cum = np.cumsum(counts)
    total = int(cum[-1])
    cum_min = int(cum[np.nonzero(counts)[0][0]])
    if cum_min == total:  # single occupied bin: constant image
        return Image(plane)
    # Integer form of the mapping; exact floor, no float rounding.
    lut = (cum - cum_min) * 255 // (total - cum_min)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return Image(lut[plane])


def histogram_entropy(img: Image) -> float:
    """Shannon entropy (bits) of the 256-bin intensity histogram."""
    counts = np.bincount(img.plane().ravel(), minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def dft_enhance(img: Image, mode: str, cutoff: float) -> Image:
    """Ideal circular-mask frequency filtering of a grayscale image.

    cutoff in (0, 1] is the fraction of the maximum representable frequency
    radius (the corner of the Nyquist square), so cutoff = 1 keeps the whole
    spectrum. Lowpass keeps radii <= cutoff (always including the
    zero-frequency term, i.e. the mean gray level); highpass keeps the rest.
    """
    if mode not in ("lowpass", "highpass"):
        raise ValueError(f"mode must be 'lowpass' or 'highpass', got {mode!r}")
    if not 0.0 < cutoff <= 1.0:
        raise ValueError(f"cutoff must be in (0, 1], got {cutoff}")
    plane = img.plane().astype(np.float64)
    h, w = plane.shape
    fy = np.fft.fftfreq(h)  # cycles/sample in [-0.5, 0.5)
    fx = np.fft.fftfreq(w)
    # Normalized squared radius: 1 at the (Nyquist, Nyquist) corner.
    r2 = (2.0 * fy[:, None]) ** 2 / 2.0 + (2.0 * fx[None, :]) ** 2 / 2.0
    keep = r2 <= cutoff * cutoff + 1e-12
    if mode == "highpass":
        keep = ~keep
    spectrum = np.fft.fft2(plane) * keep
    out = np.real(np.fft.ifft2(spectrum))
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def haar_forward(plane: np.ndarray):
    """One-level orthonormal 2-D Haar split into (ll, lh, hl, hh) subbands.

    Requires even dimensions. Exact for integer input (coefficients are
    half-integers), so the transform pair reconstructs perfectly.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.shape[0] % 2 or plane.shape[1] % 2:
        raise ValueError("Haar transform requires even width and height")
    a = plane[0::2, 0::2]
    b = plane[0::2, 1::2]
    c = plane[1::2, 0::2]
    d = plane[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def haar_inverse(ll, lh, hl, hh) -> np.ndarray:
    """Inverse of haar_forward (the transform is its own inverse up to layout)."""
    h2, w2 = ll.shape
    out = np.empty((h2 * 2, w2 * 2), dtype=np.float64)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def haar_enhance(img: Image) -> Image:
    """Wavelet enhancement: equalize the approximation band, boost the detail
    bands by the gain (from a fixed grid) that maximizes the histogram entropy
    of the reconstruction.
    """
    plane = img.plane()
    ll, lh, hl, hh = haar_forward(plane)
    # ll is twice the 2x2 block mean; map to 0..255, equalize, map back.
    ll_img = Image(np.clip(np.rint(ll / 2.0), 0, 255).astype(np.uint8))
    ll_eq = equalize(ll_img).plane().astype(np.float64) * 2.0

    best = None
    best_entropy = -1.0
    for gain in HAAR_GAIN_GRID:
        recon = haar_inverse(ll_eq, gain * lh, gain * hl, gain * hh)
        candidate = Image(np.clip(np.rint(recon), 0, 255).astype(np.uint8))
        entropy = histogram_entropy(candidate)
        if entropy > best_entropy:
            best_entropy = entropy
            best = candidate
    return best


def fit_bias(xs, ys) -> BiasModel:
    """Closed-form least squares for y = intercept + slope * x."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or ys.ndim != 1 or xs.size != ys.size:
        raise ValueError("xs and ys must be 1-D and the same length")
    if xs.size < 2:
        raise ValueError("need at least 2 samples")
    x_mean = xs.mean()
    y_mean = ys.mean()
    sxx = float(((xs - x_mean) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("xs are all equal; the slope is undefined")
    slope = float(((xs - x_mean) * (ys - y_mean)).sum()) / sxx
    intercept = float(y_mean - slope * x_mean)
    residuals = ys - intercept - slope * xs
    return BiasModel(
        intercept=intercept,
        slope=slope,
        residuals=residuals,
        sse=float((residuals ** 2).sum()),
    )
