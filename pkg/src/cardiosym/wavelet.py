"""Morlet and Daubechies-4 feature extraction and denoising.

Time in the Morlet kernel is measured in units of ``time_unit_s`` seconds, so
the fixed carrier ``cos(5 t)`` can be tuned to the QRS band (default unit of
40 ms puts the carrier near 20 Hz) or to baseline wander (unit of 1 s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CARRIER = 5.0


@dataclass(frozen=True)
class WaveletConfig:
    sigma: float = 1.0
    time_unit_s: float = 0.04
    support_halfwidth_s: float | None = None  # defaults to 4 sigma
    carrier: float = CARRIER
    threshold_mode: str = "soft"
    boundary: str = "periodic"
    levels: int = 2

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.time_unit_s > 0:
            raise ValueError("time_unit_s must be positive")
        if self.carrier != CARRIER:
            raise ValueError("the Morlet carrier is fixed at 5.0")
        if self.threshold_mode != "soft" or self.boundary != "periodic":
            raise ValueError("only soft thresholding with periodic boundaries is supported")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.support_halfwidth_s is None:
            object.__setattr__(self, "support_halfwidth_s", 4.0 * self.sigma * self.time_unit_s)
        elif not self.support_halfwidth_s > 0:
            raise ValueError("support_halfwidth_s must be positive")


# kernel tuned to slow baseline wander (carrier near 0.8 Hz)
BASELINE_CONFIG = WaveletConfig(sigma=1.0, time_unit_s=1.0)


def morlet(t, sigma: float = 1.0):
    """exp(-t^2 / 2 sigma^2) * cos(5 t)."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-(t * t) / (2.0 * sigma * sigma)) * np.cos(CARRIER * t)


def morlet_kernel(cfg: WaveletConfig, rate: float) -> np.ndarray:
    """Morlet sampled at ``rate`` over +-support; odd length, centred on t=0."""
    half = int(math.floor(cfg.support_halfwidth_s * rate + 1e-9))
    t_units = np.arange(-half, half + 1) / rate / cfg.time_unit_s
    return morlet(t_units, cfg.sigma)


def _correlate_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # zero-padded, centred cross-correlation along the last axis
    half = kernel.size // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    xp = np.pad(x, pad)
    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel.size, axis=-1)
    return windows @ kernel


def morlet_features(x, cfg: WaveletConfig = WaveletConfig(), rate: float = 250.0) -> np.ndarray:
    """Same-length correlation of ``x`` (any leading shape) with the Morlet kernel."""
    x = np.asarray(x, dtype=np.float64)
    kernel = morlet_kernel(cfg, rate)
    if kernel.size > x.shape[-1]:
        raise ValueError(f"Morlet kernel ({kernel.size} taps) is longer than the signal ({x.shape[-1]})")
    return _correlate_same(x, kernel)


# --------------------------------------------------------------------------
# Daubechies-4 filter bank
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Db4Filters:
    h: np.ndarray = field(default=None)
    g: np.ndarray = field(default=None)

    def __post_init__(self):
        h = self.h
        if h is None:
            s3 = math.sqrt(3.0)
            h = np.array([1 + s3, 3 + s3, 3 - s3, 1 - s3]) / (4.0 * math.sqrt(2.0))
        h = np.asarray(h, dtype=np.float64)
        g = self.g
        if g is None:
            g = np.array([(-1) ** k * h[3 - k] for k in range(4)])
        g = np.asarray(g, dtype=np.float64)
        if h.shape != (4,) or g.shape != (4,):
            raise ValueError("DB4 filters have exactly 4 taps")
        checks = {
            "sum(h) == sqrt(2)": abs(h.sum() - math.sqrt(2.0)),
            "sum(g) == 0": abs(g.sum()),
            "|h|^2 == 1": abs(h @ h - 1.0),
            "g_k == (-1)^k h_(3-k)": max(abs(g[k] - (-1) ** k * h[3 - k]) for k in range(4)),
        }
        for name, err in checks.items():
            if err > 1e-12:
                raise ValueError(f"DB4 filter invariant violated: {name} (error {err:.3g})")
        h.flags.writeable = False
        g.flags.writeable = False
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "g", g)


DB4 = Db4Filters()


def _even(x: np.ndarray) -> np.ndarray:
    return x if x.shape[-1] % 2 == 0 else np.concatenate([x, x[..., -1:]], axis=-1)


def _taps_index(n: int) -> np.ndarray:
    # (n/2, 4) periodic indices 2k + j
    return (2 * np.arange(n // 2)[:, None] + np.arange(4)[None, :]) % n


def db4_analysis(x, f: Db4Filters = DB4) -> tuple[np.ndarray, np.ndarray]:
    """One-level periodic orthonormal split into (approx, detail).

    Odd lengths are padded by repeating the last sample, so both outputs have
    ``ceil(len(x) / 2)`` entries.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("db4_analysis needs a non-empty signal")
    x = _even(x)
    taps = x[..., _taps_index(x.shape[-1])]
    return taps @ f.h, taps @ f.g


def db4_synthesis(approx, detail, f: Db4Filters = DB4) -> np.ndarray:
    """Transpose of :func:`db4_analysis`; its exact inverse for even lengths."""
    approx = np.asarray(approx, dtype=np.float64)
    detail = np.asarray(detail, dtype=np.float64)
    if approx.shape != detail.shape:
        raise ValueError("approx and detail must have equal shapes")
    n = 2 * approx.shape[-1]
    out = np.zeros(approx.shape[:-1] + (n,))
    idx = _taps_index(n)
    contrib = approx[..., :, None] * f.h + detail[..., :, None] * f.g
    # for a fixed tap the target indices 2k + j are distinct, so plain += is safe
    for j in range(4):
        out[..., idx[:, j]] += contrib[..., j]
    return out


def db4_feature(approx, detail, out_len: int | None = None) -> np.ndarray:
    """Elementwise product of the half-band outputs, linearly stretched to ``out_len``.

    ``out_len=None`` returns the raw half-length product.
    """
    approx = np.asarray(approx, dtype=np.float64)
    detail = np.asarray(detail, dtype=np.float64)
    if approx.shape != detail.shape:
        raise ValueError(f"length mismatch: {approx.shape} vs {detail.shape}")
    prod = approx * detail
    if out_len is None:
        return prod
    m = prod.shape[-1]
    if m == 1:
        return np.repeat(prod, out_len, axis=-1)
    pos = np.linspace(0.0, m - 1.0, out_len)
    lo = np.minimum(np.floor(pos).astype(np.int64), m - 2)
    w = pos - lo
    return prod[..., lo] * (1.0 - w) + prod[..., lo + 1] * w


def db4_features(x, f: Db4Filters = DB4) -> np.ndarray:
    """DB4 branch feature of a signal: analysis then product, back at full length."""
    x = np.asarray(x, dtype=np.float64)
    a, d = db4_analysis(x, f)
    return db4_feature(a, d, x.shape[-1])


# --------------------------------------------------------------------------
# denoising
# --------------------------------------------------------------------------

def soft_threshold(v: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


def remove_baseline(x, cfg: WaveletConfig = BASELINE_CONFIG, rate: float = 250.0) -> np.ndarray:
    """Subtract the Morlet-band estimate of slow baseline wander.

    The correlation with the wander-scale Morlet is divided by the kernel's
    gain at its own carrier frequency, so a wander oscillating at the carrier
    is removed exactly while content far from it passes untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    half = int(math.floor(cfg.support_halfwidth_s * rate + 1e-9))
    t_units = np.arange(-half, half + 1) / rate / cfg.time_unit_s
    kernel = morlet(t_units, cfg.sigma)
    gain = kernel @ np.cos(CARRIER * t_units)
    if kernel.size > x.shape[-1]:
        # long kernels are truncated at the signal's span
        keep = x.shape[-1] - 1 + (x.shape[-1] % 2)
        cut = (kernel.size - keep) // 2
        kernel = kernel[cut:kernel.size - cut]
    return x - _correlate_same(x, kernel) / gain


def universal_threshold(detail: np.ndarray, n: int) -> float:
    sigma = np.median(np.abs(detail)) / 0.6745
    return float(sigma * math.sqrt(2.0 * math.log(max(n, 2))))


def denoise(x, cfg: WaveletConfig = BASELINE_CONFIG, f: Db4Filters = DB4, rate: float = 250.0,
            baseline: bool = True) -> np.ndarray:
    """Two-stage denoise of a 1-D signal.

    Stage 1 removes baseline wander with a Morlet-band estimate.  Stage 2
    cascades ``cfg.levels`` one-level DB4 splits, soft-thresholds every detail
    band at the universal threshold (noise scale from the finest band), and
    reconstructs with the transpose bank.  ``baseline=False`` skips stage 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("denoise works on one channel at a time")
    n = x.size
    if n < 4:
        return x.copy()
    y = remove_baseline(x, cfg, rate) if baseline else x

    details = []
    approx = y
    lengths = []
    for _ in range(cfg.levels):
        if approx.size < 4:
            break
        lengths.append(approx.size)
        approx, det = db4_analysis(approx, f)
        details.append(det)
    lam = universal_threshold(details[0], n)
    for level in range(len(details) - 1, -1, -1):
        approx = db4_synthesis(approx, soft_threshold(details[level], lam), f)[: lengths[level]]
    return approx
