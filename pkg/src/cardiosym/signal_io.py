"""Reading, writing, canonicalizing and synthesizing ECG records.

Records are held as a ``(channels, samples)`` float64 array in millivolts.
The canonical form used everywhere downstream is 250 Hz and 1500 samples.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

CANONICAL_RATE = 250
CANONICAL_LENGTH = 1500
CLASS_TAGS = ("Normal", "AM", "CD", "MI", "QT", "HE")

# a Gaussian bump falls to 10% of its peak at this many widths from centre
KAPPA_10 = math.sqrt(2.0 * math.log(10.0))


class RecordError(ValueError):
    """Raised for malformed or inconsistent record data."""


@dataclass(frozen=True, eq=False)
class EcgRecord:
    channels: np.ndarray
    rate: float
    label: str | None = None
    source_id: str = ""

    def __post_init__(self):
        data = np.array(self.channels, dtype=np.float64, copy=True)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise RecordError(f"channels must be a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise RecordError("channels contain non-finite samples")
        if not self.rate > 0:
            raise RecordError(f"rate must be positive, got {self.rate}")
        if self.label is not None and self.label not in CLASS_TAGS:
            raise RecordError(f"unknown label {self.label!r}; expected one of {CLASS_TAGS}")
        data.flags.writeable = False
        object.__setattr__(self, "channels", data)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def length(self) -> int:
        return self.channels.shape[1]

    @property
    def is_canonical(self) -> bool:
        return self.rate == CANONICAL_RATE and self.length == CANONICAL_LENGTH

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.rate == other.rate
            and self.label == other.label
            and self.source_id == other.source_id
            and np.array_equal(self.channels, other.channels)
        )

    __hash__ = None


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def _format_rate(rate: float) -> str:
    return str(int(rate)) if float(rate).is_integer() else repr(float(rate))


def write_record(rec: EcgRecord, format: str = "json") -> bytes:
    """Serialize a record. Floats are written in shortest round-trip form."""
    if format == "json":
        doc = {"rate": rec.rate, "label": rec.label, "source_id": rec.source_id,
               "channels": rec.channels.tolist()}
        if rec.label is None:
            del doc["label"]
        return json.dumps(doc).encode("utf-8")
    if format == "csv":
        out = io.StringIO()
        out.write(f"rate={_format_rate(rec.rate)}\n")
        if rec.label is not None:
            out.write(f"label={rec.label}\n")
        for row in rec.channels.T:
            out.write(",".join(repr(float(v)) for v in row))
            out.write("\n")
        return out.getvalue().encode("utf-8")
    raise RecordError(f"unsupported format {format!r}")


def _parse_rate(text: str) -> float:
    try:
        rate = float(text)
    except ValueError:
        raise RecordError(f"malformed rate {text!r}") from None
    if not math.isfinite(rate) or rate <= 0:
        raise RecordError(f"rate must be positive, got {text!r}")
    return int(rate) if rate.is_integer() else rate


def read_record(data: bytes, format: str = "json", source_id: str = "") -> EcgRecord:
    """Parse CSV or JSON bytes into an :class:`EcgRecord`.

    CSV layout is a ``rate=<int>`` line, an optional ``label=<tag>`` line, then
    one row per time step with one column per channel.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise RecordError(f"record is not valid UTF-8: {exc}") from None

    if format == "json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RecordError(f"malformed JSON: {exc}") from None
        if not isinstance(doc, dict) or "rate" not in doc or "channels" not in doc:
            raise RecordError("JSON record needs 'rate' and 'channels'")
        chans = doc["channels"]
        if not isinstance(chans, list) or not chans or not all(isinstance(c, list) for c in chans):
            raise RecordError("'channels' must be a non-empty list of lists")
        if len({len(c) for c in chans}) != 1:
            raise RecordError("ragged channel lengths")
        try:
            arr = np.array(chans, dtype=np.float64)
        except (TypeError, ValueError):
            raise RecordError("non-numeric sample value") from None
        return EcgRecord(arr, _parse_rate(str(doc["rate"])), doc.get("label"),
                         doc.get("source_id") or source_id)

    if format == "csv":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("rate="):
            raise RecordError("CSV header must start with 'rate=<int>'")
        rate = _parse_rate(lines[0][len("rate="):].strip())
        body = lines[1:]
        label = None
        if body and body[0].startswith("label="):
            label = body[0][len("label="):].strip() or None
            body = body[1:]
        if not body:
            raise RecordError("CSV record has no samples")
        rows = list(csv.reader(body))
        if len({len(r) for r in rows}) != 1:
            raise RecordError("ragged channel lengths: rows have differing arity")
        try:
            arr = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
        except ValueError:
            raise RecordError("non-numeric sample value") from None
        return EcgRecord(arr.T, rate, label, source_id)

    raise RecordError(f"unsupported format {format!r}")


# --------------------------------------------------------------------------
# canonical form
# --------------------------------------------------------------------------

def canonicalize(rec: EcgRecord) -> EcgRecord:
    """Resample every channel to 1500 samples at 250 Hz.

    Linear interpolation over the original time axis; the first and last
    samples map onto the first and last canonical samples.
    """
    if rec.is_canonical:
        return rec
    n = rec.length
    src = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    dst = np.linspace(0.0, 1.0, CANONICAL_LENGTH)
    if n == 1:
        out = np.repeat(rec.channels, CANONICAL_LENGTH, axis=1)
    else:
        out = np.stack([np.interp(dst, src, ch) for ch in rec.channels])
    return replace(rec, channels=out, rate=CANONICAL_RATE)


def resample_to_rate(rec: EcgRecord, rate: float = CANONICAL_RATE) -> EcgRecord:
    """Linear resampling to ``rate`` that keeps the record's duration.

    Used for interval measurement, where compressing a long record into 1500
    samples would distort heart rate and intervals.
    """
    if rec.rate == rate:
        return rec
    n = rec.length
    duration = (n - 1) / rec.rate
    m = int(math.floor(duration * rate + 1e-9)) + 1
    src = np.arange(n) / rec.rate
    dst = np.arange(m) / rate
    out = np.stack([np.interp(dst, src, ch) for ch in rec.channels])
    return replace(rec, channels=out, rate=rate)


def normalize_minmax(rec: EcgRecord) -> EcgRecord:
    """Map each channel independently onto [0, 1]; constant channels become 0."""
    x = rec.channels
    lo = x.min(axis=1, keepdims=True)
    span = x.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, 0.0)
    return replace(rec, channels=np.clip(out, 0.0, 1.0))


# --------------------------------------------------------------------------
# synthetic fixtures
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    heart_rate_bpm: float = 75.0
    pr_ms: float = 160.0
    qrs_ms: float = 100.0
    qt_ms: float = 400.0
    r_amp_mv: float = 1.0
    st_mv: float = 0.0
    noise_snr_db: float | None = None
    n_channels: int = 1
    seed: int = 0
    label: str | None = None

    def __post_init__(self):
        if not 20 <= self.heart_rate_bpm <= 300:
            raise ValueError("heart_rate_bpm must lie in [20, 300]")
        if min(self.pr_ms, self.qrs_ms, self.qt_ms) <= 0:
            raise ValueError("intervals must be positive")
        if not (self.pr_ms < self.qt_ms and self.qrs_ms < self.qt_ms):
            raise ValueError("PR and QRS must both be shorter than QT")
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        rr_ms = 60000.0 / self.heart_rate_bpm
        if self.pr_ms + self.qt_ms >= rr_ms:
            raise ValueError(
                f"PR + QT = {self.pr_ms + self.qt_ms:.0f} ms does not fit in one beat period ({rr_ms:.0f} ms)")


@dataclass(frozen=True)
class BeatTruth:
    """Ground-truth fiducials of one generated beat, in fractional samples."""

    r: int
    p_onset: float
    qrs_onset: float
    qrs_offset: float
    t_end: float


@dataclass(frozen=True)
class SynthTruth:
    r_peaks: np.ndarray
    beats: tuple[BeatTruth, ...]
    pr_ms: float
    qrs_ms: float
    qt_ms: float
    clean: np.ndarray = field(repr=False)


def _wave_shape(spec: SynthSpec) -> list[tuple[float, float, float]]:
    """(centre_ms relative to R, width_ms, amplitude as a fraction of R) per wave."""
    qrs, pr, qt = spec.qrs_ms, spec.pr_ms, spec.qt_ms
    sig_r = qrs / 10.0
    sig_qs = qrs / 12.0
    qs_depth = 0.2
    # Q and S reach 10% of R height exactly at the QRS boundaries
    reach = sig_qs * math.sqrt(2.0 * math.log(qs_depth / 0.1))
    c_q = -qrs / 2.0 + reach
    c_s = qrs / 2.0 - reach
    sig_p, sig_t = 20.0, 40.0
    c_p = -qrs / 2.0 - pr + KAPPA_10 * sig_p
    c_t = -qrs / 2.0 + qt - KAPPA_10 * sig_t
    amp_p = 0.15 / spec.r_amp_mv if spec.r_amp_mv else 0.0
    amp_t = 0.25 / spec.r_amp_mv if spec.r_amp_mv else 0.0
    return [(c_p, sig_p, amp_p), (c_q, sig_qs, -qs_depth), (0.0, sig_r, 1.0),
            (c_s, sig_qs, -qs_depth), (c_t, sig_t, amp_t)]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def synth_ecg(spec: SynthSpec) -> tuple[EcgRecord, SynthTruth]:
    """Deterministic canonical ECG built from Gaussian P/Q/R/S/T bumps.

    The returned truth holds the R-peak sample indices and per-beat fiducials
    that realise ``spec``'s PR, QRS and QT intervals.  With ``noise_snr_db``
    set, white Gaussian noise is added to every channel at that SNR.
    """
    rng = np.random.default_rng(spec.seed)
    fs = CANONICAL_RATE
    n = CANONICAL_LENGTH
    rr = fs * 60.0 / spec.heart_rate_bpm
    ms = fs / 1000.0

    # beats extend off both ends so partial complexes appear at the edges
    first = rng.uniform(0.0, rr) - rr
    centres = []
    while first < n + rr:
        centres.append(int(round(first)))
        first += rr

    t = np.arange(n, dtype=np.float64)
    waves = _wave_shape(spec)
    clean = np.zeros(n)
    j_ms = spec.qrs_ms / 2.0
    st_on = j_ms + 15.0
    st_off = waves[4][0]
    for r in centres:
        for c_ms, s_ms, amp in waves:
            clean += spec.r_amp_mv * amp * np.exp(-0.5 * ((t - r - c_ms * ms) / (s_ms * ms)) ** 2)
        if spec.st_mv:
            rel = (t - r) / ms
            clean += spec.st_mv * (_sigmoid((rel - st_on) / 4.0) - _sigmoid((rel - st_off) / 15.0))

    peaks = np.array([c for c in centres if 1 <= c <= n - 2], dtype=np.int64)
    half_qrs = spec.qrs_ms / 2.0 * ms
    beats = tuple(
        BeatTruth(int(r), r - (half_qrs + spec.pr_ms * ms), r - half_qrs, r + half_qrs,
                  r - half_qrs + spec.qt_ms * ms)
        for r in peaks
    )

    gains = np.ones(spec.n_channels)
    if spec.n_channels > 1:
        gains[1:] = rng.uniform(0.5, 1.0, spec.n_channels - 1)
    data = gains[:, None] * clean[None, :]
    if spec.noise_snr_db is not None:
        power = np.mean(data ** 2, axis=1, keepdims=True)
        sigma = np.sqrt(power / 10.0 ** (spec.noise_snr_db / 10.0))
        data = data + sigma * rng.standard_normal(data.shape)

    rec = EcgRecord(data, fs, spec.label, f"synth-{spec.seed}")
    truth = SynthTruth(peaks, beats, spec.pr_ms, spec.qrs_ms, spec.qt_ms, gains[:, None] * clean[None, :])
    return rec, truth
