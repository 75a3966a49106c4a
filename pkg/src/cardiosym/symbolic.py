"""Rule-based clinical layer: R-peaks, fiducials, disease probabilities, reports.

Probabilities are evaluated in decimal arithmetic on the shortest decimal
representation of each finding, so spot values such as ``0.1 + 0.6`` come out
as exactly ``0.7`` instead of picking up binary rounding noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal, localcontext
from html import escape

import numpy as np

from .signal_io import CANONICAL_RATE, EcgRecord, RecordError, resample_to_rate
from .wavelet import denoise

PRIORITY = ("MI", "AM", "CD", "QT", "HE")
RISK_LEVELS = ("low", "moderate", "high")

# fiducial search windows relative to the R peak, in ms
P_WINDOW = (-240.0, -80.0)
Q_WINDOW = (-80.0, 0.0)
S_WINDOW = (0.0, 80.0)
T_WINDOW = (80.0, 400.0)
ST_WINDOW = (60.0, 100.0)  # after the J point
CROSS_FRACTION = 0.1

# conduction thresholds (offset, scale) in ms
PR_OFFSET, PR_SCALE = 200, 100
QRS_CD_OFFSET, QRS_CD_SCALE = 120, 40


class InsufficientRhythm(RecordError):
    """Fewer than two R-peaks, or no beat whose fiducials can all be measured."""


# --------------------------------------------------------------------------
# peaks
# --------------------------------------------------------------------------

def detect_r_peaks(s, fs: float = CANONICAL_RATE) -> np.ndarray:
    """Local maxima above 0.3 * max(s), pairwise at least 0.4 * fs apart.

    Candidates closer than the refractory distance are resolved greedily in
    favour of the taller one (earlier index on exact ties).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("detect_r_peaks needs a non-empty 1-D signal")
    if s.size < 3:
        return np.zeros(0, dtype=np.int64)
    thr = 0.3 * s.max()
    mid = s[1:-1]
    is_peak = (mid > s[:-2]) & (mid >= s[2:]) & (mid > thr)
    cand = np.flatnonzero(is_peak) + 1
    min_dist = 0.4 * fs
    order = sorted(cand.tolist(), key=lambda i: (-s[i], i))
    kept: list[int] = []
    for i in order:
        if all(abs(i - j) >= min_dist for j in kept):
            kept.append(i)
    return np.array(sorted(kept), dtype=np.int64)


# --------------------------------------------------------------------------
# findings
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BeatFiducials:
    r: int
    p_peak: int
    p_onset: float
    q: int
    qrs_onset: float
    s: int
    qrs_offset: float
    t_peak: int
    t_end: float


@dataclass(frozen=True)
class ClinicalFindings:
    heart_rate_bpm: float
    pr_ms: float
    qrs_ms: float
    qt_ms: float
    st_mv: float
    r_amp_mv: float
    r_peaks: tuple[int, ...]
    rr_intervals_s: tuple[float, ...]
    beats: tuple[BeatFiducials, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "r_peaks", tuple(int(i) for i in self.r_peaks))
        object.__setattr__(self, "rr_intervals_s", tuple(float(v) for v in self.rr_intervals_s))
        if any(b <= a for a, b in zip(self.r_peaks, self.r_peaks[1:])):
            raise ValueError("r_peaks must be strictly increasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("beats")
        d["r_peaks"] = list(self.r_peaks)
        d["rr_intervals_s"] = list(self.rr_intervals_s)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClinicalFindings":
        return cls(**d)


def _crossing(dev: np.ndarray, start: int, step: int, level: float) -> float | None:
    """Walk from ``start`` in direction ``step`` until |dev| drops below ``level``.

    Returns the linearly interpolated fractional index of the crossing, or
    None if the walk leaves the signal first.
    """
    i = start
    while 0 <= i + step < dev.size:
        a, b = abs(dev[i]), abs(dev[i + step])
        if b < level:
            frac = (a - level) / (a - b) if a != b else 0.0
            return i + step * frac
        i += step
    return None


def _window(r: int, lo_ms: float, hi_ms: float, fs: float, n: int) -> tuple[int, int] | None:
    lo = r + int(math.ceil(lo_ms * fs / 1000.0))
    hi = r + int(math.floor(hi_ms * fs / 1000.0))
    if lo < 0 or hi >= n or hi <= lo:
        return None
    return lo, hi


def _beat_fiducials(dev: np.ndarray, r: int, fs: float) -> BeatFiducials | None:
    n = dev.size
    amp = dev[r]
    if amp <= 0:
        return None
    wins = [_window(r, *w, fs, n) for w in (P_WINDOW, Q_WINDOW, S_WINDOW, T_WINDOW)]
    if any(w is None for w in wins):
        return None
    (p0, p1), (q0, q1), (s0, s1), (t0, t1) = wins
    level = CROSS_FRACTION * amp

    q = q0 + int(np.argmin(dev[q0:q1 + 1]))
    q_start = q if -dev[q] >= level else r
    s = s0 + int(np.argmin(dev[s0:s1 + 1]))
    s_start = s if -dev[s] >= level else r
    qrs_on = _crossing(dev, q_start, -1, level)
    qrs_off = _crossing(dev, s_start, +1, level)

    p = p0 + int(np.argmax(dev[p0:p1 + 1]))
    p_on = _crossing(dev, p, -1, CROSS_FRACTION * dev[p]) if dev[p] > 0 else None

    seg = dev[t0:t1 + 1]
    t = t0 + int(np.argmax(np.abs(seg)))
    t_end = _crossing(dev, t, +1, CROSS_FRACTION * abs(dev[t])) if dev[t] != 0 else None

    if None in (qrs_on, qrs_off, p_on, t_end):
        return None
    return BeatFiducials(int(r), p, p_on, q, qrs_on, s, qrs_off, t, t_end)


def isoelectric_line(sig: np.ndarray, peaks: np.ndarray, fs: float) -> np.ndarray:
    """Per-sample isoelectric reference through the TP segments.

    A first pass referenced to the lead median locates T-ends and P-onsets.
    The median of each flat stretch between consecutive beats becomes a knot
    and the knots are joined linearly (held constant past the ends), which
    also follows slow baseline wander.  Without any TP segment the whole-lead
    median is used.
    """
    b0 = float(np.median(sig))
    dev = sig - b0
    beats = {int(r): _beat_fiducials(dev, int(r), fs) for r in peaks}
    knots_x, knots_y = [], []
    for r0, r1 in zip(peaks, peaks[1:]):
        a, b = beats[int(r0)], beats[int(r1)]
        if a is None or b is None:
            continue
        lo, hi = int(math.ceil(a.t_end)), int(math.floor(b.p_onset))
        if hi >= lo:
            knots_x.append(0.5 * (lo + hi))
            knots_y.append(float(np.median(sig[lo:hi + 1])))
    if not knots_x:
        return np.full(sig.shape, b0)
    return np.interp(np.arange(sig.size, dtype=np.float64), knots_x, knots_y)


def extract_findings(rec: EcgRecord, lead: int = 0, denoised: bool = True) -> ClinicalFindings:
    """Heart rate, PR/QRS/QT, ST deviation and R amplitude from one lead.

    The lead is brought to 250 Hz without changing its duration, optionally
    denoised, and referenced to the TP-segment isoelectric line.  Interval
    values are averaged over every beat whose search windows fit in the record.
    """
    if not 0 <= lead < rec.n_channels:
        raise RecordError(f"lead {lead} out of range for {rec.n_channels} channels")
    if rec.rate != CANONICAL_RATE:
        rec = resample_to_rate(rec, CANONICAL_RATE)
    fs = float(rec.rate)
    sig = rec.channels[lead]
    if denoised:
        # wavelet shrinkage only; wander is handled by the isoelectric line
        sig = denoise(sig, rate=fs, baseline=False)
    peaks = detect_r_peaks(sig, fs)
    if peaks.size < 2:
        raise InsufficientRhythm(f"need at least 2 R-peaks, found {peaks.size}")
    rr = np.diff(peaks) / fs
    hr = 60.0 / float(np.mean(rr))

    dev = sig - isoelectric_line(sig, peaks, fs)
    beats = [b for b in (_beat_fiducials(dev, int(r), fs) for r in peaks) if b is not None]
    if not beats:
        raise InsufficientRhythm("no beat with measurable P, QRS and T fiducials")
    ms = 1000.0 / fs
    pr = np.mean([(b.qrs_onset - b.p_onset) * ms for b in beats])
    qrs = np.mean([(b.qrs_offset - b.qrs_onset) * ms for b in beats])
    qt = np.mean([(b.t_end - b.qrs_onset) * ms for b in beats])
    st_vals = []
    for b in beats:
        lo = int(math.ceil(b.qrs_offset + ST_WINDOW[0] / ms))
        hi = int(math.floor(b.qrs_offset + ST_WINDOW[1] / ms))
        if 0 <= lo <= hi < dev.size:
            st_vals.append(float(np.mean(dev[lo:hi + 1])))
    st = float(np.mean(st_vals)) if st_vals else 0.0
    r_amp = float(np.mean([dev[b.r] for b in beats]))
    return ClinicalFindings(hr, float(pr), float(qrs), float(qt), st, r_amp,
                            tuple(peaks.tolist()), tuple(rr.tolist()), tuple(beats))


# --------------------------------------------------------------------------
# probabilities
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiseaseProbabilities:
    p_am: float
    p_cd: float
    p_mi: float
    p_qt: float
    p_he: float

    def as_dict(self) -> dict[str, float]:
        return {"AM": self.p_am, "CD": self.p_cd, "MI": self.p_mi, "QT": self.p_qt, "HE": self.p_he}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiseaseProbabilities":
        return cls(**d)


def _dec(x) -> Decimal:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"finding must be finite, got {x}")
    return Decimal(repr(x))


def disease_probabilities(f: ClinicalFindings) -> DiseaseProbabilities:
    """Closed-form rule scores for the five disease classes.

    Each score starts from a 0.1 floor and is capped at 0.9.  Contributions
    from findings on the normal side of their thresholds clamp to zero.  QT
    below 350 ms mirrors the prolonged branch; a normal-band QT scores 0.1.
    """
    D = Decimal
    lo, hi, zero = D("0.1"), D("0.9"), D(0)
    with localcontext() as ctx:
        ctx.prec = 80
        hr, pr, qrs, qt = _dec(f.heart_rate_bpm), _dec(f.pr_ms), _dec(f.qrs_ms), _dec(f.qt_ms)
        st, ar = _dec(f.st_mv), _dec(f.r_amp_mv)

        am = max(lo, min(hi, abs(hr - 75) / 50))

        cd_p = min(D("0.4"), max(zero, (pr - PR_OFFSET) / PR_SCALE))
        cd_q = min(D("0.4"), max(zero, (qrs - QRS_CD_OFFSET) / QRS_CD_SCALE))
        cd = min(hi, lo + cd_p + cd_q)

        mi = min(hi, lo + min(D("0.6"), 3 * abs(st)) + (D("0.2") if qrs > 100 else zero))

        if qt > 460:
            pqt = min(hi, D("0.6") + (qt - 460) / 100)
        elif qt < 350:
            pqt = min(hi, D("0.6") + (350 - qt) / 100)
        else:
            pqt = lo

        he_r = min(D("0.5"), max(zero, (ar - 2) / 2))
        he_q = min(D("0.3"), max(zero, (qrs - 110) / 30))
        he = min(hi, lo + he_r + he_q)
    return DiseaseProbabilities(float(am), float(cd), float(mi), float(pqt), float(he))


def resolve_diagnosis(p: DiseaseProbabilities) -> tuple[str, float]:
    """Highest-scoring class; exact ties go to the more urgent class."""
    probs = p.as_dict()
    best = PRIORITY[0]
    for tag in PRIORITY[1:]:
        if probs[tag] > probs[best]:
            best = tag
    return best, probs[best]


def risk_level(confidence: float) -> str:
    if confidence < 0.4:
        return "low"
    if confidence < 0.7:
        return "moderate"
    return "high"


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def annotations_for(findings: ClinicalFindings | None) -> tuple[tuple[int, str], ...]:
    """(sample index, tag) for every located fiducial, sorted by index."""
    if findings is None:
        return ()
    out = []
    for b in findings.beats:
        out += [(int(round(b.p_onset)), "P_on"), (b.p_peak, "P"), (int(round(b.qrs_onset)), "QRS_on"),
                (b.q, "Q"), (b.r, "R"), (b.s, "S"), (int(round(b.qrs_offset)), "J"),
                (b.t_peak, "T"), (int(round(b.t_end)), "T_end")]
    measured = {b.r for b in findings.beats}
    out += [(int(r), "R") for r in findings.r_peaks if r not in measured]
    return tuple(sorted(out))


@dataclass(frozen=True)
class DiagnosisReport:
    gate: str
    findings: ClinicalFindings | None
    probabilities: DiseaseProbabilities | None
    annotations: tuple[tuple[int, str], ...] = ()
    diagnosis: str | None = None
    confidence: float | None = None
    risk: str | None = None
    neural_diagnosis: str | None = None

    def __post_init__(self):
        if self.gate not in ("Normal", "Abnormal"):
            raise ValueError(f"gate must be Normal or Abnormal, got {self.gate!r}")
        has_dx = (self.diagnosis, self.confidence, self.risk) != (None, None, None)
        if self.gate == "Normal" and (has_dx or self.neural_diagnosis is not None):
            raise ValueError("a Normal report carries no diagnosis")
        object.__setattr__(self, "annotations", tuple((int(i), str(t)) for i, t in self.annotations))

    def to_dict(self) -> dict:
        d: dict = {"gate": self.gate}
        if self.gate == "Abnormal":
            d["diagnosis"] = self.diagnosis
            d["confidence"] = self.confidence
            d["risk"] = self.risk
            if self.neural_diagnosis is not None:
                d["neural_diagnosis"] = self.neural_diagnosis
        d["findings"] = self.findings.to_dict() if self.findings is not None else None
        d["probabilities"] = self.probabilities.to_dict() if self.probabilities is not None else None
        d["annotations"] = [[i, t] for i, t in self.annotations]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosisReport":
        f = d.get("findings")
        p = d.get("probabilities")
        return cls(
            gate=d["gate"],
            findings=ClinicalFindings.from_dict(f) if f is not None else None,
            probabilities=DiseaseProbabilities.from_dict(p) if p is not None else None,
            annotations=tuple((int(i), str(t)) for i, t in d.get("annotations", [])),
            diagnosis=d.get("diagnosis"),
            confidence=d.get("confidence"),
            risk=d.get("risk"),
            neural_diagnosis=d.get("neural_diagnosis"),
        )

    @classmethod
    def from_json(cls, text: str) -> "DiagnosisReport":
        return cls.from_dict(json.loads(text))


def build_report(gate: str, findings: ClinicalFindings | None, probabilities: DiseaseProbabilities | None,
                 resolution: tuple[str, float] | None = None, neural_diagnosis: str | None = None) -> DiagnosisReport:
    """Assemble a report; the diagnosis section only exists for an Abnormal gate."""
    ann = annotations_for(findings)
    if gate == "Normal":
        return DiagnosisReport("Normal", findings, probabilities, ann)
    if resolution is None:
        if probabilities is None:
            raise ValueError("an Abnormal report needs probabilities or a resolution")
        resolution = resolve_diagnosis(probabilities)
    tag, conf = resolution
    return DiagnosisReport("Abnormal", findings, probabilities, ann, tag, float(conf), risk_level(conf),
                           neural_diagnosis)


# --------------------------------------------------------------------------
# SVG
# --------------------------------------------------------------------------

_MARK_COLORS = {"P": "#1f77b4", "Q": "#2ca02c", "R": "#d62728", "S": "#9467bd", "T": "#ff7f0e"}


def render_svg(signal, fs: float, report: DiagnosisReport, width: int = 1000, height: int = 360) -> str:
    """Annotated waveform: the lead as a polyline, P/Q/R/S/T markers, findings text."""
    s = np.asarray(signal, dtype=np.float64)
    plot_h = height - 110
    lo, hi = float(s.min()), float(s.max())
    span = hi - lo if hi > lo else 1.0

    def xy(i: float) -> tuple[float, float]:
        j = min(max(int(round(i)), 0), s.size - 1)
        x = 10 + (width - 20) * (i / max(s.size - 1, 1))
        y = 10 + plot_h * (1.0 - (s[j] - lo) / span)
        return x, y

    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(i) for i in range(s.size)))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<polyline fill="none" stroke="black" stroke-width="1" points="{pts}"/>',
    ]
    for idx, tag in report.annotations:
        if tag not in _MARK_COLORS or not 0 <= idx < s.size:
            continue
        x, y = xy(idx)
        c = _MARK_COLORS[tag]
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{c}"/>')
        parts.append(f'<text x="{x:.2f}" y="{y - 6:.2f}" font-size="10" fill="{c}" '
                     f'text-anchor="middle">{tag}</text>')

    lines = [f"Gate: {report.gate}"]
    if report.gate == "Abnormal":
        lines.append(f"Diagnosis: {report.diagnosis}  confidence {report.confidence:.2f}  risk {report.risk}")
    f = report.findings
    if f is not None:
        lines.append(f"HR {f.heart_rate_bpm:.1f} bpm  PR {f.pr_ms:.0f} ms  QRS {f.qrs_ms:.0f} ms  "
                     f"QT {f.qt_ms:.0f} ms  ST {f.st_mv:+.2f} mV  R {f.r_amp_mv:.2f} mV")
    if report.probabilities is not None:
        lines.append("  ".join(f"{k} {v:.2f}" for k, v in report.probabilities.as_dict().items()))
    lines.append(f"fs {fs:g} Hz")
    for k, line in enumerate(lines):
        parts.append(f'<text x="10" y="{plot_h + 32 + 16 * k}" font-size="12" '
                     f'font-family="monospace">{escape(line)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
