"""End-to-end plumbing shared by the CLI: record preparation, prediction,
labelled synthetic datasets and the ablation table."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .imbalance import LabeledSet
from .nn_core import NumericError
from .model import ALL_FLAGS, DISEASES, ABLATION_COMBOS, ECGNet, ModelConfig, count_parameters
from .signal_io import (
    CANONICAL_LENGTH,
    EcgRecord,
    RecordError,
    SynthSpec,
    canonicalize,
    normalize_minmax,
    synth_ecg,
)
from .symbolic import DiagnosisReport, InsufficientRhythm, build_report, disease_probabilities, extract_findings
from .train_eval import (
    NORMAL,
    TrainConfig,
    compute_metrics,
    evaluate_split,
    train_sequential,
)
from .wavelet import denoise


class CheckpointMismatch(ValueError):
    """Checkpoint and run configuration disagree on the model shape."""


def prepare_channels(rec: EcgRecord, seq_len: int = CANONICAL_LENGTH, clean: bool = True) -> np.ndarray:
    """Canonicalize, min-max normalize and (optionally) denoise every channel.

    Returns a ``(channels, seq_len)`` array; lengths other than the canonical
    1500 are reached by a further linear resampling.
    """
    canon = normalize_minmax(canonicalize(rec))
    x = canon.channels
    if clean:
        x = np.stack([denoise(ch, rate=canon.rate) for ch in x])
    if seq_len != CANONICAL_LENGTH:
        src = np.linspace(0.0, 1.0, x.shape[1])
        dst = np.linspace(0.0, 1.0, seq_len)
        x = np.stack([np.interp(dst, src, ch) for ch in x])
    return x


def records_to_set(records: list[EcgRecord], cfg: ModelConfig, seed: int = 0) -> LabeledSet:
    if not records:
        raise RecordError("dataset is empty")
    xs, labels = [], []
    for rec in records:
        if rec.label is None:
            raise RecordError(f"record {rec.source_id or '?'} has no label")
        if rec.n_channels != cfg.n_channels:
            raise RecordError(f"record {rec.source_id or '?'} has {rec.n_channels} channels, "
                              f"model expects {cfg.n_channels}")
        xs.append(prepare_channels(rec, cfg.seq_len))
        labels.append(rec.label)
    return LabeledSet.from_arrays(np.stack(xs), labels, seed)


def predict_end_to_end(rec: EcgRecord, model: ECGNet, lead: int = 0) -> DiagnosisReport:
    """Neural gate and disease head plus the symbolic findings, as one report."""
    cfg = model.cfg
    if rec.n_channels != cfg.n_channels:
        raise CheckpointMismatch(f"record has {rec.n_channels} channels, checkpoint expects {cfg.n_channels}")
    if not 0 <= lead < rec.n_channels:
        raise RecordError(f"lead {lead} out of range for {rec.n_channels} channels")
    x = prepare_channels(rec, cfg.seq_len)[None]
    model.eval()
    logits = model.forward(x)[0]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite model output")
    gate = NORMAL if logits[0] < 0 else "Abnormal"

    try:
        findings = extract_findings(rec, lead)
    except InsufficientRhythm:
        if gate == "Abnormal":
            raise
        findings = None
    probs = disease_probabilities(findings) if findings is not None else None
    neural = DISEASES[int(np.argmax(logits[1:]))] if gate == "Abnormal" else None
    return build_report(gate, findings, probs, neural_diagnosis=neural)


# --------------------------------------------------------------------------
# labelled synthetic data
# --------------------------------------------------------------------------

def class_spec(tag: str, rng: np.random.Generator, seed: int, n_channels: int = 1,
               snr_db: float | None = 25.0) -> SynthSpec:
    """Random generator settings whose morphology matches ``tag``'s rule."""
    hr = rng.uniform(62, 88)
    pr, qrs, qt = rng.uniform(130, 180), rng.uniform(80, 98), rng.uniform(370, 430)
    st, r_amp = 0.0, rng.uniform(0.9, 1.4)
    if tag == "AM":
        hr = rng.uniform(110, 120)
        qt = rng.uniform(365, 380)
        pr = rng.uniform(100, 115)
    elif tag == "CD":
        # the P search window caps measurable PR near 200 ms at this QRS width,
        # so the conduction signal comes mostly from the wide QRS
        pr = rng.uniform(190, 205)
        qrs = rng.uniform(135, 145)
        qt = rng.uniform(410, 440)
        hr = rng.uniform(55, 70)
    elif tag == "MI":
        st = rng.uniform(0.2, 0.35)
    elif tag == "QT":
        qt = rng.uniform(480, 520)
        hr = rng.uniform(50, 60)
    elif tag == "HE":
        r_amp = rng.uniform(2.8, 3.5)
        qrs = rng.uniform(112, 118)
    elif tag != NORMAL:
        raise ValueError(f"unknown class tag {tag!r}")
    return SynthSpec(heart_rate_bpm=float(hr), pr_ms=float(pr), qrs_ms=float(qrs), qt_ms=float(qt),
                     r_amp_mv=float(r_amp), st_mv=float(st), noise_snr_db=snr_db, n_channels=n_channels,
                     seed=seed, label=tag)


def synth_dataset(count: int, seed: int = 0, n_channels: int = 1, tags=("Normal",) + DISEASES,
                  weights=None, snr_db: float | None = 25.0) -> list[EcgRecord]:
    """``count`` labelled records; classes cycle through ``tags`` unless weights are given."""
    rng = np.random.default_rng(seed)
    tags = tuple(tags)
    if weights is None:
        chosen = [tags[i % len(tags)] for i in range(count)]
    else:
        w = np.asarray(weights, dtype=np.float64)
        counts = np.floor(w / w.sum() * count).astype(int)
        counts[np.argmax(w)] += count - counts.sum()
        chosen = [t for t, c in zip(tags, counts) for _ in range(c)]
    recs = []
    for i, tag in enumerate(chosen):
        spec = class_spec(tag, rng, seed=int(rng.integers(2**31)), n_channels=n_channels, snr_db=snr_db)
        rec, _ = synth_ecg(spec)
        recs.append(replace(rec, source_id=f"synth-{seed}-{i:05d}"))
    return recs


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    flags: dict
    params: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    reference: bool

    def to_dict(self) -> dict:
        d = {f: self.flags[f] for f in ALL_FLAGS}
        d.update(params=self.params, accuracy=self.accuracy, precision=self.precision,
                 recall=self.recall, f1=self.f1, reference=self.reference)
        return d


def run_ablation(model_cfg: ModelConfig, dataset: LabeledSet, train_cfg: TrainConfig,
                 combos=ABLATION_COMBOS, model_seed: int = 0) -> list[AblationRow]:
    """Train and score one model per flag combination on a shared split and seed.

    Scores are the gate (Normal vs Abnormal) metrics on the validation split.
    """
    rows = []
    for flags in combos:
        cfg = model_cfg.with_flags(**{f: bool(flags.get(f, False)) for f in ALL_FLAGS})
        model = ECGNet(cfg, seed=model_seed)
        result = train_sequential([dataset], model, train_cfg)
        val = dataset.subset(result.splits[0][1])
        x = val.vectors.reshape(len(val), cfg.n_channels, cfg.seq_len)
        _, _, logits = evaluate_split(model, x, list(val.labels), train_cfg.micro_batch or 64)
        pred = [0 if z < 0 else 1 for z in logits[:, 0]]
        truth = [0 if t == NORMAL else 1 for t in val.labels]
        m = compute_metrics(pred, logits[:, 0], truth, classes=[0, 1])
        rows.append(AblationRow(cfg.flags(), count_parameters(model)["total"], m.accuracy, m.precision,
                                m.recall, m.f1, all(cfg.flags().values())))
    return rows


def ablation_table(rows: list[AblationRow]) -> list[dict]:
    return [r.to_dict() for r in rows]
