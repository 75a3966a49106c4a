"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .imbalance import LabeledSet
from .model import ALL_FLAGS, ABLATION_COMBOS, ECGNet, count_parameters
from .nn_core import NumericError
from .pipeline import (
    CheckpointMismatch,
    ablation_table,
    predict_end_to_end,
    records_to_set,
    run_ablation,
    synth_dataset,
)
from .signal_io import (
    CANONICAL_RATE,
    EcgRecord,
    RecordError,
    SynthSpec,
    canonicalize,
    normalize_minmax,
    read_record,
    resample_to_rate,
    synth_ecg,
    write_record,
)
from .symbolic import DiagnosisReport, render_svg
from .train_eval import (
    NORMAL,
    compute_metrics,
    evaluate_split,
    predict_tags,
    tag_correct,
    train_sequential,
)
from .wavelet import denoise

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _fmt_of(path: str) -> str:
    ext = Path(path).suffix.lower()
    if ext == ".csv":
        return "csv"
    if ext == ".json":
        return "json"
    raise RecordError(f"cannot tell the record format of {path!r} (use .csv or .json)")


def load_record(path: str) -> EcgRecord:
    with open(path, "rb") as fh:
        return read_record(fh.read(), _fmt_of(path), source_id=Path(path).stem)


def save_bytes(path: str, data: bytes):
    parent = Path(path).parent
    parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def save_text(path: str, text: str):
    save_bytes(path, text.encode("utf-8"))


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_dataset_dir(path: str) -> list[EcgRecord]:
    p = Path(path)
    if not p.is_dir():
        raise RecordError(f"dataset directory {path!r} does not exist")
    files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".csv", ".json"))
    if not files:
        raise RecordError(f"no .csv or .json records in {path!r}")
    return [load_record(str(f)) for f in files]


def load_checkpoint(path: str, expect=None) -> ECGNet:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return ECGNet.from_json(text, expect)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise RecordError(f"unreadable checkpoint {path!r}: {exc}") from None
    except ValueError as exc:
        raise CheckpointMismatch(str(exc)) from None


def run_config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.lead is not None:
        cfg = replace(cfg, lead=args.lead)
    if args.format is not None:
        cfg = replace(cfg, format=args.format)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _model_pinned(args) -> bool:
    """True when the user set any model.* key, so a checkpoint must agree."""
    if any(s.split("=", 1)[0].strip().startswith("model.") for s in args.set or []):
        return True
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            return any(ln.split("#", 1)[0].strip().startswith("model.") for ln in fh)
    return False


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _outputs_for(inputs: list[str], out: str | None, suffix: str) -> list[str]:
    if out is None:
        raise UsageError("--out is required")
    if len(inputs) == 1 and not out.endswith(os.sep) and not Path(out).is_dir():
        return [out]
    return [str(Path(out) / (Path(i).stem + suffix)) for i in inputs]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    fmt = args.format or "json"
    seed = args.seed or 0
    if args.count is not None:
        if args.count < 1:
            raise UsageError("--count must be >= 1")
        tags = tuple(t.strip() for t in args.tags.split(",")) if args.tags else None
        kw = {"tags": tags} if tags else {}
        recs = synth_dataset(args.count, seed=seed, n_channels=args.channels,
                             snr_db=None if args.snr is None else args.snr, **kw)
        for i, rec in enumerate(recs):
            save_bytes(str(Path(args.out) / f"rec_{i:05d}.{fmt}"), write_record(rec, fmt))
        return EXIT_OK
    spec = SynthSpec(heart_rate_bpm=args.hr, pr_ms=args.pr, qrs_ms=args.qrs, qt_ms=args.qt,
                     r_amp_mv=args.r_amp, st_mv=args.st, noise_snr_db=args.snr,
                     n_channels=args.channels, seed=seed, label=args.label)
    rec, _ = synth_ecg(spec)
    save_bytes(args.out, write_record(rec, fmt))
    return EXIT_OK


def _record_transform(args, fn, suffix: str) -> int:
    fmt = args.format or "json"
    outs = _outputs_for(args.inputs, args.out, f"{suffix}.{fmt}")

    def work(pair):
        src, dst = pair
        save_bytes(dst, write_record(fn(load_record(src)), fmt))

    _map(work, list(zip(args.inputs, outs)), args.workers)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    return _record_transform(args, lambda r: normalize_minmax(canonicalize(r)), "")


def cmd_denoise(args) -> int:
    def fn(rec):
        rec = canonicalize(rec)
        return replace(rec, channels=np.stack([denoise(ch, rate=rec.rate) for ch in rec.channels]))
    return _record_transform(args, fn, "")


def cmd_train(args) -> int:
    cfg = run_config(args)
    if not args.data:
        raise UsageError("train needs at least one --data directory")
    if args.out is None:
        raise UsageError("--out (checkpoint path) is required")
    seed = cfg.train.seed
    datasets = [records_to_set(load_dataset_dir(d), cfg.model, seed) for d in args.data]
    model = ECGNet(cfg.model, seed=seed)
    result = train_sequential(datasets, model, cfg.train)
    save_text(args.out, model.to_json())
    if args.history:
        save_text(args.history, result.history_jsonl())
    summary = {"best_val_accuracy": result.best_val_accuracy, "stopped_epoch": result.stopped_epoch,
               "params": count_parameters(model)["total"]}
    sys.stdout.write(dumps(summary))
    return EXIT_OK


def evaluate_records(model: ECGNet, ds: LabeledSet, batch_size: int = 64) -> dict:
    cfg = model.cfg
    x = ds.vectors.reshape(len(ds), cfg.n_channels, cfg.seq_len)
    labels = list(ds.labels)
    loss, acc, logits = evaluate_split(model, x, labels, batch_size)
    gate_pred = [0 if z < 0 else 1 for z in logits[:, 0]]
    gate_true = [0 if t == NORMAL else 1 for t in labels]
    gate = compute_metrics(gate_pred, logits[:, 0], gate_true, classes=[0, 1])
    out = {"loss": loss, "accuracy": acc, "gate": gate.to_dict()}
    tags = predict_tags(logits)
    known = [i for i, t in enumerate(labels) if t != "Abnormal"]
    if known:
        classes = sorted({labels[i] for i in known} | {tags[i] for i in known})
        if len(classes) > 2:
            m = compute_metrics([tags[i] for i in known], None, [labels[i] for i in known], classes=classes)
            out["multiclass"] = m.to_dict()
    out["correct"] = int(sum(tag_correct(p, t) for p, t in zip(tags, labels)))
    out["n"] = len(labels)
    return out


def cmd_eval(args) -> int:
    cfg = run_config(args)
    if not args.checkpoint or not args.data:
        raise UsageError("eval needs --checkpoint and --data")
    model = load_checkpoint(args.checkpoint, cfg.model if _model_pinned(args) else None)
    results = []
    for d in args.data:
        ds = records_to_set(load_dataset_dir(d), model.cfg, cfg.train.seed)
        results.append(evaluate_records(model, ds, cfg.train.micro_batch or 64))
    text = dumps(results if len(results) > 1 else results[0])
    if args.out:
        save_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_combo(text: str) -> dict:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in ALL_FLAGS]
    if bad:
        raise UsageError(f"unknown module flag(s) {bad}; choose from {list(ALL_FLAGS)}")
    return {f: f in names for f in ALL_FLAGS}


def cmd_ablate(args) -> int:
    cfg = run_config(args)
    if not args.data:
        raise UsageError("ablate needs --data")
    combos = [_parse_combo(c) for c in args.ablate_flags] if args.ablate_flags else list(ABLATION_COMBOS)
    for c in combos:
        try:
            cfg.model.with_flags(**c)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    ds = records_to_set(load_dataset_dir(args.data[0]), cfg.model, cfg.train.seed)
    rows = run_ablation(cfg.model, ds, cfg.train, combos, model_seed=cfg.train.seed)
    text = dumps(ablation_table(rows))
    if args.out:
        save_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = run_config(args)
    if not args.checkpoint:
        raise UsageError("predict needs --checkpoint")
    if not args.inputs:
        raise UsageError("predict needs at least one record")
    model = load_checkpoint(args.checkpoint, cfg.model if _model_pinned(args) else None)
    recs = [load_record(p) for p in args.inputs]
    # the model keeps per-call caches, so predictions run in order
    reports = [predict_end_to_end(r, model, cfg.lead) for r in recs]
    texts = [r.to_json() + "\n" for r in reports]
    if args.out is None:
        sys.stdout.write("".join(texts))
    else:
        for dst, text in zip(_outputs_for(args.inputs, args.out, ".report.json"), texts):
            save_text(dst, text)
    if args.svg:
        svgs = _outputs_for(args.inputs, args.svg, ".svg")
        for rec, rep, dst in zip(recs, reports, svgs):
            save_text(dst, _svg_for(rec, rep, cfg.lead))
    return EXIT_OK


def _svg_for(rec: EcgRecord, report: DiagnosisReport, lead: int) -> str:
    r = resample_to_rate(rec, CANONICAL_RATE)
    sig = denoise(r.channels[lead], rate=r.rate, baseline=False)
    return render_svg(sig, r.rate, report)


def cmd_report(args) -> int:
    cfg = run_config(args)
    if not args.inputs or not args.report or not args.out:
        raise UsageError("report needs a record, --report and --out")
    rec = load_record(args.inputs[0])
    with open(args.report, encoding="utf-8") as fh:
        try:
            report = DiagnosisReport.from_json(fh.read())
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"unreadable report {args.report!r}: {exc}") from None
    if not 0 <= cfg.lead < rec.n_channels:
        raise RecordError(f"lead {cfg.lead} out of range for {rec.n_channels} channels")
    save_text(args.out, _svg_for(rec, report, cfg.lead))
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = run_config(args)
    counts = count_parameters(ECGNet(cfg.model, seed=cfg.train.seed))
    text = dumps(counts)
    if args.out:
        save_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--lead", type=int, default=None, help="lead index for symbolic analysis")
    common.add_argument("--format", choices=("csv", "json"), default=None, help="record output format")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--workers", type=int, default=1, help="worker threads for per-record work")

    p = argparse.ArgumentParser(prog="cardiosym", description="ECG preprocessing, training and diagnosis reports")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic records")
    s.add_argument("--count", type=int, help="write a labelled dataset of this many records into --out")
    s.add_argument("--tags", help="comma-separated class tags to cycle through (dataset mode)")
    s.add_argument("--hr", type=float, default=75.0)
    s.add_argument("--pr", type=float, default=160.0)
    s.add_argument("--qrs", type=float, default=100.0)
    s.add_argument("--qt", type=float, default=400.0)
    s.add_argument("--r-amp", type=float, default=1.0)
    s.add_argument("--st", type=float, default=0.0)
    s.add_argument("--snr", type=float, default=None, help="additive noise SNR in dB")
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--label", default=None)
    s.set_defaults(func=cmd_synth)

    for name, func, text in (("preprocess", cmd_preprocess, "canonicalize and min-max normalize records"),
                             ("denoise", cmd_denoise, "canonicalize and wavelet-denoise records")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("inputs", nargs="+")
        s.set_defaults(func=func)

    s = sub.add_parser("train", parents=[common], help="train on one or more dataset directories in order")
    s.add_argument("--data", action="append", default=[])
    s.add_argument("--history", help="write per-epoch history as JSON lines")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on dataset directories")
    s.add_argument("--checkpoint")
    s.add_argument("--data", action="append", default=[])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and score module combinations")
    s.add_argument("--data", action="append", default=[])
    s.add_argument("--ablate-flags", action="append", default=[],
                   help="comma-separated enabled modules for one row (repeatable); default: the 8 reference combinations")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("predict", parents=[common], help="diagnosis report for records")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--checkpoint")
    s.add_argument("--svg", help="also write an annotated waveform SVG")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("report", parents=[common], help="render a report as an annotated SVG")
    s.add_argument("inputs", nargs=1)
    s.add_argument("--report")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("params", parents=[common], help="parameter count per block")
    s.set_defaults(func=cmd_params)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cardiosym: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"cardiosym: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RecordError, CheckpointMismatch, OSError, ValueError) as exc:
        print(f"cardiosym: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
