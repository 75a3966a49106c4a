"""Loss, Adam, sequential multi-dataset training and evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .imbalance import LabeledSet, balance_two_stage
from .model import DISEASES, ECGNet
from .nn_core import NumericError, sigmoid

NORMAL = "Normal"
ABNORMAL = "Abnormal"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    patience: int = 10
    max_epochs: int = 100
    batch_size: int = 32
    micro_batch: int = 0  # 0 = forward the whole batch at once
    split_ratio: float = 0.8
    seed: int = 0
    balance: bool = True
    adasyn_k: int = 5
    adasyn_beta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.micro_batch < 0:
            raise ValueError("micro_batch must be >= 0")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def stable_binary_cross_entropy(logit, target):
    """max(z, 0) - z*y + log(1 + exp(-|z|)); elementwise on arrays."""
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logit")
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise ValueError("targets must lie in [0, 1]")
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out


def gate_targets(labels) -> np.ndarray:
    return np.array([0.0 if t == NORMAL else 1.0 for t in labels])


def two_stage_loss(logits: np.ndarray, labels, n_total: int | None = None,
                   n_tagged: int | None = None) -> tuple[float, np.ndarray]:
    """Mean gate BCE plus, over abnormal samples with a disease tag, the mean
    of five one-vs-rest BCE terms.  Returns (loss, d loss / d logits).

    ``n_total`` and ``n_tagged`` override the two denominators so that a batch
    split into chunks sums to the whole-batch loss and gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0] if n_total is None else n_total
    y = gate_targets(labels)
    z = logits[:, 0]
    loss = float(np.sum(stable_binary_cross_entropy(z, y)) / n)
    grad = np.zeros_like(logits)
    grad[:, 0] = (sigmoid(z) - y) / n

    tagged = [i for i, t in enumerate(labels) if t in DISEASES]
    if tagged:
        idx = np.array(tagged)
        onehot = np.zeros((idx.size, len(DISEASES)))
        onehot[np.arange(idx.size), [DISEASES.index(labels[i]) for i in tagged]] = 1.0
        zm = logits[idx, 1:]
        k = (idx.size if n_tagged is None else n_tagged) * len(DISEASES)
        loss += float(np.sum(stable_binary_cross_entropy(zm, onehot)) / k)
        grad[idx, 1:] = (sigmoid(zm) - onehot) / k
    return loss, grad


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> tuple[dict, AdamState]:
    """One Adam step with weight decay added to the gradient (coupled L2).

    Pure: returns new parameter arrays and a new state.
    """
    if state.step < 0:
        raise ValueError("step counter must be >= 0")
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same names")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        new_p[name] = p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return new_p, AdamState(t, new_m, new_v)


# --------------------------------------------------------------------------
# early stopping
# --------------------------------------------------------------------------

class EarlyStopping:
    """Maximize-mode patience counter; remembers the best state it was shown."""

    def __init__(self, patience: int = 10):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.best_state = None
        self.bad_epochs = 0

    def update(self, value: float, epoch: int, state=None) -> bool:
        """Record one epoch; True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch, self.best_state = value, epoch, state
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ECGNet
    history: list[dict]
    best_val_accuracy: list[float]
    stopped_epoch: list[int]
    splits: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def history_jsonl(self) -> str:
        return history_jsonl(self.history)


def history_jsonl(history: list[dict]) -> str:
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in history)


def stratified_split(labels, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class seeded shuffle; each class with >= 2 members keeps >= 1 on both sides."""
    labels = list(labels)
    train, val = [], []
    for tag in sorted(set(labels), key=str):
        idx = np.array([i for i, t in enumerate(labels) if t == tag])
        idx = idx[rng.permutation(idx.size)]
        n_tr = int(math.floor(ratio * idx.size + 0.5))
        if idx.size >= 2:
            n_tr = min(max(n_tr, 1), idx.size - 1)
        train += idx[:n_tr].tolist()
        val += idx[n_tr:].tolist()
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


def predict_tags(logits: np.ndarray) -> list[str]:
    """Normal when the gate logit is negative, otherwise the top disease logit."""
    logits = np.asarray(logits)
    return [NORMAL if z[0] < 0 else DISEASES[int(np.argmax(z[1:]))] for z in logits]


def tag_correct(pred: str, truth: str) -> bool:
    if truth == ABNORMAL:
        return pred != NORMAL
    return pred == truth


def _as_inputs(s: LabeledSet, model: ECGNet) -> np.ndarray:
    c, L = model.cfg.n_channels, model.cfg.seq_len
    if s.dim != c * L:
        raise ValueError(f"vectors of dimension {s.dim} do not reshape to ({c}, {L})")
    return s.vectors.reshape(len(s), c, L)


def forward_batched(model: ECGNet, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [model.forward(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out, axis=0)


def evaluate_split(model: ECGNet, x: np.ndarray, labels, batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    """(loss, accuracy, logits) in BN eval mode; training mode is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        logits = forward_batched(model, x, batch_size)
    finally:
        model.train(was_training)
    loss, _ = two_stage_loss(logits, labels)
    preds = predict_tags(logits)
    acc = float(np.mean([tag_correct(p, t) for p, t in zip(preds, labels)]))
    return loss, acc, logits


def _apply_adam(model: ECGNet, state: AdamState, cfg: TrainConfig) -> AdamState:
    params = dict(model.named_parameters())
    grads = {k: v for k, v in model.named_grads()}
    new_p, state = adam_update(params, grads, state, cfg)
    for k, dst in params.items():
        dst[...] = new_p[k]
    return state


def train_one_epoch(model: ECGNet, x: np.ndarray, labels, opt: AdamState, cfg: TrainConfig,
                    rng: np.random.Generator) -> tuple[float, float, AdamState]:
    model.train()
    order = rng.permutation(x.shape[0])
    total_loss, correct = 0.0, 0
    for start in range(0, order.size, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        lab = [labels[i] for i in idx]
        n_tagged = sum(t in DISEASES for t in lab)
        step = cfg.micro_batch or idx.size
        model.zero_grad()
        loss, parts = 0.0, []
        for lo in range(0, idx.size, step):
            chunk = model.forward(x[idx[lo:lo + step]])
            part, dlogits = two_stage_loss(chunk, lab[lo:lo + step], idx.size, n_tagged)
            if not math.isfinite(part):
                raise NumericError("non-finite training loss")
            model.backward(dlogits)
            loss += part
            parts.append(chunk)
        logits = np.concatenate(parts)
        opt = _apply_adam(model, opt, cfg)
        total_loss += loss * idx.size
        correct += sum(tag_correct(p, t) for p, t in zip(predict_tags(logits), lab))
    return total_loss / order.size, correct / order.size, opt


def train_sequential(datasets: list[LabeledSet], model: ECGNet, cfg: TrainConfig) -> TrainResult:
    """Train on each dataset in turn, carrying the weights forward.

    Per dataset: seeded stratified split, ADASYN on the training part only,
    epochs with early stopping on validation accuracy (maximize), then the
    best-validation weights are restored before moving on.
    """
    if not datasets:
        raise ValueError("train_sequential needs at least one dataset")
    history: list[dict] = []
    best_acc, stopped, splits = [], [], []
    for d_idx, ds in enumerate(datasets):
        rng = np.random.default_rng([cfg.seed, d_idx])
        tr_idx, va_idx = stratified_split(ds.labels, cfg.split_ratio, rng)
        splits.append((tr_idx, va_idx))
        train_set, val_set = ds.subset(tr_idx), ds.subset(va_idx)
        for name, part in (("train", train_set), ("validation", val_set)):
            gates = {NORMAL if t == NORMAL else ABNORMAL for t in part.labels}
            if len(gates) < 2:
                raise ValueError(f"dataset {d_idx} is too small: {name} split lacks Normal or Abnormal samples")
        if cfg.balance:
            train_set = balance_two_stage(LabeledSet(train_set.vectors, train_set.labels, cfg.seed + d_idx),
                                          cfg.adasyn_k, cfg.adasyn_beta)
        x_tr, y_tr = _as_inputs(train_set, model), list(train_set.labels)
        x_va, y_va = _as_inputs(val_set, model), list(val_set.labels)

        opt = AdamState()
        stopper = EarlyStopping(cfg.patience)
        epoch = 0
        for epoch in range(1, cfg.max_epochs + 1):
            tr_loss, tr_acc, opt = train_one_epoch(model, x_tr, y_tr, opt, cfg, rng)
            va_loss, va_acc, _ = evaluate_split(model, x_va, y_va, cfg.micro_batch or 64)
            if not math.isfinite(va_loss):
                raise NumericError("non-finite validation loss")
            history.append({"dataset": d_idx, "epoch": epoch, "split": "train", "loss": tr_loss, "accuracy": tr_acc})
            history.append({"dataset": d_idx, "epoch": epoch, "split": "validation", "loss": va_loss,
                            "accuracy": va_acc})
            if stopper.update(va_acc, epoch, model.state()):
                break
        model.load_state(stopper.best_state)
        best_acc.append(stopper.best)
        stopped.append(epoch)
    return TrainResult(model, history, best_acc, stopped, splits)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    auc: float | None
    confusion: tuple[tuple[int, ...], ...]
    classes: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = [list(r) for r in self.confusion]
        d["classes"] = list(self.classes)
        return d


def _ratio(num: int, den: int, errors: int) -> float:
    if den == 0:
        return 1.0 if errors == 0 else 0.0
    return num / den


def binary_rates(tp: int, fp: int, fn: int, tn: int) -> tuple[float, float, float, float]:
    """(precision, recall, f1, specificity) with the zero-denominator convention."""
    precision = _ratio(tp, tp + fp, fn)
    recall = _ratio(tp, tp + fn, fp)
    specificity = _ratio(tn, tn + fp, fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1, specificity


def compute_metrics(predictions, scores, truths, classes=None) -> Metrics:
    """Confusion-based metrics; two classes are scored for ``classes[1]``,
    more are macro-averaged one-vs-rest.

    ``scores`` is a 1-D positive-class score for two classes or an
    ``(n, n_classes)`` array otherwise; pass None to skip AUC.
    """
    predictions, truths = list(predictions), list(truths)
    if not truths:
        raise ValueError("compute_metrics needs at least one sample")
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths must be parallel")
    if classes is None:
        classes = sorted(set(truths) | set(predictions), key=str)
        if len(classes) == 1:
            only = classes[0]
            classes = [0, 1] if only in (0, 1) else [only]
    classes = list(classes)
    pos = {c: i for i, c in enumerate(classes)}
    unknown = (set(truths) | set(predictions)) - set(classes)
    if unknown:
        raise ValueError(f"labels outside classes: {sorted(map(str, unknown))}")
    k = len(classes)
    conf = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(predictions, truths):
        conf[pos[t], pos[p]] += 1
    n = int(conf.sum())
    accuracy = int(np.trace(conf)) / n

    def ovr(j: int) -> tuple[int, int, int, int]:
        tp = int(conf[j, j])
        fp = int(conf[:, j].sum()) - tp
        fn = int(conf[j, :].sum()) - tp
        return tp, fp, fn, n - tp - fp - fn

    if k <= 2:
        rates = binary_rates(*ovr(k - 1))
    else:
        per = np.array([binary_rates(*ovr(j)) for j in range(k)])
        rates = tuple(float(v) for v in per.mean(axis=0))
    precision, recall, f1, specificity = rates

    auc = None
    if scores is not None:
        sc = np.asarray(scores, dtype=np.float64)
        if k <= 2:
            y = np.array([t == classes[-1] for t in truths], dtype=np.int64)
            if 0 < y.sum() < y.size:
                auc = roc_auc(sc if sc.ndim == 1 else sc[:, -1], y)
        else:
            if sc.shape != (n, k):
                raise ValueError(f"multiclass scores must have shape ({n}, {k})")
            aucs = []
            for j, c in enumerate(classes):
                y = np.array([t == c for t in truths], dtype=np.int64)
                if 0 < y.sum() < y.size:
                    aucs.append(roc_auc(sc[:, j], y))
            auc = float(np.mean(aucs)) if aucs else None
    return Metrics(accuracy, precision, recall, f1, specificity, auc,
                   tuple(tuple(int(v) for v in row) for row in conf), tuple(classes))


def roc_auc(scores, truths) -> float:
    """Probability a random positive outranks a random negative (ties count 1/2).

    Computed from mid-ranks, which equals the pairwise count exactly.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(truths).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and truths must be parallel")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("truths must be 0/1")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(s, method="average")
    u = float(np.sum(ranks[y == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
