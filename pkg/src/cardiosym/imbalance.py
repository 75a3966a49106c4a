"""ADASYN oversampling on flattened feature vectors."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


@dataclass(frozen=True, eq=False)
class LabeledSet:
    vectors: np.ndarray
    labels: tuple
    seed: int = 0

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64, copy=True)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError(f"vectors must be 2-D (n, dim), got shape {v.shape}")
        labels = tuple(self.labels)
        if len(labels) != v.shape[0]:
            raise ValueError(f"{v.shape[0]} vectors but {len(labels)} labels")
        if len(labels) < 2:
            raise ValueError("a LabeledSet needs at least 2 samples")
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, LabeledSet):
            return NotImplemented
        return (self.seed == other.seed and self.labels == other.labels
                and self.vectors.shape == other.vectors.shape
                and np.array_equal(self.vectors, other.vectors))

    __hash__ = None

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def counts(self) -> dict:
        return dict(Counter(self.labels))

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.vectors[idx], tuple(self.labels[i] for i in idx), self.seed)

    @classmethod
    def from_arrays(cls, x, labels, seed: int = 0) -> "LabeledSet":
        """Flatten ``(n, ...)`` samples (e.g. ``(n, channels, length)``) into vectors."""
        x = np.asarray(x, dtype=np.float64)
        return cls(x.reshape(x.shape[0], -1), labels, seed)


@dataclass(frozen=True)
class Synthetic:
    """Provenance of one synthetic point: ``x_seed + lam * (x_partner - x_seed)``."""

    seed_index: int
    partner_index: int
    lam: float


def _knn(d: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps index order among equal distances
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    quotas = weights * total
    base = np.floor(quotas).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        frac = quotas - base
        order = np.argsort(-frac, kind="stable")
        base[order[:short]] += 1
    return base


def adasyn_with_provenance(s: LabeledSet, k: int = 5, beta: float = 1.0,
                           targets: dict | None = None) -> tuple[LabeledSet, list[Synthetic]]:
    """ADASYN, also returning how each synthetic point was made.

    Every class smaller than the largest gets ``round((m_l - m_s) * beta)``
    new points.  Each member's share is proportional to the fraction of
    other-class points among its ``k`` nearest neighbours (uniform when every
    share is zero), split by largest remainder so the shares sum exactly.
    A new point interpolates between its seed and a random one of the seed's
    ``k`` nearest same-class neighbours.

    ``targets`` (class -> count) replaces the per-class counts derived from
    ``beta``; classes missing from it get no new points.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    labels = np.array(s.labels, dtype=object)
    counts = Counter(s.labels)
    if targets is None:
        m_l = max(counts.values())
        todo = {c: int(math.floor((m_l - m) * beta + 0.5)) for c, m in counts.items() if m < m_l}
    else:
        unknown = set(targets) - set(counts)
        if unknown or any(g < 0 for g in targets.values()):
            raise ValueError("targets must map existing classes to non-negative counts")
        todo = {c: int(g) for c, g in targets.items()}
    todo = {c: g for c, g in todo.items() if g > 0}
    if not todo:
        return s, []

    for c in todo:
        if counts[c] < 2:
            raise ValueError(f"class {c!r} has a single member; ADASYN cannot interpolate")

    x = s.vectors
    n = x.shape[0]
    dist = cdist(x, x, "sqeuclidean")
    np.fill_diagonal(dist, np.inf)
    k_all = min(k, n - 1)
    if k_all < k:
        warnings.warn(f"k={k} exceeds n-1={n - 1}; using {k_all} neighbours for density", stacklevel=2)

    rng = np.random.default_rng(s.seed)
    new_vecs, new_labels, prov = [], [], []
    for c in sorted(todo, key=str):
        g_total = todo[c]
        members = np.flatnonzero(labels == c)
        nn = _knn(dist[members], k_all)
        r = np.mean(labels[nn] != c, axis=1)
        w = r / r.sum() if r.sum() > 0 else np.full(members.size, 1.0 / members.size)
        alloc = _largest_remainder(w, g_total)

        clamped = 0
        for pos, i in enumerate(members):
            if alloc[pos] == 0:
                continue
            pool = np.flatnonzero(labels == c)
            pool = pool[pool != i]
            if pool.size == 0:
                raise ValueError(f"sample {i} has no same-class partner to interpolate with")
            k_same = min(k, pool.size)
            clamped += k_same < k
            near = pool[np.argsort(dist[i, pool], kind="stable")[:k_same]]
            for _ in range(int(alloc[pos])):
                z = int(near[rng.integers(k_same)])
                lam = float(rng.random())
                new_vecs.append(x[i] + lam * (x[z] - x[i]))
                new_labels.append(c)
                prov.append(Synthetic(int(i), z, lam))
        if clamped:
            warnings.warn(f"class {c!r}: k={k} exceeds the same-class neighbour count for {clamped} "
                          f"seed(s); clamped to the available neighbours", stacklevel=2)

    out = LabeledSet(np.vstack([x, np.array(new_vecs)]), s.labels + tuple(new_labels), s.seed)
    return out, prov


def adasyn_augment(s: LabeledSet, k: int = 5, beta: float = 1.0) -> LabeledSet:
    """Oversample every minority class towards the majority count.

    The originals are kept verbatim as a prefix of the result; equal seeds
    give bitwise-equal output.
    """
    return adasyn_with_provenance(s, k, beta)[0]


def _water_fill(counts: dict, total: int) -> dict:
    """Hand ``total`` units one at a time to the smallest class (ties by name)."""
    level = dict(counts)
    for _ in range(total):
        c = min(sorted(level, key=str), key=lambda t: level[t])
        level[c] += 1
    return {c: level[c] - counts[c] for c in counts}


def balance_two_stage(s: LabeledSet, k: int = 5, beta: float = 1.0, normal_tag: str = "Normal") -> LabeledSet:
    """Binary-then-multiclass balancing on the fine tags.

    The binary stage fixes how many points the minority gate side needs,
    ``round(|m_normal - m_abnormal| * beta)``.  When the abnormal side is the
    minority, the multiclass stage spreads those points over the disease tags
    by filling the smallest tags first.  ADASYN then places each tag's share
    by neighbourhood density, interpolating only within that tag.
    """
    counts = Counter(s.labels)
    m_n = counts.get(normal_tag, 0)
    abn = {t: m for t, m in counts.items() if t != normal_tag}
    m_a = sum(abn.values())
    if m_n == 0 or m_a == 0:
        return s
    g = int(math.floor(abs(m_n - m_a) * beta + 0.5))
    if g == 0:
        return s
    targets = {normal_tag: g} if m_n < m_a else _water_fill(abn, g)
    return adasyn_with_provenance(s, k, targets=targets)[0]
