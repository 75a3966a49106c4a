"""Shared fixtures and independent oracles for the test suite."""

from fractions import Fraction

import numpy as np

from cardiosym.imbalance import LabeledSet
from cardiosym.model import ModelConfig
from cardiosym.nn_core import grad_check, module_objective

SMALL_CFG = ModelConfig(n_channels=1, seq_len=128, hidden=8, tst_dim=8, tst_heads=2,
                        head_hidden=32, adaptive_out=8)

# acceptance criterion id -> (passed, detail); filled by test_acceptance
RESULTS: dict[str, tuple[bool, str]] = {}


def blob_set(n: int = 200, length: int = 128, seed: int = 0) -> LabeledSet:
    """Two separable classes at +-1.5 along a smooth direction, plus N(0, 0.25) noise."""
    rng = np.random.default_rng(seed)
    u = np.sin(2 * np.pi * 2 * np.arange(length) / length)
    u /= np.linalg.norm(u)
    y = np.array([0] * (n // 2) + [1] * (n - n // 2))
    x = rng.normal(size=(n, length)) * 0.5 + np.where(y[:, None] == 1, 1.5, -1.5) * u
    labels = ["Normal" if v == 0 else "Abnormal" for v in y]
    return LabeledSet(x, labels, seed)


def perceptron_separates(x: np.ndarray, y: np.ndarray, max_iter: int = 10000) -> bool:
    """Rosenblatt perceptron; converges iff the data is linearly separable."""
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    s = 2 * np.asarray(y) - 1
    w = np.zeros(xa.shape[1])
    for _ in range(max_iter):
        bad = np.flatnonzero(s * (xa @ w) <= 0)
        if bad.size == 0:
            return True
        w += s[bad[0]] * xa[bad[0]]
    return False


def check_module(module, x, wrt="params", eps=1e-4) -> float:
    f, start = module_objective(module, x, wrt=wrt)
    try:
        return grad_check(f, start, eps)
    finally:
        f(start)


def kink_free_points(build, count=10, min_margin=1e-3, max_tries=200):
    """Yield ``count`` (module, x) pairs whose forward pass sits >= min_margin from any kink."""
    found = 0
    for seed in range(max_tries):
        module, x = build(np.random.default_rng(seed))
        module.forward(x)
        if module.kink_margin() < min_margin:
            continue
        yield seed, module, x
        found += 1
        if found == count:
            return
    raise AssertionError(f"only {found} kink-free points in {max_tries} seeds")


# --------------------------------------------------------------------------
# exact rational oracle for the symbolic rules
# --------------------------------------------------------------------------

def _q(x) -> Fraction:
    return Fraction(repr(float(x)))


def oracle_probabilities(hr, pr, qrs, qt, st, r_amp) -> dict:
    hr, pr, qrs, qt, st, r_amp = map(_q, (hr, pr, qrs, qt, st, r_amp))
    lo, hi = Fraction(1, 10), Fraction(9, 10)

    am = abs(hr - 75) / 50
    if am < lo:
        am = lo
    if am > hi:
        am = hi

    pr_term = (pr - 200) / 100
    if pr_term < 0:
        pr_term = Fraction(0)
    if pr_term > Fraction(4, 10):
        pr_term = Fraction(4, 10)
    qrs_term = (qrs - 120) / 40
    if qrs_term < 0:
        qrs_term = Fraction(0)
    if qrs_term > Fraction(4, 10):
        qrs_term = Fraction(4, 10)
    cd = lo + pr_term + qrs_term
    if cd > hi:
        cd = hi

    st_term = 3 * abs(st)
    if st_term > Fraction(6, 10):
        st_term = Fraction(6, 10)
    mi = lo + st_term
    if qrs > 100:
        mi += Fraction(2, 10)
    if mi > hi:
        mi = hi

    if qt > 460:
        qtp = Fraction(6, 10) + (qt - 460) / 100
    elif qt < 350:
        qtp = Fraction(6, 10) + (350 - qt) / 100
    else:
        qtp = lo
    if qtp > hi:
        qtp = hi

    a_term = (r_amp - 2) / 2
    if a_term < 0:
        a_term = Fraction(0)
    if a_term > Fraction(5, 10):
        a_term = Fraction(5, 10)
    w_term = (qrs - 110) / 30
    if w_term < 0:
        w_term = Fraction(0)
    if w_term > Fraction(3, 10):
        w_term = Fraction(3, 10)
    he = lo + a_term + w_term
    if he > hi:
        he = hi

    return {k: float(v) for k, v in (("AM", am), ("CD", cd), ("MI", mi), ("QT", qtp), ("HE", he))}


def oracle_resolution(probs: dict) -> tuple[str, float]:
    """Highest probability; ties go to the class listed first in MI, AM, CD, QT, HE."""
    order = ["MI", "AM", "CD", "QT", "HE"]
    best = max(probs[c] for c in order)
    for c in order:
        if probs[c] == best:
            return c, best
    raise AssertionError


# --------------------------------------------------------------------------
# brute-force metrics
# --------------------------------------------------------------------------

def brute_auc(scores, truths) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    pos = [s for s, t in zip(scores, truths) if t == 1]
    neg = [s for s, t in zip(scores, truths) if t == 0]
    total = Fraction(0)
    for p in pos:
        for q in neg:
            total += 1 if p > q else Fraction(1, 2) if p == q else 0
    return float(total / (len(pos) * len(neg)))
