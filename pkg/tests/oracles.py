"""Slow, direct reference implementations used only by the tests."""
import numpy as np


def transducer_cdf(support, masses, deferred, y, phi):
    """Loop form of the randomised split-transducer CDF."""
    total = 0.0
    for q, p in zip(support, masses):
        if q < y:
            total += p
        elif q == y:
            total += phi * p
    return total + phi * deferred


def difference_cdf(s1, p1, u1, s0, p0, u0, y, phi):
    """Double sum over all (i, j) pairs of ``q1_i - q0_j``."""
    total = 0.0
    for a, pa in zip(s1, p1):
        for b, pb in zip(s0, p0):
            d = a - b
            if d < y:
                total += pa * pb
            elif d == y:
                total += pa * pb * phi
    return total + (1 - (1 - u1) * (1 - u0)) * phi


def lowest_reaching(support, masses, deferred, level, low):
    """Scan support in order; deferred mass counted first (low) or never (high)."""
    acc = deferred if low else 0.0
    if low and acc >= level - 1e-12:
        return -np.inf
    for q, p in zip(support, masses):
        acc += p
        if acc >= level - 1e-12:
            return q
    return np.inf


def weighted_masses(scores, w_cal, w_test):
    """``p_i = w_i / (sum w + w_test)`` with ties merged, plus deferred mass."""
    denom = sum(w_cal) + w_test
    out = {}
    for s, w in zip(scores, w_cal):
        out[s] = out.get(s, 0.0) + w / denom
    keys = sorted(out)
    return np.array(keys), np.array([out[k] for k in keys]), w_test / denom


def random_cpd(rng, n_max=50, ties=True):
    from conformal_ite.distributions import DiscreteCPD

    n = int(rng.integers(1, n_max + 1))
    if ties:
        values = rng.integers(-20, 21, size=n).astype(float) / 4
    else:
        values = rng.normal(size=n)
    raw = rng.random(n) + 0.01
    u = float(rng.choice([0.0, rng.random() * 0.3]))
    masses = raw / raw.sum() * (1 - u)
    return DiscreteCPD.from_points(values, masses, u)
