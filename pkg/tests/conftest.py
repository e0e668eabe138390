import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from speechemo.audio import Waveform

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, seconds, sr=16000, amp=1.0, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), sr)


def naive_dft(x, n):
    """O(n^2) DFT of ``x`` zero-padded to ``n``, straight from the definition."""
    x = np.concatenate([np.asarray(x, dtype=np.float64), np.zeros(n - len(x))])
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


def fd_error(forward, arrays, analytic, eps, r):
    """Max |analytic - central difference| over each tensor, scaled by that tensor's largest gradient.

    The scalar objective is ``sum(forward() * r)`` so ``r`` is the upstream gradient.
    """
    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            lp = float(np.sum(forward().astype(np.float64) * r))
            flat[k] = old - eps
            lm = float(np.sum(forward().astype(np.float64) * r))
            flat[k] = old
            num[k] = (lp - lm) / (2 * eps)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        scale = max(np.abs(ana).max(), np.abs(num).max(), 1e-12)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst


def log_normal(x, mu, var):
    return float(np.sum(-0.5 * (np.log(2 * np.pi * var) + (x - mu) ** 2 / var)))


def _log_emission(model, s, x):
    comps = [np.log(model.weights[s, m]) + log_normal(x, model.means[s, m], model.variances[s, m])
             for m in range(model.n_components)]
    return float(np.logaddexp.reduce(comps))


def enumerate_loglik(model, obs):
    """Oracle: log of the sum over every state path, one log term per path."""
    S, T = model.n_states, len(obs)
    terms = []
    with np.errstate(divide="ignore"):
        for path in itertools.product(range(S), repeat=T):
            lp = np.log(model.initial[path[0]]) + _log_emission(model, path[0], obs[0])
            for t in range(1, T):
                lp += np.log(model.transition[path[t - 1], path[t]]) + _log_emission(model, path[t], obs[t])
            terms.append(lp)
    return float(np.logaddexp.reduce(terms))
