"""Diagonal-covariance Gaussian and GMM hidden Markov models.

Training is multi-sequence Baum-Welch (statistics accumulated over every
sequence per iteration); scoring is the log-space forward algorithm.
Classification trains one model per class and picks the class whose model
gives the utterance the highest log-likelihood.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VAR_FLOOR = 1e-3
_LOG2PI = np.log(2.0 * np.pi)


class HmmError(ValueError):
    pass


def _as_obs(obs) -> np.ndarray:
    data = getattr(obs, "data", obs)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


@dataclass(eq=False)
class GmmHmm:
    """HMM whose state emissions are diagonal Gaussian mixtures.

    Arrays: ``initial (S,)``, ``transition (S, S)``, ``weights (S, M)``,
    ``means (S, M, D)``, ``variances (S, M, D)``.
    """

    initial: np.ndarray
    transition: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    topology: str = "ergodic"
    var_floor: float = VAR_FLOOR
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.maximum(np.asarray(self.variances, dtype=np.float64), self.var_floor)
        S, M, D = self.means.shape
        if self.initial.shape != (S,) or self.transition.shape != (S, S):
            raise HmmError("initial/transition shapes do not match the state count")
        if self.weights.shape != (S, M) or self.variances.shape != (S, M, D):
            raise HmmError("mixture parameter shapes are inconsistent")

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    @property
    def n_components(self) -> int:
        return self.means.shape[1]

    @property
    def n_dims(self) -> int:
        return self.means.shape[2]

    # -- emissions -----------------------------------------------------------

    def component_loglik(self, x: np.ndarray) -> np.ndarray:
        """``log w_sm + log N(x_t; mu_sm, var_sm)`` with shape ``(..., T, S, M)``."""
        # expanded quadratic form: matrix products instead of a (..., T, S, M, D) temporary
        S, M, D = self.means.shape
        inv = (1.0 / self.variances).reshape(S * M, D)
        mu = self.means.reshape(S * M, D)
        flat = np.asarray(x).reshape(-1, D)
        quad = (flat * flat) @ inv.T - 2.0 * flat @ (mu * inv).T + np.sum(mu * mu * inv, axis=-1)
        quad = quad.reshape(*np.shape(x)[:-1], S, M)
        norm = np.sum(np.log(self.variances), axis=-1) + self.n_dims * _LOG2PI
        return _log(self.weights) - 0.5 * (quad + norm)

    def emission_loglik(self, x: np.ndarray) -> np.ndarray:
        """``log b_s(x_t)`` with shape ``(..., T, S)``."""
        comp = self.component_loglik(x)
        if self.n_components == 1:
            return comp[..., 0]
        return _logsumexp(comp, axis=-1)

    # -- scoring -------------------------------------------------------------

    def loglik(self, obs) -> float:
        return forward_loglik(self, obs)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "type": "gmmhmm" if self.n_components > 1 else "gaussianhmm",
            "topology": self.topology,
            "var_floor": self.var_floor,
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmHmm":
        if d.get("version") != 1:
            raise HmmError(f"unsupported model version {d.get('version')!r}")
        return cls(
            np.array(d["initial"]),
            np.array(d["transition"]),
            np.array(d["weights"]),
            np.array(d["means"]),
            np.array(d["variances"]),
            topology=d.get("topology", "ergodic"),
            var_floor=d.get("var_floor", VAR_FLOOR),
            history=list(d.get("history", [])),
        )


class GaussianHmm(GmmHmm):
    """Single-Gaussian emissions; ``means``/``variances`` may be given as ``(S, D)``."""

    def __init__(self, initial, transition, means, variances, topology="ergodic", var_floor=VAR_FLOOR, history=None):
        means = np.asarray(means, dtype=np.float64)
        variances = np.asarray(variances, dtype=np.float64)
        if means.ndim == 2:
            means = means[:, None, :]
            variances = variances[:, None, :]
        super().__init__(
            initial,
            transition,
            np.ones(means.shape[:2]),
            means,
            variances,
            topology=topology,
            var_floor=var_floor,
            history=list(history or []),
        )

    @property
    def state_means(self) -> np.ndarray:
        return self.means[:, 0, :]

    @property
    def state_variances(self) -> np.ndarray:
        return self.variances[:, 0, :]


def _check_dims(model: GmmHmm, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != model.n_dims:
        raise HmmError(f"observation dims {x.shape[-1]} do not match model dims {model.n_dims}")
    if x.shape[0] < 1:
        raise HmmError("observation sequence is empty")


# ---------------------------------------------------------------------------
# forward / backward (batched over equal-length sequences)


def _forward(log_pi, log_A, log_b):
    """Log alphas ``(N, T, S)`` for emissions ``log_b (N, T, S)``."""
    N, T, S = log_b.shape
    la = np.empty((N, T, S))
    la[:, 0] = log_pi + log_b[:, 0]
    for t in range(1, T):
        la[:, t] = _logsumexp(la[:, t - 1, :, None] + log_A, axis=1) + log_b[:, t]
    return la


def _backward(log_A, log_b):
    N, T, S = log_b.shape
    lb = np.zeros((N, T, S))
    for t in range(T - 2, -1, -1):
        lb[:, t] = _logsumexp(log_A + (log_b[:, t + 1] + lb[:, t + 1])[:, None, :], axis=2)
    return lb


def forward_loglik(model: GmmHmm, obs) -> float:
    """``log p(obs | model)`` by the forward algorithm with log-sum-exp at every step."""
    x = _as_obs(obs)
    _check_dims(model, x)
    log_b = model.emission_loglik(x)[None]
    la = _forward(_log(model.initial), _log(model.transition), log_b)
    return float(_logsumexp(la[0, -1], axis=0))


# ---------------------------------------------------------------------------
# training


def _initial_topology(n_states: int, topology: str):
    if topology == "ergodic":
        return np.full(n_states, 1.0 / n_states), np.full((n_states, n_states), 1.0 / n_states)
    if topology == "left-to-right":
        pi = np.zeros(n_states)
        pi[0] = 1.0
        A = np.zeros((n_states, n_states))
        for i in range(n_states):
            if i + 1 < n_states:
                A[i, i] = A[i, i + 1] = 0.5
            else:
                A[i, i] = 1.0
        return pi, A
    raise HmmError(f"unknown topology {topology!r}")


def _segmental_init(seqs, n_states, n_components, rng, var_floor):
    """Split each sequence into ``n_states`` contiguous chunks; seed state s from chunk s."""
    D = seqs[0].shape[1]
    per_state = [[] for _ in range(n_states)]
    for x in seqs:
        for s, chunk in enumerate(np.array_split(x, n_states)):
            if len(chunk):
                per_state[s].append(chunk)
    pooled_all = np.concatenate(seqs)
    weights = np.zeros((n_states, n_components))
    means = np.zeros((n_states, n_components, D))
    variances = np.zeros((n_states, n_components, D))
    for s in range(n_states):
        data = np.concatenate(per_state[s]) if per_state[s] else pooled_all
        if n_components == 1:
            weights[s, 0] = 1.0
            means[s, 0] = data.mean(axis=0)
            variances[s, 0] = data.var(axis=0)
            continue
        # a few k-means passes from seeded random frames
        pick = rng.choice(len(data), size=n_components, replace=len(data) < n_components)
        centers = data[pick].copy()
        for _ in range(5):
            d2 = ((data[:, None, :] - centers[None]) ** 2).sum(-1)
            assign = np.argmin(d2, axis=1)
            for m in range(n_components):
                if np.any(assign == m):
                    centers[m] = data[assign == m].mean(axis=0)
        for m in range(n_components):
            members = data[assign == m]
            if len(members) < 2:
                members = data
            weights[s, m] = max(np.sum(assign == m), 1)
            means[s, m] = centers[m]
            variances[s, m] = members.var(axis=0)
        weights[s] /= weights[s].sum()
    return weights, means, np.maximum(variances, var_floor)


def _groups_by_length(seqs):
    groups = {}
    for x in seqs:
        groups.setdefault(x.shape[0], []).append(x)
    return [np.stack(g) for _, g in sorted(groups.items())]


def baum_welch_fit(
    sequences: Sequence,
    n_states: int = 3,
    n_components: int = 1,
    max_iter: int = 50,
    tol: float = 1e-4,
    seed: int = 0,
    topology: str = "ergodic",
    var_floor: float = VAR_FLOOR,
) -> GmmHmm:
    """Fit an HMM to ``sequences`` by EM.

    Stops once the total log-likelihood improves by less than ``tol`` or
    after ``max_iter`` iterations. The returned model's ``history`` holds the
    total log-likelihood at the start of every iteration plus the final one.
    """
    seqs = [_as_obs(s) for s in sequences]
    if not seqs:
        raise HmmError("no training sequences")
    if n_states < 1 or n_components < 1:
        raise HmmError("n_states and n_components must be >= 1")
    D = seqs[0].shape[1]
    for i, x in enumerate(seqs):
        if x.shape[1] != D:
            raise HmmError(f"sequence {i} has {x.shape[1]} dims, expected {D}")
        if x.shape[0] < n_states:
            raise HmmError(f"sequence {i} has {x.shape[0]} frames, fewer than {n_states} states")
    rng = np.random.default_rng(seed)
    pi, A = _initial_topology(n_states, topology)
    w, mu, var = _segmental_init(seqs, n_states, n_components, rng, var_floor)
    model = GmmHmm(pi, A, w, mu, var, topology=topology, var_floor=var_floor)
    groups = _groups_by_length(seqs)

    history: list[float] = []
    for _ in range(max_iter):
        total, stats = _e_step(model, groups)
        history.append(total)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        _m_step(model, stats)
    else:
        history.append(_e_step(model, groups)[0])
    model.history = history
    return model


def _e_step(model: GmmHmm, groups):
    S, M, D = model.means.shape
    log_pi = _log(model.initial)
    log_A = _log(model.transition)
    total = 0.0
    g0 = np.zeros(S)
    xi = np.zeros((S, S))
    occ = np.zeros((S, M))
    sx = np.zeros((S, M, D))
    sxx = np.zeros((S, M, D))
    for X in groups:
        comp = model.component_loglik(X)  # (N, T, S, M)
        log_b = comp[..., 0] if M == 1 else _logsumexp(comp, axis=-1)
        la = _forward(log_pi, log_A, log_b)
        lb = _backward(log_A, log_b)
        ll = _logsumexp(la[:, -1], axis=1)  # (N,)
        total += float(ll.sum())
        gamma = np.exp(la + lb - ll[:, None, None])  # (N, T, S)
        g0 += gamma[:, 0].sum(axis=0)
        if X.shape[1] > 1:
            lxi = (
                la[:, :-1, :, None]
                + log_A
                + (log_b[:, 1:] + lb[:, 1:])[:, :, None, :]
                - ll[:, None, None, None]
            )
            xi += np.exp(lxi).sum(axis=(0, 1))
        if M == 1:
            resp = gamma[..., None]
        else:
            resp = gamma[..., None] * np.exp(comp - log_b[..., None])
        occ += resp.sum(axis=(0, 1))
        sx += np.einsum("ntsm,ntd->smd", resp, X)
        sxx += np.einsum("ntsm,ntd->smd", resp, X * X)
    return total, (g0, xi, occ, sx, sxx)


def _m_step(model: GmmHmm, stats) -> None:
    g0, xi, occ, sx, sxx = stats
    model.initial = g0 / g0.sum()
    rows = xi.sum(axis=1, keepdims=True)
    model.transition = np.where(rows > 0, xi / np.where(rows > 0, rows, 1.0), model.transition)
    state_occ = occ.sum(axis=1, keepdims=True)
    used = occ > 1e-10
    new_w = np.where(state_occ > 0, occ / np.where(state_occ > 0, state_occ, 1.0), model.weights)
    safe = np.where(used, occ, 1.0)[..., None]
    new_mu = sx / safe
    new_var = sxx / safe - new_mu * new_mu
    model.weights = new_w
    model.means = np.where(used[..., None], new_mu, model.means)
    model.variances = np.maximum(np.where(used[..., None], new_var, model.variances), model.var_floor)


def sample_sequence(model: GmmHmm, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one ``(n_frames, D)`` observation sequence from ``model``."""
    S, M, D = model.means.shape
    out = np.empty((n_frames, D))
    s = rng.choice(S, p=model.initial)
    for t in range(n_frames):
        m = rng.choice(M, p=model.weights[s])
        out[t] = model.means[s, m] + np.sqrt(model.variances[s, m]) * rng.standard_normal(D)
        s = rng.choice(S, p=model.transition[s])
    return out


# ---------------------------------------------------------------------------
# classifier


@dataclass(eq=False)
class HmmClassifier:
    models: dict[int, GmmHmm]
    class_names: list[str]

    def __post_init__(self):
        missing = [i for i in range(len(self.class_names)) if i not in self.models]
        if missing:
            raise HmmError(f"no model for labels {missing}")

    def logliks(self, obs) -> np.ndarray:
        return np.array([forward_loglik(self.models[i], obs) for i in range(len(self.class_names))])

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "class_names": list(self.class_names),
            "models": [self.models[i].to_dict() for i in range(len(self.class_names))],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmmClassifier":
        if d.get("version") != 1:
            raise HmmError(f"unsupported classifier version {d.get('version')!r}")
        return cls({i: GmmHmm.from_dict(m) for i, m in enumerate(d["models"])}, list(d["class_names"]))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "HmmClassifier":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def train_classifier(
    sequences: Sequence,
    labels: Sequence[int],
    class_names: Sequence[str],
    n_states: int = 3,
    n_components: int = 1,
    seed: int = 0,
    **fit_kwargs,
) -> HmmClassifier:
    """One :func:`baum_welch_fit` per label, each seeded with ``seed + label``."""
    by_label: dict[int, list] = {i: [] for i in range(len(class_names))}
    for x, y in zip(sequences, labels):
        if y not in by_label:
            raise HmmError(f"label {y} outside scheme of {len(class_names)} classes")
        by_label[y].append(x)
    empty = [class_names[i] for i, xs in by_label.items() if not xs]
    if empty:
        raise HmmError(f"no training sequences for label(s) {empty}")
    models = {
        i: baum_welch_fit(xs, n_states, n_components, seed=seed + i, **fit_kwargs)
        for i, xs in by_label.items()
    }
    return HmmClassifier(models, list(class_names))


def classify(clf: HmmClassifier, obs) -> tuple[int, np.ndarray]:
    """Argmax of per-class log-likelihoods; ties go to the lowest label index."""
    ll = clf.logliks(obs)
    return int(np.argmax(ll)), ll
