"""Sampling possessions from a parameter set, and the benchmark scenarios."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr, ndtri

from .core import EventRecord, MixtureParams, PitchBounds, Possession

SCENARIOS = {"easy": 0.65, "intermediate": 0.50, "hard": 0.40}
MAX_EVENTS = 100_000


class NonAbsorbingSampleError(RuntimeError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator; ``seed`` may be an int or a SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def scenario_params(tau: float, K: int = 3, E: int = 5, bounds: PitchBounds | None = None) -> MixtureParams:
    """Benchmark mixture whose components separate as ``tau`` grows.

    Component k (1-based) boosts the position-wise diagonal of its
    transition matrix by e^{k tau}/(1 + e^{k tau}); the start row therefore
    favours mark 1 and transient mark e favours mark e+1.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    gamma = np.empty((K, E + 1, E + 1))
    rho = np.empty((K, E + 1, 2))
    eta = np.empty((K, 2, E + 1))
    for k in range(1, K + 1):
        w = math.exp(k * tau)
        gamma[k - 1] = 1.0 / ((1.0 + w) * (E + 1)) + np.eye(E + 1) * (w / (1.0 + w))
        rho[k - 1, :, 0] = 1.0 + k * tau
        rho[k - 1, :, 1] = 1.0
        eta[k - 1] = 1.0 + k * tau
    return MixtureParams(np.full(K, 1.0 / K), gamma, rho, eta, bounds or PitchBounds())


def standard_truncnorm(a: float, b: float, v: float) -> float:
    """Inverse-CDF draw from N(0, 1) restricted to [a, b] given v in [0, 1)."""
    if a >= 0.0:
        # upper tail: invert the survival function
        qa, qb = ndtr(-a), ndtr(-b)
        return float(-ndtri(qa - v * (qa - qb)))
    if b <= 0.0:
        pa, pb = ndtr(a), ndtr(b)
        return float(ndtri(pa + v * (pb - pa)))
    pa, qb = ndtr(a), ndtr(-b)
    mass = 1.0 - pa - qb
    u = pa + v * mass
    if u <= 0.5:
        return float(ndtri(u))
    return float(-ndtri(qb + (1.0 - v) * mass))


def _truncated_step(loc: float, sd: float, lo: float, hi: float, v: float) -> float:
    x = loc + sd * standard_truncnorm((lo - loc) / sd, (hi - loc) / sd, v)
    return min(max(x, lo), hi)


def sample_possession(params: MixtureParams, k: int, origin, rng: np.random.Generator) -> Possession:
    """Draw one possession from component ``k`` starting at ``origin``."""
    E = params.E
    b = params.bounds
    if not b.contains(*origin):
        raise ValueError(f"origin {origin} outside the pitch")
    cum = np.cumsum(params.gamma[k], axis=1)
    shape = params.rho[k, :, 0]
    scale = params.rho[k, :, 1]
    eta = params.eta[k]
    lo = (b.b11, b.b12)
    hi = (b.b21, b.b22)
    state, t = 0, 0.0
    loc = [float(origin[0]), float(origin[1])]
    events = []
    while True:
        if len(events) >= MAX_EVENTS:
            raise NonAbsorbingSampleError("non-absorbing sample: event cap exceeded")
        row = cum[state]
        col = min(int(np.searchsorted(row, rng.random() * row[-1], side="right")), E)
        dt = rng.gamma(shape[col], scale[col])
        t_new = t + dt
        if not t_new > t:
            t_new = np.nextafter(t, np.inf)
        root = math.sqrt(t_new - t)
        for h in range(2):
            loc[h] = _truncated_step(loc[h], eta[h, col] * root, lo[h], hi[h], rng.random())
        t = float(t_new)
        events.append(EventRecord(col + 1, t, loc[0], loc[1]))
        if col == E:
            return Possession(tuple(origin), tuple(events))
        state = col + 1


def sample_chains(gamma_mat, rho_k, size: int, rng: np.random.Generator, max_steps: int = MAX_EVENTS):
    """Vectorised draw of marks and durations for ``size`` possessions.

    Returns ``(lengths, visits, durations)`` with ``visits`` of shape
    (size, E) counting transient marks. Locations are not sampled.
    """
    g = np.asarray(gamma_mat, dtype=float)
    rho_k = np.asarray(rho_k, dtype=float)
    E = g.shape[0] - 1
    cum = np.cumsum(g, axis=1)
    cum[:, -1] = np.inf
    lengths = np.zeros(size, dtype=np.int64)
    visits = np.zeros((size, E), dtype=np.int64)
    durations = np.zeros(size)
    idx = np.arange(size)
    state = np.zeros(size, dtype=np.int64)
    for _ in range(max_steps):
        if idx.size == 0:
            return lengths, visits, durations
        u = rng.random(idx.size)
        col = (u[:, None] >= cum[state]).sum(axis=1)
        durations[idx] += rng.gamma(rho_k[col, 0], rho_k[col, 1])
        lengths[idx] += 1
        moving = col < E
        np.add.at(visits, (idx[moving], col[moving]), 1)
        idx = idx[moving]
        state = col[moving] + 1
    raise NonAbsorbingSampleError("non-absorbing sample: step cap exceeded")


def generate_from_params(params: MixtureParams, n: int, seed):
    """Sample n possessions with i.i.d. labels drawn from ``params.pi``.

    Each possession starts where the previous one ended; the first starts
    at the pitch centre. Returns ``(possessions, labels)`` with 0-based
    labels.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    label_seq, poss_seq = np.random.SeedSequence(seed).spawn(2)
    labels = make_rng(label_seq).choice(params.K, size=n, p=params.pi)
    rng = make_rng(poss_seq)
    origin = params.bounds.center
    data = []
    for k in labels:
        poss = sample_possession(params, int(k), origin, rng)
        data.append(poss)
        last = poss.events[-1]
        origin = (last.x, last.y)
    return data, labels.astype(np.int64)


def generate_dataset(scenario: str, n: int, seed):
    """Benchmark dataset for ``scenario`` in {easy, intermediate, hard}."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    return generate_from_params(scenario_params(SCENARIOS[scenario]), n, seed)
