"""Log-densities of the three component factors and of the mixture.

The scalar functions (``markov_logprob``, ``time_logprob``, ...) work on one
possession and are what callers reach for interactively. Fitting goes
through :class:`EventTable`, which flattens a dataset into per-event arrays
so every component can be evaluated in a handful of numpy calls.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp, ndtr

from .core import MixtureParams, PitchBounds, Possession

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Argument outside the support of a density."""


class TruncationUnderflowWarning(RuntimeWarning):
    """The truncation interval carries no representable probability mass."""


class ComponentLogDensity(NamedTuple):
    mark_ll: float
    time_ll: float
    space_ll: float
    total_ll: float


# -- elementwise building blocks ----------------------------------------------

def log_normal_mass(a, b):
    """ln(Phi(b) - Phi(a)) for a < b, without cancellation in either tail."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        # a <= 0 <= b: both tails are small, subtract them from one
        out = np.log1p(-(ndtr(a) + ndtr(-b)))
        upper = a > 0
        lower = b < 0
        if np.any(upper | lower):
            # same-sign interval: work with the nearer tail in log space
            hi = np.where(upper, log_ndtr(-a), log_ndtr(b))
            lo = np.where(upper, log_ndtr(-b), log_ndtr(a))
            tail = hi + np.log1p(-np.exp(lo - hi))
            out = np.where(upper | lower, tail, out)
    return out


def gamma_logpdf(x, shape, scale):
    """Log-density of the gamma law with the given shape and scale at x > 0."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError(f"gamma density needs x > 0, got {x}")
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    out = (shape - 1.0) * np.log(x) - x / scale - shape * np.log(scale) - gammaln(shape)
    return float(out) if out.ndim == 0 else out


def truncnorm_logpdf(delta_u, delta_b1, delta_b2, eta):
    """Log-density of one time-scaled displacement under the truncated walk.

    All three displacement arguments are already divided by sqrt(dt); the
    support is [delta_b1, delta_b2] and the standard deviation is ``eta``.
    Returns -inf (and warns) when the interval mass underflows.
    """
    delta_u = np.asarray(delta_u, dtype=float)
    z = delta_u / eta
    logmass = log_normal_mass(np.asarray(delta_b1) / eta, np.asarray(delta_b2) / eta)
    out = -0.5 * z * z - LOG_SQRT_2PI - np.log(eta) - logmass
    if np.any(np.isneginf(logmass)):
        warnings.warn("truncation interval mass underflowed to zero", TruncationUnderflowWarning, stacklevel=2)
        out = np.where(np.isneginf(logmass), -np.inf, out)
    return float(out) if np.ndim(out) == 0 else out


def mills_zeta(a, b):
    """(b phi(b) - a phi(a)) / (Phi(b) - Phi(a)), evaluated in log space."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    logmass = log_normal_mass(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        term_b = np.where(np.isfinite(b), b * np.exp(-0.5 * b * b - LOG_SQRT_2PI - logmass), 0.0)
        term_a = np.where(np.isfinite(a), a * np.exp(-0.5 * a * a - LOG_SQRT_2PI - logmass), 0.0)
    out = term_b - term_a
    return float(out) if out.ndim == 0 else out


# -- single-possession factors --------------------------------------------------

def _check_marks(marks: np.ndarray, n_cols: int) -> None:
    if marks.size == 0 or np.any((marks < 1) | (marks > n_cols)):
        raise DomainError(f"marks {marks.tolist()} outside 1..{n_cols}")


def markov_logprob(poss: Possession, gamma_mat) -> float:
    gamma_mat = np.asarray(gamma_mat, dtype=float)
    marks = poss.marks
    _check_marks(marks, gamma_mat.shape[1])
    prev = np.concatenate([[0], marks[:-1]])
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(gamma_mat[prev, marks - 1])))


def time_logprob(poss: Possession, rho_k) -> float:
    rho_k = np.asarray(rho_k, dtype=float)
    marks = poss.marks
    _check_marks(marks, rho_k.shape[0])
    cols = marks - 1
    return float(np.sum(gamma_logpdf(poss.dt, rho_k[cols, 0], rho_k[cols, 1])))


def _scaled_steps(poss: Possession, bounds: PitchBounds):
    locs = poss.locations
    for x, y in locs[1:]:
        if not bounds.contains(x, y):
            raise DomainError(f"location ({x}, {y}) outside the pitch")
    dt = poss.dt
    if np.any(dt <= 0):
        raise DomainError("inter-event times must be positive")
    root = np.sqrt(dt)[:, None]
    prev = locs[:-1]
    du = (locs[1:] - prev) / root
    db1 = (bounds.lower[None, :] - prev) / root
    db2 = (bounds.upper[None, :] - prev) / root
    return du, db1, db2


def space_logprob(poss: Possession, eta_k, bounds: PitchBounds) -> float:
    eta_k = np.asarray(eta_k, dtype=float)
    marks = poss.marks
    _check_marks(marks, eta_k.shape[1])
    du, db1, db2 = _scaled_steps(poss, bounds)
    total = 0.0
    for j, mark in enumerate(marks):
        for h in range(2):
            total += truncnorm_logpdf(du[j, h], db1[j, h], db2[j, h], eta_k[h, mark - 1])
    return float(total)


def possession_loglik(poss: Possession, params: MixtureParams, k: int) -> ComponentLogDensity:
    m = markov_logprob(poss, params.gamma[k])
    t = time_logprob(poss, params.rho[k])
    s = space_logprob(poss, params.eta[k], params.bounds)
    return ComponentLogDensity(m, t, s, m + t + s)


# -- flattened dataset ------------------------------------------------------------

@dataclass(frozen=True)
class EventTable:
    """A dataset laid out as contiguous per-event arrays.

    Events of possession i occupy ``offsets[i]:offsets[i] + lengths[i]``.
    ``prev`` is the row index of the previous state (0 = start) and ``col``
    the column index of the current mark (mark - 1).
    """

    n_types: int
    bounds: PitchBounds
    offsets: np.ndarray
    lengths: np.ndarray
    poss: np.ndarray
    prev: np.ndarray
    col: np.ndarray
    dt: np.ndarray
    log_dt: np.ndarray
    du: np.ndarray  # (2, N)
    db1: np.ndarray  # (2, N)
    db2: np.ndarray  # (2, N)

    @property
    def n(self) -> int:
        return self.offsets.shape[0]

    @property
    def n_events(self) -> int:
        return self.col.shape[0]

    @classmethod
    def build(cls, data: Sequence[Possession], n_types: int, bounds: PitchBounds) -> "EventTable":
        if len(data) == 0:
            raise ValueError("empty dataset")
        lengths = np.array([p.n_events for p in data], dtype=np.int64)
        if np.any(lengths < 1):
            raise DomainError("every possession needs at least one event")
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        marks = np.concatenate([p.marks for p in data])
        _check_marks(marks, n_types + 1)
        prev = np.concatenate([np.concatenate([[0], p.marks[:-1]]) for p in data])
        dt = np.concatenate([p.dt for p in data])
        if np.any(dt <= 0):
            bad = int(np.searchsorted(offsets, np.flatnonzero(dt <= 0)[0], side="right") - 1)
            raise DomainError(f"possession {bad} has a non-positive inter-event time")
        du, db1, db2 = [], [], []
        for i, p in enumerate(data):
            try:
                a, b, c = _scaled_steps(p, bounds)
            except DomainError as exc:
                raise DomainError(f"possession {i}: {exc}") from None
            du.append(a)
            db1.append(b)
            db2.append(c)
        return cls(
            n_types=n_types,
            bounds=bounds,
            offsets=offsets,
            lengths=lengths,
            poss=np.repeat(np.arange(len(data)), lengths),
            prev=prev,
            col=marks - 1,
            dt=dt,
            log_dt=np.log(dt),
            du=np.concatenate(du).T.copy(),
            db1=np.concatenate(db1).T.copy(),
            db2=np.concatenate(db2).T.copy(),
        )

    def per_possession(self, values: np.ndarray) -> np.ndarray:
        """Sum trailing-axis per-event values into per-possession totals."""
        return np.add.reduceat(values, self.offsets, axis=-1)


def as_table(data, params: MixtureParams) -> EventTable:
    if isinstance(data, EventTable):
        if data.n_types != params.E:
            raise DomainError(f"dataset has {data.n_types} event types, parameters have {params.E}")
        return data
    return EventTable.build(data, params.E, params.bounds)


def event_space_logpdf(table: EventTable, eta: np.ndarray) -> np.ndarray:
    """(K, 2, N) truncated-walk log-densities for every event and axis.

    ``eta`` is the (K, 2, E+1) scale array.
    """
    scale = eta[:, :, table.col]  # (K, 2, N)
    z = table.du[None] / scale
    logmass = log_normal_mass(table.db1[None] / scale, table.db2[None] / scale)
    out = -0.5 * z * z - LOG_SQRT_2PI - np.log(scale) - logmass
    if np.any(np.isneginf(logmass)):
        warnings.warn("truncation interval mass underflowed to zero", TruncationUnderflowWarning, stacklevel=2)
        out = np.where(np.isneginf(logmass), -np.inf, out)
    return out


def event_logdens(table: EventTable, params: MixtureParams, space: bool = True):
    """Per-event (K, N) log-densities of the mark, time and space factors."""
    with np.errstate(divide="ignore"):
        mark = np.log(params.gamma[:, table.prev, table.col])
    shape = params.rho[:, :, 0]
    scale = params.rho[:, :, 1]
    const = shape * np.log(scale) + gammaln(shape)  # (K, E+1)
    a = shape[:, table.col]
    b = scale[:, table.col]
    time = (a - 1.0) * table.log_dt[None] - table.dt[None] / b - const[:, table.col]
    if not space:
        return mark, time, None
    return mark, time, event_space_logpdf(table, params.eta).sum(axis=1)


def component_logdens(table: EventTable, params: MixtureParams):
    """Per-possession (K, n) arrays ``(mark, time, space, total)``."""
    mark, time, space = event_logdens(table, params)
    m = table.per_possession(mark)
    t = table.per_possession(time)
    s = table.per_possession(space)
    with np.errstate(invalid="ignore"):
        total = m + t + s
    return m, t, s, total


def mixture_loglik(data, params: MixtureParams) -> float:
    table = as_table(data, params)
    total = component_logdens(table, params)[3]
    with np.errstate(divide="ignore"):
        weighted = np.log(params.pi)[:, None] + total
    return float(np.sum(logsumexp(weighted, axis=0)))
