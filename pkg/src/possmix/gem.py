"""Maximum-likelihood fitting with a generalized EM algorithm.

Each iteration runs an exact E-step, maximizes the expected complete-data
log-likelihood in closed form over the proportions and transition matrices,
then takes one projected quasi-Newton step on every gamma (shape, scale)
pair and every spatial scale. The step is backtracked until its part of the
expected complete-data log-likelihood increases, which keeps the observed
log-likelihood non-decreasing.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .core import PARAM_FLOOR, PI_FLOOR, MixtureParams, Responsibilities
from .densities import (
    LOG_SQRT_2PI,
    EventTable,
    as_table,
    event_logdens,
    log_normal_mass,
    mills_zeta,
)
from .simulate import make_rng

log = logging.getLogger(__name__)

DEGENERATE_FRACTION = 1e-6


class DegenerateFitError(RuntimeError):
    pass


class UnassignablePossessionError(DegenerateFitError):
    """A possession has zero density under every component."""


@dataclass(frozen=True)
class FitConfig:
    K: int
    n_starts: int = 1000
    n_short_iters: int = 10
    n_keep: int = 100
    n_long_iters: int = 500
    rel_tol: float = 1e-8
    seed: int = 0
    param_floor: float = PARAM_FLOOR
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    max_backtracks: int = 30
    threads: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        for name in ("n_starts", "n_keep", "n_long_iters", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_short_iters < 0 or self.max_backtracks < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.n_keep > self.n_starts:
            raise ValueError("n_keep cannot exceed n_starts")
        if not (self.rel_tol > 0 and self.param_floor > 0 and 0 < self.armijo_c < 1 and 0 < self.armijo_shrink < 1):
            raise ValueError("tolerances must be positive and Armijo constants in (0, 1)")


@dataclass
class FitResult:
    params: MixtureParams
    loglik: float
    loglik_trace: list
    responsibilities: Responsibilities
    hard_assignment: np.ndarray
    bic: float
    n_params: int
    n_tot: int
    converged: bool
    start_id: int
    iterations: int


# -- E-step -----------------------------------------------------------------------

def _onehot(table: EventTable) -> np.ndarray:
    oh = np.zeros((table.n_events, table.n_types + 1))
    oh[np.arange(table.n_events), table.col] = 1.0
    return oh


def sufficient_stats(table: EventTable, r: np.ndarray, loglik: float = float("nan")) -> Responsibilities:
    """Weighted event counts, time sums and transition counts for weights r (n x K)."""
    E1 = table.n_types + 1
    rw = r[table.poss]  # (N, K)
    oh = _onehot(table)
    n1 = rw.T @ oh
    n_dt = (rw * table.dt[:, None]).T @ oh
    n_lndt = (rw * table.log_dt[:, None]).T @ oh
    flat = table.prev * E1 + table.col
    trans = np.stack([np.bincount(flat, weights=rw[:, k], minlength=E1 * E1) for k in range(r.shape[1])])
    return Responsibilities(r, n1, n_dt, n_lndt, trans.reshape(-1, E1, E1), loglik)


def e_step(data, params: MixtureParams, kernel: SpaceKernel | None = None) -> Responsibilities:
    """Posterior memberships and weighted statistics under ``params``."""
    table = as_table(data, params)
    if kernel is None:
        mark, time, space = event_logdens(table, params)
    else:
        mark, time, _ = event_logdens(table, params, space=False)
        space = kernel.logpdf(params.eta).sum(axis=1)
    with np.errstate(invalid="ignore"):
        total = table.per_possession(mark) + table.per_possession(time) + table.per_possession(space)
    with np.errstate(divide="ignore"):
        w = np.log(params.pi)[:, None] + total
    lse = logsumexp(w, axis=0)
    if not np.all(np.isfinite(lse)):
        bad = np.flatnonzero(~np.isfinite(lse))
        raise UnassignablePossessionError(f"possession {int(bad[0])} has zero density under every component")
    r = np.exp(w - lse).T
    r /= r.sum(axis=1, keepdims=True)
    return sufficient_stats(table, r, float(np.sum(lse)))


# -- closed-form part of the M-step ----------------------------------------------------

def m_step_closed_form(stats: Responsibilities, n: int):
    """Proportions and transition matrices maximizing the expected log-likelihood."""
    pi = stats.r.sum(axis=0) / n
    pi = np.maximum(pi, PI_FLOOR)
    pi /= pi.sum()
    counts = stats.trans_counts
    totals = counts.sum(axis=2, keepdims=True)
    E1 = counts.shape[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(totals > 0, counts / totals, 1.0 / E1)
    return pi, gamma


# -- gamma parameters -----------------------------------------------------------------

def gamma_objective(rho, n1, n_dt, n_lndt):
    """Expected complete-data log-likelihood terms of gamma (shape, scale) pairs."""
    rho = np.asarray(rho, dtype=float)
    a, b = rho[..., 0], rho[..., 1]
    return (a - 1.0) * n_lndt - n_dt / b - n1 * (a * np.log(b) + gammaln(a))


def gamma_gradient(rho_e, stats_e):
    """Gradient of the gamma term with respect to (shape, scale).

    ``stats_e`` is ``(n1, n_dt, n_lndt)``; arrays broadcast over leading axes.
    """
    rho_e = np.asarray(rho_e, dtype=float)
    n1, n_dt, n_lndt = (np.asarray(s, dtype=float) for s in stats_e)
    a, b = rho_e[..., 0], rho_e[..., 1]
    return np.stack([n_lndt - n1 * (np.log(b) + digamma(a)), n_dt / b**2 - n1 * a / b], axis=-1)


# -- spatial scales ---------------------------------------------------------------------

def eta_gradient(eta, weighted_events) -> float:
    """Derivative in ``eta`` of the weighted truncated-walk log-density.

    ``weighted_events`` is an iterable of (weight, delta_u, delta_b1, delta_b2).
    """
    ev = np.asarray(list(weighted_events), dtype=float).reshape(-1, 4)
    w, du, b1, b2 = ev.T
    z = mills_zeta(b1 / eta, b2 / eta)
    bad = ~np.isfinite(z)
    if np.any(bad):
        raise FloatingPointError(f"zero truncation mass at event {int(np.flatnonzero(bad)[0])}")
    return float(np.sum(w * (du**2 / eta**3 + (z - 1.0) / eta)))


class SpaceKernel:
    """Per-event truncated-walk quantities for one dataset, with reuse.

    The truncation mass of an event depends only on the scale of its
    (component, axis, mark) block, so masses computed for earlier scale
    arrays (the current iterate, the previous one, line-search trials) are
    reused block by block; log-densities and gradient terms are cached for
    whole arrays.
    """

    def __init__(self, table: EventTable, slots: int = 6):
        self.table = table
        self.onehot = _onehot(table)
        self._slots: list[dict] = []
        self._max = slots

    def _entry(self, eta: np.ndarray) -> dict:
        for slot in self._slots:
            if np.array_equal(slot["eta"], eta):
                return slot
        t = self.table
        eta = np.array(eta, dtype=float)
        scale = eta[:, :, t.col]
        missing = np.ones(eta.shape, dtype=bool)
        logmass = np.empty(scale.shape)
        for slot in self._slots:
            hit = missing & (slot["eta"] == eta)
            if hit.any():
                ev = hit[:, :, t.col]
                logmass[ev] = slot["logmass"][ev]
                missing &= ~hit
        if missing.all():
            logmass = log_normal_mass(t.db1[None] / scale, t.db2[None] / scale)
        elif missing.any():
            ev = missing[:, :, t.col]
            lo = np.broadcast_to(t.db1[None], scale.shape)[ev]
            hi = np.broadcast_to(t.db2[None], scale.shape)[ev]
            logmass[ev] = log_normal_mass(lo / scale[ev], hi / scale[ev])
        entry = {"eta": eta, "scale": scale, "logmass": logmass, "logpdf": None, "grad": None}
        self._slots.insert(0, entry)
        del self._slots[self._max:]
        return entry

    def logpdf(self, eta: np.ndarray) -> np.ndarray:
        """(K, 2, N) log-densities."""
        entry = self._entry(eta)
        if entry["logpdf"] is None:
            scale, lm = entry["scale"], entry["logmass"]
            z = self.table.du[None] / scale
            with np.errstate(invalid="ignore"):
                out = -0.5 * z * z - LOG_SQRT_2PI - np.log(scale) - lm
            if np.isneginf(lm).any():
                out = np.where(np.isneginf(lm), -np.inf, out)
            entry["logpdf"] = out
        return entry["logpdf"]

    def grad_terms(self, eta: np.ndarray) -> np.ndarray:
        """(K, 2, N) derivatives of the log-densities in the scale."""
        entry = self._entry(eta)
        if entry["grad"] is None:
            t = self.table
            scale, lm = entry["scale"], entry["logmass"]
            a = t.db1[None] / scale
            b = t.db2[None] / scale
            with np.errstate(over="ignore", invalid="ignore"):
                zeta = b * np.exp(-0.5 * b * b - LOG_SQRT_2PI - lm) - a * np.exp(-0.5 * a * a - LOG_SQRT_2PI - lm)
            entry["grad"] = t.du[None] ** 2 / scale**3 + (zeta - 1.0) / scale
        return entry["grad"]


class _EtaTerms:
    """Weighted spatial objective and gradient for all (k, h, e) at once."""

    def __init__(self, kernel: SpaceKernel, r: np.ndarray):
        self.kernel = kernel
        self.rw = r[kernel.table.poss].T[:, None, :]  # (K, 1, N)

    def objective(self, eta: np.ndarray) -> np.ndarray:
        lp = self.kernel.logpdf(eta)
        with np.errstate(invalid="ignore"):
            return (self.rw * lp) @ self.kernel.onehot

    def gradient(self, eta: np.ndarray) -> np.ndarray:
        return (self.rw * self.kernel.grad_terms(eta)) @ self.kernel.onehot


# -- one bounded quasi-Newton step -------------------------------------------------------

def bounded_ascent_step(
    x0,
    grad_fn: Callable,
    obj_fn: Callable,
    floor: float = PARAM_FLOOR,
    x_prev=None,
    armijo_c: float = 1e-4,
    armijo_shrink: float = 0.5,
    max_backtracks: int = 30,
    active=None,
    memory: dict | None = None,
):
    """One projected quasi-Newton ascent step with Armijo backtracking.

    Works on a batch of independent blocks: ``x0`` has shape (B, d) (a 1-D
    array is treated as one block), ``grad_fn`` returns (B, d) gradients and
    ``obj_fn`` (B,) objective values. With ``x_prev`` (the previous iterate)
    the curvature comes from the secant pair evaluated on the current
    objective; otherwise the first step is a unit-length gradient move.
    Blocks that fail to increase the objective within ``max_backtracks``
    halvings, and blocks not in ``active``, keep their value.

    ``memory`` (a dict, updated in place) carries the curvature scale
    s'y/y'y of the last usable secant pair of each block; a block whose
    current pair is unusable (for instance because it did not move) takes a
    gradient step scaled by that value instead of a unit-length one.
    """
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    X = np.atleast_2d(x0)
    B = X.shape[0]
    wrap = (lambda f: (lambda x: np.reshape(f(x[0]), (1, -1)))) if single else (lambda f: f)
    grad = wrap(grad_fn)
    obj = (lambda x: np.reshape(obj_fn(x[0]), (1,))) if single else obj_fn

    g0 = np.asarray(grad(X), dtype=float).reshape(B, -1)
    act = np.ones(B, dtype=bool) if active is None else np.asarray(active, dtype=bool).reshape(B)
    if not np.all(np.isfinite(g0[act])):
        raise FloatingPointError("non-finite gradient in ascent step")
    gnorm = np.linalg.norm(g0, axis=1)
    act &= gnorm > 0

    # steepest ascent: unit length, or scaled by remembered curvature
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(act[:, None], g0 / gnorm[:, None], 0.0)
    scale = None
    if memory is not None:
        scale = memory.get("scale")
        if scale is None or scale.shape != (B,):
            scale = np.full(B, np.nan)
        known = act & np.isfinite(scale)
        d[known] = scale[known, None] * g0[known]
    if x_prev is not None and np.any(act):
        Xp = np.atleast_2d(np.asarray(x_prev, dtype=float))
        s = X - Xp
        gp = np.asarray(grad(Xp), dtype=float).reshape(B, -1)
        y = gp - g0  # change of the descent gradient of -objective
        sy = np.sum(s * y, axis=1)
        yy = np.sum(y * y, axis=1)
        ok = act & np.all(np.isfinite(gp), axis=1) & (sy > 1e-12 * np.linalg.norm(s, axis=1) * np.sqrt(yy))
        if np.any(ok):
            # two-loop recursion with a single pair, minimizing -objective
            gf = -g0[ok]
            so, yo, syo = s[ok], y[ok], sy[ok]
            alpha = np.sum(so * gf, axis=1) / syo
            q = gf - alpha[:, None] * yo
            r = (syo / yy[ok])[:, None] * q
            beta = np.sum(yo * r, axis=1) / syo
            r = r + so * (alpha - beta)[:, None]
            dq = -r
            rows = np.flatnonzero(ok)
            if scale is not None:
                scale[rows] = syo / yy[ok]
            probe = np.maximum(X[rows] + dq, floor) - X[rows]
            ascent = np.sum(g0[rows] * probe, axis=1) > 0
            d[rows[ascent]] = dq[ascent]
    if memory is not None:
        memory["scale"] = scale

    X1 = X.copy()
    pending = act.copy()
    if np.any(pending):
        q0 = obj(X)
        t = np.ones(B)
        for _ in range(max_backtracks + 1):
            cand = np.where(pending[:, None], np.maximum(X + t[:, None] * d, floor), X)
            delta = cand - X
            slope = np.sum(g0 * delta, axis=1)
            with np.errstate(invalid="ignore"):
                q1 = obj(cand)
                accept = pending & (slope > 0) & np.isfinite(q1) & (q1 >= q0 + armijo_c * slope)
            X1[accept] = cand[accept]
            pending &= ~accept
            if not np.any(pending):
                break
            t[pending] *= armijo_shrink
    return X1[0] if single else X1


# -- one GEM iteration ---------------------------------------------------------------------

@dataclass
class Curvature:
    """Previous iterates of the gradient-updated blocks (None before the first
    step) and the curvature scales remembered for each block."""

    rho: np.ndarray | None = None
    eta: np.ndarray | None = None
    rho_memory: dict = field(default_factory=dict)
    eta_memory: dict = field(default_factory=dict)
    kernel: SpaceKernel | None = field(default=None, repr=False)


def m_step(table: EventTable, params: MixtureParams, stats: Responsibilities, curvature: Curvature, config: FitConfig, kernel: SpaceKernel | None = None):
    pi, gamma = m_step_closed_form(stats, table.n)
    K, E1 = params.K, params.E + 1
    informative = stats.n1 > 0  # (K, E+1)

    rho0 = params.rho.reshape(K * E1, 2)
    n1 = stats.n1.reshape(-1)
    ndt = stats.n_dt.reshape(-1)
    nln = stats.n_lndt.reshape(-1)
    rho1 = bounded_ascent_step(
        rho0,
        lambda x: gamma_gradient(x, (n1, ndt, nln)),
        lambda x: gamma_objective(x, n1, ndt, nln),
        floor=config.param_floor,
        x_prev=None if curvature.rho is None else curvature.rho.reshape(K * E1, 2),
        armijo_c=config.armijo_c,
        armijo_shrink=config.armijo_shrink,
        max_backtracks=config.max_backtracks,
        active=informative.reshape(-1),
        memory=curvature.rho_memory,
    ).reshape(K, E1, 2)

    terms = _EtaTerms(kernel or SpaceKernel(table), stats.r)
    eta0 = params.eta.reshape(K * 2 * E1, 1)
    shape3 = (K, 2, E1)
    eta1 = bounded_ascent_step(
        eta0,
        lambda x: terms.gradient(x.reshape(shape3)).reshape(-1, 1),
        lambda x: terms.objective(x.reshape(shape3)).reshape(-1),
        floor=config.param_floor,
        x_prev=None if curvature.eta is None else curvature.eta.reshape(-1, 1),
        armijo_c=config.armijo_c,
        armijo_shrink=config.armijo_shrink,
        max_backtracks=config.max_backtracks,
        active=np.broadcast_to(informative[:, None, :], shape3).reshape(-1),
        memory=curvature.eta_memory,
    ).reshape(shape3)

    curvature.rho = params.rho.copy()
    curvature.eta = params.eta.copy()
    return params.replace(pi=pi, gamma=gamma, rho=rho1, eta=eta1)


def gem_iteration(data, params: MixtureParams, curvature: Curvature | None = None, config: FitConfig | None = None):
    """One E-step plus generalized M-step.

    Returns ``(new_params, stats, loglik)`` where ``stats`` and ``loglik``
    belong to the input ``params``. ``curvature`` is updated in place.
    """
    table = as_table(data, params)
    config = config or FitConfig(K=params.K, n_starts=1, n_keep=1)
    curvature = curvature if curvature is not None else Curvature()
    if curvature.kernel is None or curvature.kernel.table is not table:
        curvature.kernel = SpaceKernel(table)
    stats = e_step(table, params, curvature.kernel)
    return m_step(table, params, stats, curvature, config, curvature.kernel), stats, stats.loglik


# -- initialization ---------------------------------------------------------------------------

def _moment_init(table: EventTable, groups: np.ndarray, K: int, floor: float):
    """Method-of-moments gamma and spatial scales for a hard partition."""
    E1 = table.n_types + 1
    ev_group = groups[table.poss]
    du2 = table.du**2

    def gamma_moments(mask):
        x = table.dt[mask]
        if x.size == 0:
            return None
        m = x.mean()
        v = x.var()
        if x.size < 2 or v <= 0:
            return (1.0, max(m, floor))
        return (max(m * m / v, floor), max(v / m, floor))

    pooled_rho = [gamma_moments(table.col == e) or (1.0, 1.0) for e in range(E1)]
    pooled_eta = np.ones((2, E1))
    for e in range(E1):
        mask = table.col == e
        if np.any(mask):
            pooled_eta[:, e] = np.sqrt(du2[:, mask].mean(axis=1))
    rho = np.empty((K, E1, 2))
    eta = np.empty((K, 2, E1))
    for k in range(K):
        for e in range(E1):
            mask = (ev_group == k) & (table.col == e)
            rho[k, e] = gamma_moments(mask) or pooled_rho[e]
            eta[k, :, e] = np.sqrt(du2[:, mask].mean(axis=1)) if np.any(mask) else pooled_eta[:, e]
    return np.maximum(rho, floor), np.maximum(eta, floor)


def random_init(table: EventTable, K: int, rng: np.random.Generator, floor: float = PARAM_FLOOR) -> MixtureParams:
    """Parameters from a random hard partition of the possessions."""
    n = table.n
    if n < K:
        raise DegenerateFitError(f"cannot split {n} possessions into {K} groups")
    # every group gets at least one possession
    groups = rng.permutation(np.concatenate([np.arange(K), rng.integers(0, K, size=n - K)]))
    r = np.zeros((n, K))
    r[np.arange(n), groups] = 1.0
    stats = sufficient_stats(table, r)
    pi, gamma = m_step_closed_form(stats, n)
    rho, eta = _moment_init(table, groups, K, floor)
    return MixtureParams(pi, gamma, rho, eta, table.bounds)


# -- running starts ------------------------------------------------------------------------------

@dataclass
class _Run:
    start_id: int
    params: MixtureParams
    curvature: Curvature = field(default_factory=Curvature)
    trace: list = field(default_factory=list)
    stats: Responsibilities | None = None
    iterations: int = 0
    converged: bool = False
    failed: str | None = None

    @property
    def loglik(self) -> float:
        return self.trace[-1] if self.trace and not self.failed else -math.inf

    @property
    def alive(self) -> bool:
        return self.failed is None and not self.converged


def _kernel(run: _Run, table: EventTable) -> SpaceKernel:
    if run.curvature.kernel is None or run.curvature.kernel.table is not table:
        run.curvature.kernel = SpaceKernel(table)
    return run.curvature.kernel


def _evaluate(run: _Run, table: EventTable, config: FitConfig) -> None:
    try:
        stats = e_step(table, run.params, _kernel(run, table))
    except DegenerateFitError as exc:
        run.failed = str(exc)
        return
    if np.any(stats.r.sum(axis=0) < DEGENERATE_FRACTION * table.n):
        run.failed = "a component lost all responsibility"
        return
    prev = run.trace[-1] if run.trace else None
    run.trace.append(stats.loglik)
    run.stats = stats
    if prev is not None and abs(stats.loglik - prev) / (abs(prev) + 1.0) < config.rel_tol:
        run.converged = True


def _advance(run: _Run, table: EventTable, config: FitConfig, n_iters: int) -> _Run:
    """Run up to ``n_iters`` GEM iterations, stopping early on convergence.

    On return ``run.stats`` and ``run.trace[-1]`` describe ``run.params``.
    """
    if run.stats is None and run.failed is None:
        _evaluate(run, table, config)
    for _ in range(n_iters):
        if not run.alive:
            break
        try:
            run.params = m_step(table, run.params, run.stats, run.curvature, config, _kernel(run, table))
        except FloatingPointError as exc:
            run.failed = str(exc)
            break
        run.iterations += 1
        run.stats = None
        _evaluate(run, table, config)
    return run


def _run_starts(table: EventTable, config: FitConfig, starts: list[tuple[int, object]]) -> list[_Run]:
    """Initialize and run the short phase for (start_id, seed-or-params) pairs."""
    out = []
    for start_id, init in starts:
        if isinstance(init, MixtureParams):
            params = init
        else:
            try:
                params = random_init(table, config.K, make_rng(init), config.param_floor)
            except DegenerateFitError as exc:
                out.append(_Run(start_id, None, failed=str(exc)))
                continue
        out.append(_advance(_Run(start_id, params), table, config, config.n_short_iters))
    return out


def _refine(table: EventTable, config: FitConfig, runs: list[_Run]) -> list[_Run]:
    return [_advance(run, table, config, config.n_long_iters) for run in runs]


def _chunks(items: list, n: int) -> list[list]:
    size = max(1, math.ceil(len(items) / n))
    return [items[i:i + size] for i in range(0, len(items), size)]


def _parallel(fn, table, config, items, threads):
    if threads <= 1 or len(items) <= 1:
        return fn(table, config, items)
    with ProcessPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(fn, *zip(*[(table, config, chunk) for chunk in _chunks(items, threads * 4)]))
        return [run for part in parts for run in part]


def n_free_params(K: int, E: int) -> int:
    return (K - 1) + K * ((E + 1) * E + 2 * (E + 1) + 2 * (E + 1))


def bic(loglik: float, params: MixtureParams, data) -> float:
    """Penalized log-likelihood; larger is better."""
    table = as_table(data, params)
    n_tot = int(table.lengths.sum())
    return loglik - 0.5 * n_free_params(params.K, params.E) * math.log(n_tot)


def fit(data, config: FitConfig, init_params: Sequence[MixtureParams] = (), n_types: int | None = None, bounds=None) -> FitResult:
    """Multi-start GEM fit.

    ``data`` is an EventTable or a sequence of possessions (then ``n_types``
    and ``bounds`` are required). The first ``len(init_params)`` starts use
    the given parameters instead of a random partition.
    """
    if isinstance(data, EventTable):
        table = data
    else:
        if n_types is None:
            raise ValueError("n_types is required when fitting raw possessions")
        from .core import PitchBounds

        table = EventTable.build(data, n_types, bounds or PitchBounds())
    for p in init_params:
        if p.K != config.K or p.E != table.n_types:
            raise ValueError("initial parameters do not match K or E")

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_starts)
    starts = [(i, init_params[i] if i < len(init_params) else seeds[i]) for i in range(config.n_starts)]
    runs = _parallel(_run_starts, table, config, starts, config.threads)
    alive = [r for r in runs if r.failed is None]
    if not alive:
        reasons: dict[str, int] = {}
        for r in runs:
            reasons[r.failed] = reasons.get(r.failed, 0) + 1
        raise DegenerateFitError(f"all {len(runs)} starts degenerate: {reasons}")
    alive.sort(key=lambda r: (-r.loglik, r.start_id))
    kept = alive[: config.n_keep]
    log.debug("kept %d of %d starts; best short-phase loglik %.6f", len(kept), len(runs), kept[0].loglik)
    refined = _parallel(_refine, table, config, kept, config.threads)
    finished = [r for r in refined if r.failed is None] or [r for r in kept if r.failed is None]
    if not finished:
        raise DegenerateFitError("every refined start degenerated")
    best = min(finished, key=lambda r: (-r.loglik, r.start_id))
    stats = best.stats
    n_tot = int(table.lengths.sum())
    nu = n_free_params(config.K, table.n_types)
    return FitResult(
        params=best.params,
        loglik=best.loglik,
        loglik_trace=list(best.trace),
        responsibilities=stats,
        hard_assignment=np.argmax(stats.r, axis=1),
        bic=best.loglik - 0.5 * nu * math.log(n_tot),
        n_params=nu,
        n_tot=n_tot,
        converged=best.converged,
        start_id=best.start_id,
        iterations=best.iterations,
    )


def select_k(data, k_range, config: FitConfig, **fit_kwargs):
    """Fit every K in ``k_range``; return (table rows, best K, fits by K)."""
    rows, fits = [], {}
    for K in k_range:
        cfg = replace(config, K=K)
        res = fit(data, cfg, **fit_kwargs)
        fits[K] = res
        rows.append({"K": K, "loglik": res.loglik, "n_params": res.n_params, "bic": res.bic})
    best = max(rows, key=lambda row: (row["bic"], -row["K"]))["K"]
    return rows, best, fits


def fit_report(result: FitResult, seed) -> dict:
    from .core import params_to_dict
    from .indicators import indicator_rows

    return {
        "loglik": result.loglik,
        "bic": result.bic,
        "n_params": result.n_params,
        "n_tot": result.n_tot,
        "converged": result.converged,
        "iterations": result.iterations,
        "pi": result.params.pi.tolist(),
        "indicators": indicator_rows(result.params),
        "hard_assignment": (result.hard_assignment + 1).tolist(),
        "seed": seed,
        "params": params_to_dict(result.params),
    }
