"""Cluster summaries computed from fitted parameters.

For each component: the expected number of events in a possession, the
expected number of visits to each transient event type, and the expected
possession duration in seconds.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from .core import ClusterIndicators, MixtureParams

COND_WARN = 1e12


class NonTransientChainError(ValueError):
    pass


def decompose_transition(gamma_mat):
    """Split a transition matrix into start row and transient blocks.

    Returns ``(a, r, Q, R)``: the start row restricted to transient marks,
    the start-to-absorption probability, the transient-to-transient block
    and the transient-to-absorption column.
    """
    g = np.asarray(gamma_mat, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 2:
        raise ValueError(f"expected a square (E+1)x(E+1) matrix, got shape {g.shape}")
    E = g.shape[0] - 1
    return g[0, :E].copy(), float(g[0, E]), g[1:, :E].copy(), g[1:, E].copy()


def fundamental_matrix(Q) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    E = Q.shape[0]
    A = np.eye(E) - Q
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(A, check_finite=True)
            F = scipy.linalg.lu_solve(lu, np.eye(E))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
        raise NonTransientChainError("non-transient chain: I - Q is singular") from None
    if not np.all(np.isfinite(F)):
        raise NonTransientChainError("non-transient chain: I - Q is singular")
    cond = np.linalg.norm(A, 1) * np.linalg.norm(F, 1)
    if cond > COND_WARN:
        warnings.warn(f"I - Q is ill-conditioned (condition number {cond:.3g})", RuntimeWarning, stacklevel=2)
    if np.max(np.abs(A @ F - np.eye(E))) >= 1e-10 * max(1.0, cond / 1e4):
        raise NonTransientChainError("non-transient chain: fundamental matrix residual too large")
    return F


def expected_counts(gamma_mat):
    """Expected possession length and expected visits per transient mark."""
    a, _, Q, _ = decompose_transition(gamma_mat)
    kappa = a @ fundamental_matrix(Q)
    return 1.0 + float(kappa.sum()), kappa


def expected_duration(gamma_mat, rho_k) -> float:
    _, kappa = expected_counts(gamma_mat)
    rho_k = np.asarray(rho_k, dtype=float)
    mu = rho_k[:, 0] * rho_k[:, 1]
    return float(kappa @ mu[:-1] + mu[-1])


def indicators_for(params: MixtureParams) -> ClusterIndicators:
    lam = np.empty(params.K)
    kappa = np.empty((params.K, params.E))
    zeta = np.empty(params.K)
    for k in range(params.K):
        lam[k], kappa[k] = expected_counts(params.gamma[k])
        mu = params.rho[k, :, 0] * params.rho[k, :, 1]
        zeta[k] = kappa[k] @ mu[:-1] + mu[-1]
    return ClusterIndicators(lam, kappa, zeta)


def indicator_rows(params: MixtureParams, ind: ClusterIndicators | None = None) -> list[dict]:
    """Per-component summary rows: proportion, length, duration, visits."""
    ind = ind or indicators_for(params)
    rows = []
    for k in range(params.K):
        row = {"component": k + 1, "pi": float(params.pi[k]), "lambda": float(ind.lam[k]), "zeta": float(ind.zeta[k])}
        for e in range(params.E):
            row[f"kappa_{e + 1}"] = float(ind.kappa[k, e])
        rows.append(row)
    return rows
