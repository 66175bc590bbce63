"""First-order (linearised) Fisher information and asymptotic confidence intervals.

Around ``eta = 0`` each subject's observations are approximately
``N(f_i, V_i)`` with ``V_i = J_i Omega J_i^T + diag(g_i^2)``, ``J_i`` the
Jacobian of the predictions with respect to the random effects.  The
information is assembled as two blocks, fixed effects and variance parameters,
with the cross block set to zero.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import norm

from .model import Dataset, ModelSpec, PopulationParams, _error_sd, transform_psi


def _step(v):
    return np.maximum(1e-4 * np.abs(v), 1e-6)


def _predictions(spec, x, mu, eta):
    psi = transform_psi(spec, mu, eta)
    return spec.structural(psi, x)


def _blocks_by_size(dataset: Dataset):
    groups = {}
    for i, n in enumerate(dataset.design.n_obs):
        groups.setdefault(int(n), []).append(i)
    for n, idx in sorted(groups.items()):
        x = np.stack([dataset.design.doses[i] for i in idx])
        yield n, idx, x


def compute_fim(spec: ModelSpec, dataset: Dataset, theta_hat: PopulationParams):
    """Block-diagonal FO information matrix and standard errors.

    Returns ``(fim, se)`` in ``spec.theta_names`` order.  Derivatives use
    central differences with step ``max(1e-4 |v|, 1e-6)``.  Parameters whose
    block cannot be inverted get ``nan`` standard errors.
    """
    mu = np.asarray(theta_hat.mu, dtype=float)
    omega = theta_hat.omega
    sigma = np.asarray(theta_hat.sigma, dtype=float)
    p, q = spec.n_params, spec.n_re
    entries = spec.omega_entries
    ns = sigma.size
    nv = len(entries) + ns

    fixed_block = np.zeros((p, p))
    var_block = np.zeros((nv, nv))

    for n, idx, x in _blocks_by_size(dataset):
        B = len(idx)
        eta0 = np.zeros((B, q))
        f0 = _predictions(spec, x, mu, eta0)

        D = np.empty((B, n, p))
        for k in range(p):
            h = _step(mu[k])
            up, dn = mu.copy(), mu.copy()
            up[k] += h
            dn[k] -= h
            D[:, :, k] = (_predictions(spec, x, up, eta0) - _predictions(spec, x, dn, eta0)) / (2 * h)

        J = np.empty((B, n, q))
        for d in range(q):
            h = 1e-6
            e = np.zeros((B, q))
            e[:, d] = h
            J[:, :, d] = (_predictions(spec, x, mu, e) - _predictions(spec, x, mu, -e)) / (2 * h)

        g0 = _error_sd(spec.error_model, sigma, f0)
        dg = np.empty((B, n, ns))
        for s in range(ns):
            h = _step(sigma[s])
            up, dn = sigma.copy(), sigma.copy()
            up[s] += h
            dn[s] = max(dn[s] - h, 0.0)
            dg[:, :, s] = (_error_sd(spec.error_model, up, f0) - _error_sd(spec.error_model, dn, f0)) / (up[s] - dn[s])

        V = np.einsum("bid,de,bje->bij", J, omega, J)
        V[:, np.arange(n), np.arange(n)] += g0 ** 2
        Vinv = np.linalg.inv(V)

        fixed_block += np.einsum("bik,bij,bjl->kl", D, Vinv, D)

        dV = np.empty((nv, B, n, n))
        for a, (r, c) in enumerate(entries):
            outer = np.einsum("bi,bj->bij", J[:, :, r], J[:, :, c])
            dV[a] = outer if r == c else outer + outer.transpose(0, 2, 1)
        for s in range(ns):
            dV[len(entries) + s] = 0.0
            dV[len(entries) + s][:, np.arange(n), np.arange(n)] = 2.0 * g0 * dg[:, :, s]
        W = np.einsum("bij,abjk->abik", Vinv, dV)  # V^-1 dV_a
        var_block += 0.5 * np.einsum("abij,cbji->ac", W, W)

    fim = np.zeros((p + nv, p + nv))
    fim[:p, :p] = 0.5 * (fixed_block + fixed_block.T)
    fim[p:, p:] = 0.5 * (var_block + var_block.T)
    se = np.concatenate([_block_se(fim[:p, :p]), _block_se(fim[p:, p:])])
    return fim, se


def _block_se(block):
    """SEs from one information block; zero-information rows are unavailable."""
    k = block.shape[0]
    se = np.full(k, np.nan)
    live = np.flatnonzero(np.any(block != 0, axis=1))
    if live.size == 0:
        return se
    sub = block[np.ix_(live, live)]
    try:
        cov = np.linalg.inv(sub)
    except np.linalg.LinAlgError:
        return se
    if np.linalg.cond(sub) > 1e14:
        return se
    d = np.diag(cov)
    se[live] = np.where(d >= 0, np.sqrt(np.abs(d)), np.nan)
    return se


def asymptotic_ci(estimate, alpha: float) -> np.ndarray:
    """Normal-approximation intervals ``theta_hat -/+ z_{1-alpha/2} SE``.

    Returns an array of shape ``(P, 2)``; rows with no SE are ``nan``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    theta = estimate.vector if hasattr(estimate, "vector") else np.asarray(estimate[0], dtype=float)
    se = estimate.se if hasattr(estimate, "se") else np.asarray(estimate[1], dtype=float)
    if se is None:
        se = np.full(theta.shape, np.nan)
    z = norm.ppf(1 - alpha / 2)
    return np.column_stack([theta - z * se, theta + z * se])
