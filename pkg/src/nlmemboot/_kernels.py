"""Compiled inner loops for the built-in structural models.

The random numbers are generated outside (Philox streams) and passed in, so
the compiled sweep and the pure-numpy sweep in :mod:`nlmemboot.saem` consume
identical inputs and can be checked against each other.
"""
import math

import numpy as np
from numba import njit

MODEL_CODES = {"SigEmax": 0, "Intercept": 1, "Linear": 2}
ERROR_CODES = {"Constant": 0, "Proportional": 1, "Combined": 2}


@njit(cache=True)
def _mean(code, psi, x, logx):
    if code == 0:
        if x == 0.0:
            return psi[0]
        return psi[0] + psi[1] / (1.0 + math.exp(psi[3] * (math.log(psi[2]) - logx)))
    if code == 1:
        return psi[0]
    return psi[0] + psi[1] * x


@njit(cache=True)
def _sd(ecode, sigma, f):
    if ecode == 0:
        return sigma[0]
    if ecode == 1:
        return sigma[0] * abs(f)
    return sigma[0] + sigma[1] * abs(f)


@njit(cache=True)
def _unit_loglik(code, ecode, psi, x, logx, xg, gfix, y, n, sigma):
    s = 0.0
    if code == 0 and ecode == 1:
        # sigmoid Emax with proportional error; with a population gamma the
        # powers x**gamma arrive precomputed in xg
        e0, emax, gam = psi[0], psi[1], psi[3]
        edg = math.exp(gam * math.log(psi[2]))
        sig = max(sigma[0], 1e-300)
        prod = 1.0
        logsum = 0.0
        for j in range(n):
            if gfix:
                xgj = xg[j]
            elif x[j] == 0.0:
                xgj = 0.0
            else:
                xgj = math.exp(gam * logx[j])
            f = e0 + emax * xgj / (xgj + edg)
            af = max(abs(f), 1e-300)
            r = (y[j] - f) / (sig * af)
            s -= 0.5 * r * r
            prod *= af
            if (j & 15) == 15:
                logsum += math.log(prod)
                prod = 1.0
        return s - logsum - math.log(prod) - n * math.log(sig)
    for j in range(n):
        f = _mean(code, psi, x[j], logx[j])
        g = _sd(ecode, sigma, f)
        if g < 1e-300:
            g = 1e-300
        r = (y[j] - f) / g
        s -= math.log(g) + 0.5 * r * r
    return s


@njit(cache=True)
def _fill_psi(psi, mu, phi_u, re_idx, lognormal):
    for k in range(mu.shape[0]):
        psi[k] = mu[k]
    for d in range(re_idx.shape[0]):
        psi[re_idx[d]] = math.exp(phi_u[d]) if lognormal[d] else phi_u[d]


@njit(cache=True)
def loglik(code, ecode, phi, mu, re_idx, lognormal, sigma, x, logx, xg, gfix, y, nobs):
    U = phi.shape[0]
    out = np.empty(U)
    psi = np.empty(mu.shape[0])
    for u in range(U):
        _fill_psi(psi, mu, phi[u], re_idx, lognormal)
        out[u] = _unit_loglik(code, ecode, psi, x[u], logx[u], xg[u], gfix, y[u], nobs[u], sigma)
    return out


@njit(cache=True)
def _logprior(phi_u, m, prec):
    q = m.shape[0]
    s = 0.0
    for a in range(q):
        da = phi_u[a] - m[a]
        for b in range(q):
            s += da * prec[a, b] * (phi_u[b] - m[b])
    return -0.5 * s


@njit(cache=True)
def sweep(code, ecode, phi, ll, log_s_joint, log_s_comp, n_accept,
          mu, re_idx, lognormal, m, chol, prec, omega_sd, sigma,
          x, logx, xg, gfix, y, nobs, zp, lup, zj, luj, zc, luc, adapt, target, rate):
    """One pass of the prior, joint random-walk and componentwise kernels."""
    U, q = phi.shape
    p = mu.shape[0]
    psi = np.empty(p)
    prop = np.empty(q)
    for u in range(U):
        # prior (independence) proposals: likelihood ratio only
        for r in range(zp.shape[0]):
            for a in range(q):
                v = m[a]
                for b in range(a + 1):
                    v += chol[a, b] * zp[r, u, b]
                prop[a] = v
            _fill_psi(psi, mu, prop, re_idx, lognormal)
            lln = _unit_loglik(code, ecode, psi, x[u], logx[u], xg[u], gfix, y[u], nobs[u], sigma)
            if lup[r, u] < lln - ll[u]:
                for a in range(q):
                    phi[u, a] = prop[a]
                ll[u] = lln
                n_accept[u] += 1
        lp = _logprior(phi[u], m, prec)
        for r in range(zj.shape[0]):
            sc = math.exp(log_s_joint[u])
            for a in range(q):
                v = 0.0
                for b in range(a + 1):
                    v += chol[a, b] * zj[r, u, b]
                prop[a] = phi[u, a] + sc * v
            _fill_psi(psi, mu, prop, re_idx, lognormal)
            lln = _unit_loglik(code, ecode, psi, x[u], logx[u], xg[u], gfix, y[u], nobs[u], sigma)
            lpn = _logprior(prop, m, prec)
            acc = luj[r, u] < lln + lpn - ll[u] - lp
            if acc:
                for a in range(q):
                    phi[u, a] = prop[a]
                ll[u] = lln
                lp = lpn
                n_accept[u] += 1
            if adapt:
                log_s_joint[u] += rate * ((1.0 if acc else 0.0) - target)
        for r in range(zc.shape[0]):
            for d in range(q):
                for a in range(q):
                    prop[a] = phi[u, a]
                prop[d] += math.exp(log_s_comp[u, d]) * omega_sd[d] * zc[r, d, u]
                _fill_psi(psi, mu, prop, re_idx, lognormal)
                lln = _unit_loglik(code, ecode, psi, x[u], logx[u], xg[u], gfix, y[u], nobs[u], sigma)
                lpn = _logprior(prop, m, prec)
                acc = luc[r, d, u] < lln + lpn - ll[u] - lp
                if acc:
                    phi[u, d] = prop[d]
                    ll[u] = lln
                    lp = lpn
                    n_accept[u] += 1
                if adapt:
                    log_s_comp[u, d] += rate * ((1.0 if acc else 0.0) - target)
        if adapt:
            log_s_joint[u] = min(3.0, max(-25.0, log_s_joint[u]))
            for d in range(q):
                log_s_comp[u, d] = min(3.0, max(-25.0, log_s_comp[u, d]))
    return zp.shape[0] + zj.shape[0] + zc.shape[0] * q


@njit(cache=True)
def fixed_newton_sums(code, ecode, phi, mu, k, h, logscale, re_idx, lognormal, sigma, x, logx, y, nobs):
    """Total log-likelihood at ``w - h, w, w + h`` for fixed-only parameter ``k``."""
    out = np.zeros(3)
    trial = mu.copy()
    w = math.log(mu[k]) if logscale else mu[k]
    psi = np.empty(mu.shape[0])
    for t in range(3):
        wv = w + (t - 1) * h
        trial[k] = math.exp(wv) if logscale else wv
        for u in range(phi.shape[0]):
            _fill_psi(psi, trial, phi[u], re_idx, lognormal)
            out[t] += _unit_loglik(code, ecode, psi, x[u], logx[u], x[u], False, y[u], nobs[u], sigma)
    return out


@njit(cache=True)
def residual_ss(code, ecode, phi, mu, re_idx, lognormal, x, logx, y, nobs):
    """Sum of squared residuals, divided by |f| for the proportional model."""
    psi = np.empty(mu.shape[0])
    s = 0.0
    for u in range(phi.shape[0]):
        _fill_psi(psi, mu, phi[u], re_idx, lognormal)
        for j in range(nobs[u]):
            f = _mean(code, psi, x[u, j], logx[u, j])
            r = y[u, j] - f
            if ecode == 1:
                r = r / max(abs(f), 1e-300)
            s += r * r
    return s
