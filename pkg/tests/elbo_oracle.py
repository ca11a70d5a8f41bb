"""Second, deliberately naive ELBO implementation for tiny instances.

Everything is computed from dense matrices and numerical quadrature so that
it shares no code path with the engine beyond the state it reads.  Only
valid when the q(beta) factor is consistent with the current expectations,
i.e. right after ``update_beta``.
"""
import numpy as np
from scipy import integrate, stats

from effconn.data import build_lagged_design


_CUTS = np.array([1e-15, 1e-9, 1e-5, 1e-3, 0.05, 0.5])


def _expect(dist, fn, positive=False):
    # piecewise over quantile bands so heavy tails are not skipped; positive
    # supports are integrated in log x to tame densities singular at zero
    edges = np.unique(np.r_[dist.ppf(_CUTS), dist.isf(_CUTS[::-1])])
    if positive:
        edges = np.log(edges)
        integrand = lambda y: fn(np.exp(y)) * dist.pdf(np.exp(y)) * np.exp(y)
    else:
        integrand = lambda x: fn(x) * dist.pdf(x)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-14, epsrel=1e-13)
        total += val
    return total


def _ig(shape, scale):
    return stats.invgamma(shape, scale=scale)


def _elog(shape, scale):
    return _expect(_ig(shape, scale), np.log, positive=True)


def _einv(shape, scale):
    return _expect(_ig(shape, scale), lambda x: 1.0 / x, positive=True)


def _ig_logpdf_expect(q, a, b):
    prior = _ig(a, b)
    return _expect(q, prior.logpdf, positive=True)


def dense_covariance(model, state, s):
    """Posterior covariance of subject s from the full Kronecker precision."""
    g = model.labels[s]
    ez = np.array([_einv(z1, z2) for z1, z2 in zip(state.z1, state.z2)])
    e1, e0 = _einv(state.c1[g], state.d1[g]), _einv(state.c0[g], state.d0[g])
    nu = state.nu[g]
    prec = np.kron(np.diag(ez), model.gram[s]) + np.diag(nu * e1 + (1 - nu) * e0)
    return np.linalg.inv(prec)


def elbo(model, state) -> float:
    R, RL, K, T = model.R, model.RL, model.K, model.n_obs
    total = 0.0
    ez = np.array([_einv(a, b) for a, b in zip(state.z1, state.z2)])
    elz = np.array([_elog(a, b) for a, b in zip(state.z1, state.z2)])

    # likelihood: sum_j E log N(x_j | U beta_j, zeta_j I)
    des = build_lagged_design(model.dataset)
    for s in range(model.n):
        Sig = dense_covariance(model, state, s)
        m = state.mean[s]
        U, X = des.U[s], des.X[s]
        for j in range(R):
            blk = slice(j * RL, (j + 1) * RL)
            r = X[:, j] - U @ m[blk]
            quad = r @ r + np.trace(U @ Sig[blk, blk] @ U.T)
            total += -0.5 * T * np.log(2 * np.pi) - 0.5 * T * elz[j] - 0.5 * ez[j] * quad
        total += stats.multivariate_normal(mean=m, cov=Sig).entropy()

    for g in range(model.G):
        e1, e0 = _einv(state.c1[g], state.d1[g]), _einv(state.c0[g], state.d0[g])
        l1, l0 = _elog(state.c1[g], state.d1[g]), _elog(state.c0[g], state.d0[g])
        nu, mu, s2, anc = state.nu[g], state.mu[g], state.s2[g], state.anchor[g]
        for s in model.members[g]:
            Sig = dense_covariance(model, state, s)
            for k in range(K):
                mb, vb = state.mean[s, k], Sig[k, k]
                slab = -0.5 * np.log(2 * np.pi) - 0.5 * l1 - 0.5 * e1 * ((mb - mu[k]) ** 2 + vb + s2[k])
                spike = -0.5 * np.log(2 * np.pi) - 0.5 * l0 - 0.5 * e0 * (mb ** 2 + vb)
                total += nu[k] * slab + (1 - nu[k]) * spike
        for k in range(K):
            v = model.slab_var[k]
            q = stats.norm(mu[k], np.sqrt(s2[k]))
            e_logp = -0.5 * np.log(2 * np.pi * v) - ((mu[k] - anc[k]) ** 2 + s2[k]) / (2 * v)
            total += nu[k] * (e_logp + q.entropy())
            total += stats.bernoulli(nu[k]).entropy()
        for (a, b, c, d) in ((model.a1[g], model.b1[g], state.c1[g], state.d1[g]),
                             (model.a0[g], model.b0[g], state.c0[g], state.d0[g])):
            total += _ig_logpdf_expect(_ig(c, d), a, b) + _ig(c, d).entropy()

        if model.structural:
            qa = stats.norm(state.mu_a1[g], np.sqrt(state.s2_a1[g]))
            for k in range(K):
                N = model.N[g, k]
                e_psi = _expect(qa, lambda a, N=N: model.alpha0[g] + a * N)
                e_psi2 = _expect(qa, lambda a, N=N: (model.alpha0[g] + a * N) ** 2)
                c = state.tilt[g, k]
                ephi = 0.25 if c == 0 else np.tanh(c / 2) / (2 * c)
                total += (-np.log(2) + (nu[k] - 0.5) * e_psi - 0.5 * ephi * e_psi2
                          - np.log(np.cosh(c / 2)) + 0.5 * c * c * ephi)
            prior = stats.norm(model.w[g], np.sqrt(model.tau2[g]))
            total += _expect(qa, prior.logpdf) + qa.entropy()
        else:
            qp = stats.beta(state.m[g], state.nb[g])
            e_lp = _expect(qp, np.log, positive=True)
            e_l1p = _expect(qp, lambda p: np.log1p(-p), positive=True)
            total += np.sum(nu * e_lp + (1 - nu) * e_l1p)
            total += _expect(qp, stats.beta(model.e[g], model.f[g]).logpdf, positive=True) + qp.entropy()

    for j in range(R):
        q = _ig(state.z1[j], state.z2[j])
        total += _ig_logpdf_expect(q, model.hyper.h1, model.hyper.h2) + q.entropy()
    return float(total)
