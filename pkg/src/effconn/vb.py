"""Mean-field coordinate ascent for the multi-subject spike-and-slab VAR.

The variational family is

* ``q(beta_s) = N(mean_s, Sigma_s)`` per subject, block diagonal over target regions;
* ``q(zeta_j) = IG(z1_j, z2_j)`` per region;
* ``q(xi1_g) = IG(c1, d1)``, ``q(xi0_g) = IG(c0, d0)`` per group;
* ``q(w_k | gamma_k = 1) = N(mu_k, s2_k)``, ``q(gamma_k) = Bernoulli(nu_k)``;
* ``q(alpha1_g) = N(mu_a1, s2_a1)`` and ``q(phi_k) = PG(1, tilt_k)`` when a
  structural prior is given, otherwise ``q(pi_g) = Beta(m, n)``.

Every update is a method-free function acting on a :class:`VariationalState`
in place, so tests can drive single coordinates.  A sweep runs them in the
order beta, zeta, xi, (w, gamma), alpha1, phi  (or pi).
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import digamma, expit, gammainccinv, gammaln, betaln

from .data import (LaggedDesign, SmoothingMatrix, StructuralPrior, StudyDataset,
                   ValidationError, build_lagged_design, index_table)
from .polyagamma import pg_mean

log = logging.getLogger(__name__)

RHO_CLAMP = 700.0
LOG2PI = np.log(2.0 * np.pi)


class NumericalError(RuntimeError):
    """Numerical breakdown during fitting; ``state`` holds the last good state."""

    def __init__(self, msg, state=None, details=None):
        super().__init__(msg)
        self.state = state
        self.details = details or {}


@dataclass
class Hyperparameters:
    h1: float = 2.0
    h2: float = 1.0
    a1: float = 2.0
    b1: float = 1.0
    a0: float = 2.0
    b0: float = 1.0
    q: float = 100.0
    alpha0: float = -2.944
    w: float = 0.0
    tau2: float = 100.0
    e: float = 0.1
    f: float = 1.9
    selection_threshold: float = 0.5
    tol: float = 0.01
    max_iters: int = 200
    mc_samples: int = 1000
    mc_refresh: bool = False
    rho_estimator: str = "mc"          # "mc" or "plugin"
    pg_tilt_uses_variance: bool = True
    imbalance_constant: float = 1.0
    init_strategy: str = "default"     # or "ridge": start from per-subject ridge fits
    # initial variational parameters
    init_slab_variance: float = 10.0
    init_xi1: tuple = (2.0, 20.0)
    init_xi0: tuple = (2.0, 10.0)
    init_zeta: tuple = (2.0, 5.0)
    init_nu: float = 0.1
    init_alpha1_variance: float = 10.0
    init_beta_bernoulli: tuple = (3.0, 0.005)
    debug: bool = False

    def __post_init__(self):
        for name in ("h1", "h2", "a1", "b1", "a0", "b0", "q", "tau2", "e", "f"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValidationError(f"hyperparameter {name} must be positive")
        if not 0 < self.selection_threshold < 1:
            raise ValidationError("selection_threshold must lie in (0, 1)")
        if self.mc_samples < 1:
            raise ValidationError("mc_samples must be >= 1")
        if self.init_strategy not in ("default", "ridge"):
            raise ValidationError("init_strategy must be 'default' or 'ridge'")
        if self.rho_estimator not in ("mc", "plugin"):
            raise ValidationError("rho_estimator must be 'mc' or 'plugin'")
        for pair in (self.init_xi1, self.init_xi0, self.init_zeta, self.init_beta_bernoulli):
            if min(pair) <= 0:
                raise ValidationError("initial shape/scale parameters must be positive")

    def per_group(self, name: str, G: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (G,)).copy()

    def to_dict(self) -> dict:
        out = {}
        for f_ in fields(self):
            v = getattr(self, f_.name)
            out[f_.name] = list(v) if isinstance(v, tuple) else (
                np.asarray(v).tolist() if isinstance(v, np.ndarray) else v)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        known = {f_.name for f_ in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown hyperparameters: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) and k.startswith("init_") else v
              for k, v in d.items()}
        return cls(**kw)


class Model:
    """Fixed inputs of a fit: sufficient statistics, priors and group layout."""

    def __init__(self, dataset: StudyDataset, hyper: Hyperparameters,
                 prior: StructuralPrior | None = None,
                 smoothing: SmoothingMatrix | None = None):
        self.dataset = dataset
        self.hyper = hyper
        self.R, self.L, self.n, self.G = dataset.R, dataset.lag, dataset.n, dataset.n_groups
        self.RL = self.R * self.L
        self.K = dataset.K
        self.n_obs = dataset.T - dataset.lag
        design: LaggedDesign = build_lagged_design(dataset)
        self.gram = design.gram                                   # (n, RL, RL)
        self.cross = design.cross                                 # (n, RL, R)
        self.xx = np.einsum("stj,stj->sj", design.X, design.X)    # (n, R)
        self.labels = dataset.group_labels - 1
        self.members = [np.flatnonzero(self.labels == g) for g in range(self.G)]
        self.sizes = np.array([m.size for m in self.members], dtype=float)
        if prior is not None:
            prior.check(self.G, self.K)
            self.N = np.asarray(prior.vectors, dtype=float)
        else:
            self.N = None
        if smoothing is None:
            smoothing = SmoothingMatrix.identity(self.K)
        smoothing.check(self.K)
        self.smoothing = smoothing
        self.slab_var = hyper.q / smoothing.row_sums              # (K,)
        for name in ("a1", "b1", "a0", "b0", "alpha0", "w", "tau2", "e", "f"):
            setattr(self, name, hyper.per_group(name, self.G))

    @property
    def structural(self) -> bool:
        return self.N is not None


@dataclass
class VariationalState:
    mean: np.ndarray          # (n, K) subject coefficient means
    cov_diag: np.ndarray      # (n, K) marginal variances
    tr_gram: np.ndarray       # (n, R) tr(U'U Sigma_jj) per target block
    logdet: np.ndarray        # (n,) log|Sigma_s|
    z1: np.ndarray
    z2: np.ndarray
    c1: np.ndarray
    d1: np.ndarray
    c0: np.ndarray
    d0: np.ndarray
    mu: np.ndarray            # (G, K)
    s2: np.ndarray
    nu: np.ndarray
    anchor: np.ndarray        # (G, K) ICAR slab mean used in the last w update
    mu_a1: np.ndarray         # (G,)
    s2_a1: np.ndarray
    tilt: np.ndarray          # (G, K) PG tilt of q(phi)
    e_phi: np.ndarray
    m: np.ndarray             # (G,) Beta-Bernoulli mode
    nb: np.ndarray
    mc_uniforms: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def copy(self) -> "VariationalState":
        return VariationalState(**{k: np.array(v, copy=True) for k, v in asdict(self).items()})

    @property
    def e_inv_zeta(self):
        return self.z1 / self.z2

    @property
    def e_inv_xi1(self):
        return self.c1 / self.d1

    @property
    def e_inv_xi0(self):
        return self.c0 / self.d0


def _ig_elog(c, d):
    return np.log(d) - digamma(c)


def _ig_entropy(c, d):
    return c + np.log(d) + gammaln(c) - (1.0 + c) * digamma(c)


def _ig_expected_logpdf(a, b, c, d):
    """E_{IG(c,d)}[log IG(x | a, b)]."""
    return a * np.log(b) - gammaln(a) - (a + 1.0) * _ig_elog(c, d) - b * c / d


def _bernoulli_entropy(nu):
    nu = np.clip(nu, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(nu > 0, nu * np.log(nu), 0.0) - np.where(nu < 1, (1 - nu) * np.log1p(-nu), 0.0)
    return h


def _log_cosh_half(c):
    c = np.abs(c) / 2.0
    return c + np.log1p(np.exp(-2.0 * c)) - np.log(2.0)


# -- initialisation ----------------------------------------------------------

def initialize(model: Model, rng: np.random.Generator) -> VariationalState:
    h = model.hyper
    n, K, R, G = model.n, model.K, model.R, model.G
    mu = rng.uniform(-0.5, 0.5, size=(G, K))
    nu = np.full((G, K), h.init_nu)
    state = VariationalState(
        mean=np.zeros((n, K)), cov_diag=np.zeros((n, K)), tr_gram=np.zeros((n, R)),
        logdet=np.zeros(n),
        z1=np.full(R, h.init_zeta[0]), z2=np.full(R, h.init_zeta[1]),
        c1=np.full(G, h.init_xi1[0]), d1=np.full(G, h.init_xi1[1]),
        c0=np.full(G, h.init_xi0[0]), d0=np.full(G, h.init_xi0[1]),
        mu=mu, s2=np.full((G, K), h.init_slab_variance), nu=nu,
        anchor=np.zeros((G, K)),
        mu_a1=np.zeros(G), s2_a1=np.full(G, h.init_alpha1_variance),
        tilt=np.zeros((G, K)), e_phi=np.full((G, K), 0.25),
        m=np.full(G, h.init_beta_bernoulli[0]), nb=np.full(G, h.init_beta_bernoulli[1]),
        mc_uniforms=rng.random(h.mc_samples),
    )
    if h.init_strategy == "ridge":
        _ridge_start(model, state)
    S, rs = model.smoothing.S, model.smoothing.row_sums
    state.anchor = (state.nu * state.mu) @ S / rs
    if model.structural:
        nbar = model.N.mean(axis=1)
        with np.errstate(divide="ignore"):
            state.mu_a1 = np.where(nbar > 0, h.imbalance_constant * model.sizes / nbar, model.w)
        for g in range(G):
            update_phi(model, state, g)
    return state


def ridge_estimates(model: Model, penalty: float = 1e-3) -> np.ndarray:
    """Per-subject ridge coefficients in the flat layout, shape (n, K)."""
    eye = penalty * np.eye(model.RL)
    B = np.linalg.solve(model.gram + eye[None], model.cross)     # (n, RL, R)
    return np.transpose(B, (0, 2, 1)).reshape(model.n, model.K)


def _ridge_start(model: Model, state: VariationalState):
    """Centre the slab on group means of ridge fits and size q(xi) by their spread."""
    beta = ridge_estimates(model)
    for g, idx in enumerate(model.members):
        m = beta[idx].mean(axis=0)
        spread = float(np.mean((beta[idx] - m) ** 2)) + 1e-6
        state.mu[g] = m
        state.s2[g] = spread / model.sizes[g]
        state.d1[g] = spread * (state.c1[g] - 1.0)
        state.d0[g] = spread * (state.c0[g] - 1.0)


# -- step 1: subject coefficients -------------------------------------------

def beta_prior_precision(model: Model, state: VariationalState, g: int):
    """Diagonal of E[Sigma_g^{-1}] and the matching linear term E[Sigma^{-1} w]."""
    e1, e0 = state.e_inv_xi1[g], state.e_inv_xi0[g]
    nu = state.nu[g]
    prec = nu * e1 + (1.0 - nu) * e0
    lin = nu * e1 * state.mu[g]
    return prec, lin


def update_beta(model: Model, state: VariationalState, s: int | None = None):
    """Closed-form Gaussian update of q(beta_s); all subjects when ``s`` is None."""
    subjects = range(model.n) if s is None else [s]
    R, RL = model.R, model.RL
    ez = state.e_inv_zeta
    for si in subjects:
        g = model.labels[si]
        prec_d, lin = beta_prior_precision(model, state, g)
        P = ez[:, None, None] * model.gram[si][None]
        diag = np.einsum("jii->ji", P)
        diag += prec_d.reshape(R, RL)
        rhs = ez[:, None] * model.cross[si].T + lin.reshape(R, RL)
        try:
            chol = np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            cond = float(np.max(np.linalg.cond(P)))
            raise NumericalError(f"subject {si + 1}: posterior precision not SPD "
                                 f"(condition number {cond:.3g})", details={"cond": cond})
        Linv = np.linalg.inv(chol)
        cov = np.matmul(Linv.transpose(0, 2, 1), Linv)
        state.mean[si] = np.matmul(cov, rhs[:, :, None])[:, :, 0].ravel()
        state.cov_diag[si] = np.diagonal(cov, axis1=1, axis2=2).ravel()
        state.tr_gram[si] = (cov * model.gram[si][None]).sum(axis=(1, 2))
        state.logdet[si] = -2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()


def subject_covariance(model: Model, state: VariationalState, s: int) -> np.ndarray:
    """Full K x K covariance of q(beta_s), rebuilt from the current expectations."""
    R, RL = model.R, model.RL
    g = model.labels[s]
    prec_d, _ = beta_prior_precision(model, state, g)
    out = np.zeros((model.K, model.K))
    for j in range(R):
        P = state.e_inv_zeta[j] * model.gram[s] + np.diag(prec_d[j * RL:(j + 1) * RL])
        out[j * RL:(j + 1) * RL, j * RL:(j + 1) * RL] = np.linalg.inv(P)
    return out


# -- step 2: noise variances -------------------------------------------------

def residual_energy(model: Model, state: VariationalState) -> np.ndarray:
    """E||x_j - U beta_j||^2 per subject and target, shape (n, R)."""
    R, RL = model.R, model.RL
    M = state.mean.reshape(model.n, R, RL)
    lin = np.einsum("sij,sji->sj", model.cross, M)
    quad = np.einsum("sji,sik,sjk->sj", M, model.gram, M)
    return model.xx - 2.0 * lin + quad + state.tr_gram


def update_zeta(model: Model, state: VariationalState):
    h = model.hyper
    state.z1 = np.full(model.R, h.h1 + model.n * model.n_obs / 2.0)
    state.z2 = h.h2 + 0.5 * residual_energy(model, state).sum(axis=0)
    if np.any(state.z2 <= 0):
        raise NumericalError("non-positive IG scale for noise variance",
                             details={"z2": state.z2.tolist()})


# -- step 3: slab / spike variances -----------------------------------------

def group_moments(model: Model, state: VariationalState, g: int):
    """Sum of subject means and of subject second moments over group ``g``."""
    idx = model.members[g]
    bsum = state.mean[idx].sum(axis=0)
    qsum = (state.mean[idx] ** 2 + state.cov_diag[idx]).sum(axis=0)
    return bsum, qsum


def update_xi(model: Model, state: VariationalState, g: int):
    Sg = model.sizes[g]
    nu, mu, s2 = state.nu[g], state.mu[g], state.s2[g]
    bsum, qsum = group_moments(model, state, g)
    state.c1[g] = model.a1[g] + 0.5 * Sg * nu.sum()
    state.d1[g] = model.b1[g] + 0.5 * np.sum(nu * (qsum - 2.0 * bsum * mu + Sg * (mu ** 2 + s2)))
    state.c0[g] = model.a0[g] + 0.5 * Sg * (1.0 - nu).sum()
    state.d0[g] = model.b0[g] + 0.5 * np.sum((1.0 - nu) * qsum)
    if state.d1[g] <= 0 or state.d0[g] <= 0:
        raise NumericalError(f"group {g + 1}: non-positive IG scale for slab/spike variance")


# -- step 4: slab means and inclusion probabilities -------------------------

def _xi1_draws(state: VariationalState, g: int) -> np.ndarray:
    return state.d1[g] / gammainccinv(state.c1[g], state.mc_uniforms)


def marginal_slab_term(bsum, Sg, anchor, v, inv_xi):
    """log of the slab integral over w for given 1/xi1; broadcasts over ``inv_xi``."""
    prec = Sg * inv_xi + 1.0 / v
    lin = bsum * inv_xi + anchor / v
    return -0.5 * np.log(v * prec) + 0.5 * lin ** 2 / prec - 0.5 * anchor ** 2 / v


def prior_log_odds(model: Model, state: VariationalState, g: int):
    if model.structural:
        return model.alpha0[g] + state.mu_a1[g] * model.N[g]
    return np.full(model.K, digamma(state.m[g]) - digamma(state.nb[g]))


def update_omega_gamma(model: Model, state: VariationalState, g: int, rng: np.random.Generator):
    """Update (mu_k, s2_k, nu_k) of group ``g``, visiting k in random order."""
    h = model.hyper
    Sg = model.sizes[g]
    e1, e0 = state.e_inv_xi1[g], state.e_inv_xi0[g]
    elog_ratio = _ig_elog(state.c1[g], state.d1[g]) - _ig_elog(state.c0[g], state.d0[g])
    bsum, qsum = group_moments(model, state, g)
    v = model.slab_var
    base = -0.5 * Sg * elog_ratio - 0.5 * (e1 - e0) * qsum + prior_log_odds(model, state, g)
    inv_xi = e1 if h.rho_estimator == "plugin" else 1.0 / _xi1_draws(state, g)
    S, rs = model.smoothing.S, model.smoothing.row_sums
    order = rng.permutation(model.K)
    mu, s2, nu, anchor = state.mu[g], state.s2[g], state.nu[g], state.anchor[g]

    if model.smoothing.is_diagonal:
        # each coefficient is its own only neighbour, so the sweep order is immaterial
        anchor[:] = nu * mu
        _slab_and_odds(slice(None), bsum, Sg, e1, anchor, v, inv_xi, base, mu, s2, nu)
        return
    for k in order:
        anchor[k] = S[k] @ (nu * mu) / rs[k]
        _slab_and_odds(k, bsum, Sg, e1, anchor, v, inv_xi, base, mu, s2, nu)


def _slab_and_odds(k, bsum, Sg, e1, anchor, v, inv_xi, base, mu, s2, nu):
    prec = Sg * e1 + 1.0 / v[k]
    s2[k] = 1.0 / prec
    mu[k] = s2[k] * (e1 * bsum[k] + anchor[k] / v[k])
    if np.ndim(inv_xi) == 0:
        slab = marginal_slab_term(bsum[k], Sg, anchor[k], v[k], inv_xi)
    else:
        slab = marginal_slab_term(np.asarray(bsum[k])[..., None], Sg,
                                  np.asarray(anchor[k])[..., None],
                                  np.asarray(v[k])[..., None], inv_xi).mean(axis=-1)
    rho = np.clip(base[k] + slab, -RHO_CLAMP, RHO_CLAMP)
    nu[k] = expit(rho)


# -- steps 5-7: inclusion prior ---------------------------------------------

def update_alpha1(model: Model, state: VariationalState, g: int):
    if not model.structural:
        raise RuntimeError("alpha1 update requires a structural prior")
    N = model.N[g]
    ephi = state.e_phi[g]
    prec = np.sum(ephi * N ** 2) + 1.0 / model.tau2[g]
    state.s2_a1[g] = 1.0 / prec
    state.mu_a1[g] = state.s2_a1[g] * (
        np.sum((state.nu[g] - 0.5 - ephi * model.alpha0[g]) * N) + model.w[g] / model.tau2[g])


def pg_tilt(model: Model, state: VariationalState, g: int) -> np.ndarray:
    N = model.N[g]
    mean = model.alpha0[g] + state.mu_a1[g] * N
    if model.hyper.pg_tilt_uses_variance:
        return np.sqrt(mean ** 2 + state.s2_a1[g] * N ** 2)
    return np.abs(mean)


def update_phi(model: Model, state: VariationalState, g: int):
    if not model.structural:
        raise RuntimeError("phi update requires a structural prior")
    state.tilt[g] = pg_tilt(model, state, g)
    state.e_phi[g] = pg_mean(1.0, state.tilt[g])


def update_pi(model: Model, state: VariationalState, g: int):
    if model.structural:
        raise RuntimeError("Beta-Bernoulli update called with a structural prior")
    total = state.nu[g].sum()
    state.m[g] = model.e[g] + total
    state.nb[g] = model.f[g] + model.K - total


# -- objective ---------------------------------------------------------------

def elbo_terms(model: Model, state: VariationalState) -> dict:
    """ELBO split by factor; the sum of the values is the ELBO."""
    h = model.hyper
    T_eff, K = model.n_obs, model.K
    ez = state.e_inv_zeta
    elog_z = _ig_elog(state.z1, state.z2)
    res = residual_energy(model, state)
    terms = {}
    terms["likelihood"] = float(np.sum(
        -0.5 * T_eff * (LOG2PI + elog_z)[None, :] - 0.5 * ez[None, :] * res))

    beta_prior = 0.0
    for g in range(model.G):
        idx = model.members[g]
        e1, e0 = state.e_inv_xi1[g], state.e_inv_xi0[g]
        l1, l0 = _ig_elog(state.c1[g], state.d1[g]), _ig_elog(state.c0[g], state.d0[g])
        m2 = state.mean[idx] ** 2 + state.cov_diag[idx]
        mu, s2, nu = state.mu[g], state.s2[g], state.nu[g]
        slab_sq = m2 - 2.0 * state.mean[idx] * mu + mu ** 2 + s2
        beta_prior += np.sum(-0.5 * LOG2PI - 0.5 * (nu * (l1 + e1 * slab_sq) + (1 - nu) * (l0 + e0 * m2)))
    terms["beta_prior"] = float(beta_prior)
    terms["beta_entropy"] = float(np.sum(0.5 * K * (1.0 + LOG2PI) + 0.5 * state.logdet))

    terms["zeta"] = float(np.sum(_ig_expected_logpdf(h.h1, h.h2, state.z1, state.z2)
                                 + _ig_entropy(state.z1, state.z2)))
    terms["xi"] = float(np.sum(
        _ig_expected_logpdf(model.a1, model.b1, state.c1, state.d1) + _ig_entropy(state.c1, state.d1)
        + _ig_expected_logpdf(model.a0, model.b0, state.c0, state.d0) + _ig_entropy(state.c0, state.d0)))

    v = model.slab_var[None, :]
    terms["slab"] = float(np.sum(state.nu * (
        0.5 * np.log(state.s2 / v) + 0.5 - ((state.mu - state.anchor) ** 2 + state.s2) / (2.0 * v))))
    terms["gamma_entropy"] = float(np.sum(_bernoulli_entropy(state.nu)))

    if model.structural:
        N = model.N
        a0 = model.alpha0[:, None]
        e_psi = a0 + state.mu_a1[:, None] * N
        e_psi2 = e_psi ** 2 + state.s2_a1[:, None] * N ** 2
        c = state.tilt
        terms["inclusion_prior"] = float(np.sum(
            -np.log(2.0) + (state.nu - 0.5) * e_psi - 0.5 * state.e_phi * e_psi2
            - _log_cosh_half(c) + 0.5 * c ** 2 * state.e_phi))
        terms["alpha1"] = float(np.sum(
            -0.5 * np.log(model.tau2) - ((state.mu_a1 - model.w) ** 2 + state.s2_a1) / (2.0 * model.tau2)
            + 0.5 * np.log(state.s2_a1) + 0.5))
    else:
        m, nb = state.m, state.nb
        el_pi = digamma(m) - digamma(m + nb)
        el_1mpi = digamma(nb) - digamma(m + nb)
        terms["inclusion_prior"] = float(np.sum(
            state.nu * el_pi[:, None] + (1.0 - state.nu) * el_1mpi[:, None]))
        kl = (betaln(model.e, model.f) - betaln(m, nb) + (m - model.e) * digamma(m)
              + (nb - model.f) * digamma(nb) + (model.e - m + model.f - nb) * digamma(m + nb))
        terms["pi"] = float(-np.sum(kl))
    return terms


def compute_elbo(model: Model, state: VariationalState) -> float:
    terms = elbo_terms(model, state)
    total = sum(terms.values())
    if not np.isfinite(total):
        raise NumericalError("non-finite ELBO", state=state, details=terms)
    return float(total)


def selection_entropy(state: VariationalState) -> float:
    return float(np.sum(_bernoulli_entropy(state.nu)))


def check_state(state: VariationalState):
    for name in ("z1", "z2", "c1", "d1", "c0", "d0", "s2", "s2_a1", "cov_diag", "m", "nb"):
        if np.any(getattr(state, name) <= 0):
            raise NumericalError(f"variational parameter {name} left its domain", state=state)
    if np.any((state.nu < 0) | (state.nu > 1)):
        raise NumericalError("inclusion probability outside [0, 1]", state=state)


# -- driver ------------------------------------------------------------------

def sweep_rng(seed: int, sweep: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, sweep])


def sweep(model: Model, state: VariationalState, rng: np.random.Generator):
    """One CAVI pass in the fixed step order."""
    update_beta(model, state)
    update_zeta(model, state)
    for g in range(model.G):
        update_xi(model, state, g)
    for g in range(model.G):
        update_omega_gamma(model, state, g, rng)
    for g in range(model.G):
        if model.structural:
            update_alpha1(model, state, g)
            update_phi(model, state, g)
        else:
            update_pi(model, state, g)


@dataclass
class FitResult:
    mpp: np.ndarray                 # (G, K)
    omega_hat: np.ndarray           # (G, K) slab means
    selected: np.ndarray            # (G, K) bool
    elbo_trace: list
    entropy_trace: list
    iterations: int
    converged: bool
    wall_time: float
    seed: int
    R: int
    L: int
    config: dict
    backend: str = "vb"
    extras: dict = field(default_factory=dict)
    state: object = field(default=None, repr=False, compare=False)

    @property
    def coefficient_estimate(self) -> np.ndarray:
        """Group coefficients with unselected entries set to zero."""
        return np.where(self.selected, self.omega_hat, 0.0)

    def edges(self, g: int) -> list[tuple[int, int, int, int]]:
        """Selected edges of 0-based group ``g`` as 1-based (k, lag, source, target)."""
        idx = index_table(self.R, self.L)
        return [(int(k) + 1, *(int(x) + 1 for x in idx[k])) for k in np.flatnonzero(self.selected[g])]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "backend": self.backend,
            "R": self.R, "L": self.L,
            "seed": self.seed,
            "iterations": self.iterations,
            "converged": self.converged,
            "mpp": self.mpp.tolist(),
            "omega_hat": self.omega_hat.tolist(),
            "selected": [[e[0] for e in self.edges(g)] for g in range(self.mpp.shape[0])],
            "selected_triples": [[list(e[1:]) for e in self.edges(g)] for g in range(self.mpp.shape[0])],
            "elbo_trace": list(self.elbo_trace),
            "entropy_trace": list(self.entropy_trace),
            "config": self.config,
            "extras": self.extras,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        mpp = np.asarray(d["mpp"], dtype=float)
        sel = np.zeros(mpp.shape, dtype=bool)
        for g, ks in enumerate(d["selected"]):
            sel[g, np.asarray(ks, dtype=int) - 1] = True
        return cls(mpp=mpp, omega_hat=np.asarray(d["omega_hat"], float), selected=sel,
                   elbo_trace=d.get("elbo_trace", []), entropy_trace=d.get("entropy_trace", []),
                   iterations=d.get("iterations", 0), converged=d.get("converged", True),
                   wall_time=d.get("wall_time", 0.0), seed=d.get("seed", 0), R=d["R"], L=d["L"],
                   config=d.get("config", {}), backend=d.get("backend", "vb"),
                   extras=d.get("extras", {}))


def fit(dataset: StudyDataset, prior: StructuralPrior | None = None,
        smoothing: SmoothingMatrix | None = None, hyper: Hyperparameters | None = None,
        seed: int = 0, callback=None) -> FitResult:
    """Run CAVI until the ELBO changes by less than ``hyper.tol`` or ``max_iters`` sweeps."""
    hyper = hyper or Hyperparameters()
    t0 = time.perf_counter()
    model = Model(dataset, hyper, prior, smoothing)
    state = initialize(model, np.random.default_rng([seed, 0]))
    elbos, entropies = [], []
    converged = False
    last_good = state.copy()
    it = 0
    for it in range(1, hyper.max_iters + 1):
        if hyper.mc_refresh:
            state.mc_uniforms = sweep_rng(seed, it).random(hyper.mc_samples)
        try:
            sweep(model, state, sweep_rng(seed, it))
            if hyper.debug:
                check_state(state)
            elbo = compute_elbo(model, state)
        except NumericalError as err:
            err.state = last_good
            raise
        elbos.append(elbo)
        entropies.append(selection_entropy(state))
        if callback is not None:
            callback(it, state, elbo)
        log.debug("sweep %d elbo %.6f entropy %.4f", it, elbo, entropies[-1])
        if len(elbos) > 1 and abs(elbos[-1] - elbos[-2]) < hyper.tol:
            converged = True
            break
        last_good = state.copy()
    mpp = state.nu.copy()
    return FitResult(
        mpp=mpp, omega_hat=state.mu.copy(), selected=mpp > hyper.selection_threshold,
        elbo_trace=elbos, entropy_trace=entropies, iterations=it, converged=converged,
        wall_time=time.perf_counter() - t0, seed=seed, R=model.R, L=model.L,
        config={"hyperparameters": hyper.to_dict(), "structural_prior": model.structural,
                "smoothing": "identity" if model.smoothing.is_diagonal else "custom"},
        state=state,
    )


def fit_state(dataset, prior=None, smoothing=None, hyper=None, seed=0, sweeps=1):
    """Build a model and run a fixed number of sweeps; returns (model, state)."""
    hyper = hyper or Hyperparameters()
    model = Model(dataset, hyper, prior, smoothing)
    state = initialize(model, np.random.default_rng([seed, 0]))
    for it in range(1, sweeps + 1):
        sweep(model, state, sweep_rng(seed, it))
    return model, state
