"""Gibbs sampler for the multi-subject spike-and-slab VAR.

A small-instance reference for the variational engine: same likelihood, same
priors, sampled exactly from the full conditionals.  The slab mean and the
inclusion indicator of each coefficient are drawn jointly, with the slab mean
integrated out of the indicator odds.  The logistic inclusion prior is handled
with Polya-Gamma auxiliary draws.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import SmoothingMatrix, StructuralPrior, StudyDataset, ValidationError
from .polyagamma import pg_sample
from .vb import FitResult, Hyperparameters, Model, NumericalError, RHO_CLAMP

MAX_COEFFICIENTS = 400
N_MONITORED = 10


@dataclass(frozen=True)
class ChainConfig:
    n_iters: int = 40000
    burn_in: int = 10000
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iters:
            raise ValidationError("burn_in must be smaller than n_iters")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")


@dataclass
class ChainState:
    beta: np.ndarray        # (n, K)
    zeta: np.ndarray        # (R,)
    xi1: np.ndarray         # (G,)
    xi0: np.ndarray         # (G,)
    omega: np.ndarray       # (G, K) slab means
    gamma: np.ndarray       # (G, K) bool
    alpha1: np.ndarray      # (G,)
    phi: np.ndarray         # (G, K)
    pi: np.ndarray          # (G,)

    def copy(self) -> "ChainState":
        return ChainState(**{k: np.array(v, copy=True) for k, v in self.__dict__.items()})


@dataclass
class PosteriorSummary:
    mpp: np.ndarray                 # (G, K)
    omega_mean: np.ndarray          # (G, K) E[gamma * omega]
    omega_slab_mean: np.ndarray     # (G, K) E[omega | gamma = 1], 0 if never included
    beta_mean: np.ndarray           # (n, K)
    zeta_mean: np.ndarray
    xi1_mean: np.ndarray
    xi0_mean: np.ndarray
    geweke: dict                    # monitored scalar name -> z
    n_kept: int
    monitored: dict = field(default_factory=dict, repr=False)


def _inv_gamma(rng, shape, scale):
    return scale / rng.gamma(shape, 1.0)


def initial_chain_state(model: Model, rng: np.random.Generator) -> ChainState:
    """Start from ridge estimates of every subject with all coefficients included."""
    R, RL, n, G, K = model.R, model.RL, model.n, model.G, model.K
    beta = np.empty((n, K))
    for s in range(n):
        B = np.linalg.solve(model.gram[s] + 1e-3 * np.eye(RL), model.cross[s])
        beta[s] = B.reshape(-1, order="F")
    omega = np.stack([beta[m].mean(axis=0) for m in model.members])
    spread = np.array([np.var(beta[m] - omega[g]) + 1e-3 for g, m in enumerate(model.members)])
    return ChainState(
        beta=beta, zeta=np.ones(R), xi1=spread, xi0=np.full(G, 1e-2),
        omega=omega, gamma=np.ones((G, K), dtype=bool),
        alpha1=np.zeros(G), phi=np.full((G, K), 0.25), pi=np.full(G, 0.5),
    )


def subject_sse(model: Model, beta: np.ndarray) -> np.ndarray:
    """||x_sj - U_s beta_sj||^2 for every subject and target, shape (n, R)."""
    M = beta.reshape(model.n, model.R, model.RL)
    lin = np.einsum("sij,sji->sj", model.cross, M)
    quad = np.einsum("sji,sik,sjk->sj", M, model.gram, M)
    return model.xx - 2.0 * lin + quad


def log_likelihood(model: Model, st: ChainState) -> float:
    sse = subject_sse(model, st.beta)
    return float(np.sum(-0.5 * model.n_obs * np.log(2 * np.pi * st.zeta)[None, :]
                        - 0.5 * sse / st.zeta[None, :]))


def sample_beta(model: Model, st: ChainState, rng: np.random.Generator):
    """Draw every subject's coefficients; one batched solve over (subject, target)."""
    R, RL, n = model.R, model.RL, model.n
    gam = st.gamma[model.labels]                                   # (n, K)
    prec_d = np.where(gam, 1.0 / st.xi1[model.labels, None], 1.0 / st.xi0[model.labels, None])
    prior_lin = np.where(gam, st.omega[model.labels], 0.0) * prec_d
    P = model.gram[:, None] / st.zeta[None, :, None, None]        # (n, R, RL, RL)
    diag = np.einsum("sjii->sji", P)
    diag += prec_d.reshape(n, R, RL)
    rhs = np.transpose(model.cross, (0, 2, 1)) / st.zeta[None, :, None] + prior_lin.reshape(n, R, RL)
    try:
        chol = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise NumericalError("conditional precision of subject coefficients not SPD", state=st)
    mean = np.linalg.solve(P, rhs[..., None])[..., 0]
    z = rng.standard_normal((n, R, RL, 1))
    noise = np.linalg.solve(np.swapaxes(chol, -1, -2), z)[..., 0]
    st.beta = (mean + noise).reshape(n, model.K)


def sample_zeta(model: Model, st: ChainState, rng: np.random.Generator):
    h = model.hyper
    sse = subject_sse(model, st.beta).sum(axis=0)
    shape = h.h1 + model.n * model.n_obs / 2.0
    st.zeta = _inv_gamma(rng, shape, h.h2 + 0.5 * sse)


def sample_xi(model: Model, st: ChainState, g: int, rng: np.random.Generator):
    b = st.beta[model.members[g]]
    Sg = model.sizes[g]
    inc = st.gamma[g]
    st.xi1[g] = _inv_gamma(rng, model.a1[g] + 0.5 * Sg * inc.sum(),
                           model.b1[g] + 0.5 * np.sum(((b - st.omega[g]) ** 2)[:, inc]))
    st.xi0[g] = _inv_gamma(rng, model.a0[g] + 0.5 * Sg * (~inc).sum(),
                           model.b0[g] + 0.5 * np.sum((b ** 2)[:, ~inc]))


def _prior_log_odds(model: Model, st: ChainState, g: int):
    if model.structural:
        return model.alpha0[g] + st.alpha1[g] * model.N[g]
    return np.full(model.K, np.log(st.pi[g]) - np.log1p(-st.pi[g]))


def _neighbour_mean(S: SmoothingMatrix, omega: np.ndarray, k=None):
    """ICAR conditional mean over neighbours other than the coefficient itself."""
    if k is None:
        off = S.S @ omega - np.diag(S.S) * omega
        return off / S.row_sums
    return (S.S[k] @ omega - S.S[k, k] * omega[k]) / S.row_sums[k]


def sample_omega_gamma(model: Model, st: ChainState, g: int, rng: np.random.Generator):
    """Joint draw of (omega_k, gamma_k): gamma from odds with omega integrated out."""
    b = st.beta[model.members[g]]
    Sg = model.sizes[g]
    bsum = b.sum(axis=0)
    qsum = (b ** 2).sum(axis=0)
    x1, x0 = st.xi1[g], st.xi0[g]
    v = model.slab_var
    base = (_prior_log_odds(model, st, g) - 0.5 * Sg * (np.log(x1) - np.log(x0))
            - 0.5 * qsum * (1.0 / x1 - 1.0 / x0))
    prec = Sg / x1 + 1.0 / v

    def draw(k, m):
        lin = bsum[k] / x1 + m / v[k]
        slab = -0.5 * np.log(v[k] * prec[k]) + 0.5 * lin ** 2 / prec[k] - 0.5 * m ** 2 / v[k]
        rho = np.clip(base[k] + slab, -RHO_CLAMP, RHO_CLAMP)
        inc = rng.random(np.shape(rho)) < expit(rho)
        post = np.where(inc, lin / prec[k], m)
        sd = np.where(inc, 1.0 / np.sqrt(prec[k]), np.sqrt(v[k]))
        return inc, post + sd * rng.standard_normal(np.shape(rho))

    S = model.smoothing
    if S.is_diagonal:
        st.gamma[g], st.omega[g] = draw(slice(None), np.zeros(model.K))
        return
    for k in rng.permutation(model.K):
        st.gamma[g, k], st.omega[g, k] = draw(k, _neighbour_mean(S, st.omega[g], k))


def sample_inclusion_prior(model: Model, st: ChainState, g: int, rng: np.random.Generator):
    if model.structural:
        N = model.N[g]
        st.phi[g] = pg_sample(1.0, model.alpha0[g] + st.alpha1[g] * N, rng)
        prec = np.sum(st.phi[g] * N ** 2) + 1.0 / model.tau2[g]
        mean = (np.sum((st.gamma[g] - 0.5 - st.phi[g] * model.alpha0[g]) * N)
                + model.w[g] / model.tau2[g]) / prec
        st.alpha1[g] = mean + rng.standard_normal() / np.sqrt(prec)
    else:
        k1 = st.gamma[g].sum()
        st.pi[g] = rng.beta(model.e[g] + k1, model.f[g] + model.K - k1)


def gibbs_sweep(model: Model, st: ChainState, rng: np.random.Generator) -> ChainState:
    """One pass over all full conditionals, updating ``st`` in place."""
    sample_beta(model, st, rng)
    sample_zeta(model, st, rng)
    for g in range(model.G):
        sample_xi(model, st, g, rng)
        sample_omega_gamma(model, st, g, rng)
        sample_inclusion_prior(model, st, g, rng)
    return st


def geweke_z(chain, first: float = 0.1, last: float = 0.5, n_batches: int = 20) -> float:
    """Geweke z-score comparing early and late window means.

    Window variances use batch means, which allows for autocorrelation.
    A window with no variability contributes zero variance; if both are
    constant the score is 0 when the means agree and signed infinity otherwise.
    """
    x = np.asarray(chain, dtype=float)
    a = x[: max(int(first * x.size), 2)]
    b = x[x.size - max(int(last * x.size), 2):]

    def var_of_mean(w):
        nb = min(n_batches, w.size)
        m = w[: (w.size // nb) * nb].reshape(nb, -1).mean(axis=1)
        return m.var(ddof=1) / nb

    diff = a.mean() - b.mean()
    se = np.sqrt(var_of_mean(a) + var_of_mean(b))
    if se == 0:
        return 0.0 if np.isclose(diff, 0.0) else float(np.copysign(np.inf, diff))
    return float(diff / se)


def run_chain(dataset: StudyDataset, prior: StructuralPrior | None = None,
              smoothing: SmoothingMatrix | None = None, hyper: Hyperparameters | None = None,
              config: ChainConfig | None = None, callback=None) -> PosteriorSummary:
    hyper = hyper or Hyperparameters()
    config = config or ChainConfig()
    if dataset.K > MAX_COEFFICIENTS:
        raise ValidationError(
            f"L*R^2 = {dataset.K} exceeds the Gibbs size limit of {MAX_COEFFICIENTS}; "
            "use the variational backend for instances of this size")
    model = Model(dataset, hyper, prior, smoothing)
    rng = np.random.default_rng(config.seed)
    st = initial_chain_state(model, rng)
    G, K = model.G, model.K
    watch = rng.choice(G * K, size=min(N_MONITORED, G * K), replace=False)

    sums = {"gamma": np.zeros((G, K)), "omega": np.zeros((G, K)), "beta": np.zeros(st.beta.shape),
            "zeta": np.zeros(model.R), "xi1": np.zeros(G), "xi0": np.zeros(G)}
    traces = {"loglik": []}
    traces.update({f"omega[{i // K + 1},{i % K + 1}]": [] for i in watch})
    kept = 0
    for it in range(1, config.n_iters + 1):
        gibbs_sweep(model, st, rng)
        if callback is not None:
            callback(it, st)
        if it <= config.burn_in or (it - config.burn_in) % config.thin:
            continue
        kept += 1
        eff = np.where(st.gamma, st.omega, 0.0)
        sums["gamma"] += st.gamma
        sums["omega"] += eff
        sums["beta"] += st.beta
        sums["zeta"] += st.zeta
        sums["xi1"] += st.xi1
        sums["xi0"] += st.xi0
        traces["loglik"].append(log_likelihood(model, st))
        flat = eff.ravel()
        for i in watch:
            traces[f"omega[{i // K + 1},{i % K + 1}]"].append(flat[i])

    mpp = sums["gamma"] / kept
    with np.errstate(invalid="ignore", divide="ignore"):
        slab_mean = np.where(sums["gamma"] > 0, sums["omega"] / sums["gamma"], 0.0)
    traces = {k: np.asarray(v) for k, v in traces.items()}
    return PosteriorSummary(
        mpp=mpp, omega_mean=sums["omega"] / kept, omega_slab_mean=slab_mean,
        beta_mean=sums["beta"] / kept, zeta_mean=sums["zeta"] / kept,
        xi1_mean=sums["xi1"] / kept, xi0_mean=sums["xi0"] / kept,
        geweke={k: geweke_z(v) for k, v in traces.items()}, n_kept=kept, monitored=traces,
    )


def fit_gibbs(dataset: StudyDataset, prior: StructuralPrior | None = None,
              smoothing: SmoothingMatrix | None = None, hyper: Hyperparameters | None = None,
              config: ChainConfig | None = None) -> FitResult:
    """Run a chain and package it in the same shape as a variational fit."""
    hyper = hyper or Hyperparameters()
    config = config or ChainConfig()
    t0 = time.perf_counter()
    summ = run_chain(dataset, prior, smoothing, hyper, config)
    return FitResult(
        mpp=summ.mpp, omega_hat=summ.omega_slab_mean,
        selected=summ.mpp > hyper.selection_threshold,
        elbo_trace=[], entropy_trace=[], iterations=config.n_iters, converged=True,
        wall_time=time.perf_counter() - t0, seed=config.seed, R=dataset.R, L=dataset.lag,
        config={"hyperparameters": hyper.to_dict(),
                "chain": {"n_iters": config.n_iters, "burn_in": config.burn_in,
                          "thin": config.thin, "seed": config.seed},
                "structural_prior": prior is not None},
        backend="gibbs",
        extras={"geweke": summ.geweke, "posterior_mean_omega": summ.omega_mean.tolist(),
                "zeta_mean": summ.zeta_mean.tolist(), "xi1_mean": summ.xi1_mean.tolist(),
                "xi0_mean": summ.xi0_mean.tolist(), "n_kept": summ.n_kept},
        state=summ,
    )
