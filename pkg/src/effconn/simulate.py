"""Synthetic multi-group VAR studies with known group connectivity.

Three protocols are provided as presets:

* ``table1_config`` -- R=10, two groups of 10 subjects, T=400, hard-coded
  structural matrices;
* ``sensitivity_config`` -- R=30, imbalanced 20/60 split, T=150, random
  structural matrices with 400 weak entries;
* ``large_config`` -- R=90, 50/50 split, T=150, about 15% true edges.

``oracle_config`` is a three-region instance small enough for the Gibbs sampler.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import (StructuralPrior, StudyDataset, ValidationError, companion_radius,
                   n_coefficients, tile_over_lags, vec)

N1_R10 = np.array([
    [0.1, 0.3, 0.1, 0.6, 0.2, 0.1, 0.7, 0.3, 0.1, 0.4],
    [0.3, 0.5, 0.1, 0.1, 0.2, 0.1, 0.6, 0.1, 0.5, 0.15],
    [0.1, 0.1, 0.35, 0.65, 0.2, 0.7, 0.1, 0.6, 0.2, 0.4],
    [0.6, 0.1, 0.65, 0.3, 0.25, 0.1, 0.2, 0.15, 0.4, 0.3],
    [0.2, 0.2, 0.2, 0.25, 0.1, 0.85, 0.3, 0.25, 0.1, 0.15],
    [0.1, 0.1, 0.7, 0.1, 0.85, 0.5, 0.3, 0.1, 0.25, 0.2],
    [0.7, 0.6, 0.1, 0.2, 0.3, 0.3, 0.1, 0.05, 0.12, 0.3],
    [0.3, 0.1, 0.7, 0.15, 0.25, 0.1, 0.05, 0.25, 0.3, 0.15],
    [0.1, 0.5, 0.2, 0.4, 0.1, 0.25, 0.12, 0.3, 0.1, 0.3],
    [0.4, 0.15, 0.4, 0.3, 0.15, 0.2, 0.3, 0.15, 0.3, 0.2],
])

N2_R10 = np.array([
    [0.2, 0.5, 0.3, 0.1, 0.4, 0.5, 0.1, 0.2, 0.3, 0.1],
    [0.5, 0.3, 0.1, 0.3, 0.1, 0.1, 0.1, 0.15, 0.05, 0.3],
    [0.3, 0.1, 0.55, 0.15, 0.5, 0.5, 0.1, 0.5, 0.1, 0.4],
    [0.1, 0.3, 0.15, 0.1, 0.35, 0.3, 0.6, 0.1, 0.4, 0.5],
    [0.4, 0.1, 0.5, 0.35, 0.36, 0.1, 0.2, 0.1, 0.25, 0.05],
    [0.5, 0.1, 0.5, 0.3, 0.1, 0.1, 0.1, 0.2, 0.5, 0.15],
    [0.1, 0.1, 0.1, 0.6, 0.2, 0.1, 0.7, 0.25, 0.4, 0.2],
    [0.2, 0.15, 0.5, 0.1, 0.1, 0.2, 0.25, 0.25, 0.3, 0.15],
    [0.3, 0.05, 0.1, 0.4, 0.25, 0.5, 0.4, 0.3, 0.1, 0.25],
    [0.1, 0.3, 0.4, 0.5, 0.05, 0.15, 0.2, 0.15, 0.25, 0.3],
])

LAMBDA_R10 = np.array([-0.4, -0.25, -0.1, 0.05, 0.2, -0.3, 0.1, 0.1, -0.3, -0.15])

BURN_IN = 200
DIVERGENCE_BOUND = 1e6


@dataclass(frozen=True)
class SimulationConfig:
    R: int = 10
    T: int = 400
    group_sizes: tuple = (10, 10)
    L: int = 1
    structural_mode: str = "fixed_r10"      # or "random"
    weak_count: int = 400                   # random mode only
    logit_params: tuple = ((-2.5, 5.0), (-2.5, 5.0))
    omega_magnitude: tuple = (0.1, 0.45)
    lambda_diag: tuple | None = tuple(LAMBDA_R10)
    lambda_range: tuple = (-0.4, 0.3)       # used when lambda_diag is None
    noise_variance: float = 1.0
    stability_cap: float = 0.95

    def __post_init__(self):
        if any(s < 1 for s in self.group_sizes):
            raise ValidationError("every group needs at least one subject")
        lo, hi = self.lambda_range
        if not (-1 < lo <= hi < 1):
            raise ValidationError("lambda_range must lie inside (-1, 1)")
        if not 0 < self.stability_cap < 1:
            raise ValidationError("stability_cap must lie in (0, 1)")
        if len(self.logit_params) != len(self.group_sizes):
            raise ValidationError("one (alpha0, alpha1) pair per group required")
        if self.lambda_diag is not None and len(self.lambda_diag) != self.R:
            raise ValidationError("lambda_diag needs R entries")
        if self.structural_mode not in ("fixed_r10", "random"):
            raise ValidationError(f"unknown structural_mode {self.structural_mode!r}")
        if self.structural_mode == "fixed_r10" and self.R != 10:
            raise ValidationError("fixed_r10 structural mode requires R=10")

    @property
    def n(self) -> int:
        return int(sum(self.group_sizes))

    @property
    def G(self) -> int:
        return len(self.group_sizes)

    @property
    def K(self) -> int:
        return n_coefficients(self.R, self.L)

    def group_labels(self) -> np.ndarray:
        return np.repeat(np.arange(1, self.G + 1), self.group_sizes)


def table1_config(**kw) -> SimulationConfig:
    return replace(SimulationConfig(), **kw)


def sensitivity_config(**kw) -> SimulationConfig:
    base = SimulationConfig(R=30, T=150, group_sizes=(20, 60), structural_mode="random",
                            weak_count=400, lambda_diag=None, lambda_range=(-0.4, 0.3))
    return replace(base, **kw)


def large_config(**kw) -> SimulationConfig:
    # 3800 of the 4095 upper-triangular entries weak gives ~15% true edges
    base = SimulationConfig(R=90, T=150, group_sizes=(50, 50), structural_mode="random",
                            weak_count=3800, lambda_diag=None, lambda_range=(-0.4, 0.3))
    return replace(base, **kw)


def oracle_config(**kw) -> SimulationConfig:
    """Three regions, six subjects, strong well-separated group effects."""
    base = SimulationConfig(R=3, T=200, group_sizes=(3, 3), structural_mode="random",
                            weak_count=2, omega_magnitude=(0.3, 0.5), lambda_diag=None,
                            lambda_range=(-0.1, 0.1))
    return replace(base, **kw)


@dataclass
class GroundTruth:
    omega: np.ndarray          # (G, K)
    gamma: np.ndarray          # (G, K) bool
    subject_coefs: np.ndarray  # (n, K)
    structural: np.ndarray     # (G, K)
    structural_matrices: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma.astype(int).tolist(),
            "omega": self.omega.tolist(),
            "structural": self.structural.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(omega=np.asarray(d["omega"], float), gamma=np.asarray(d["gamma"]).astype(bool),
                   subject_coefs=np.asarray(d.get("subject_coefs", []), float),
                   structural=np.asarray(d["structural"], float))


def fixed_structural_r10() -> tuple[np.ndarray, np.ndarray]:
    """The two hard-coded 10-region structural matrices, vectorised."""
    return vec(N1_R10), vec(N2_R10)


def random_structural(R: int, rng: np.random.Generator, weak_count: int = 400,
                      low: float = 0.3, high: float = 0.7, weak_value: float = 0.1) -> np.ndarray:
    """Random symmetric structural matrix.

    The upper triangle (diagonal included) is filled with Uniform(low, high)
    draws, ``weak_count`` of them are reset to ``weak_value``, the matrix is
    symmetrised and its diagonal raised by 0.5 (capped at 1).
    """
    if R < 2:
        raise ValidationError("R must be at least 2")
    iu = np.triu_indices(R)
    n_upper = iu[0].size
    if weak_count > n_upper:
        raise ValidationError(f"weak_count={weak_count} exceeds {n_upper} upper-triangular entries")
    vals = rng.uniform(low, high, size=n_upper)
    vals[rng.choice(n_upper, size=weak_count, replace=False)] = weak_value
    N = np.zeros((R, R))
    N[iu] = vals
    N = N + np.triu(N, 1).T
    d = np.diag_indices(R)
    N[d] = np.minimum(N[d] + 0.5, 1.0)
    return N


def structural_matrices(config: SimulationConfig, rng: np.random.Generator) -> list[np.ndarray]:
    if config.structural_mode == "fixed_r10":
        return [(N1_R10 if g % 2 == 0 else N2_R10).copy() for g in range(config.G)]
    return [random_structural(config.R, rng, config.weak_count) for _ in range(config.G)]


def _stabilise(v: np.ndarray, R: int, L: int, cap: float) -> np.ndarray:
    for _ in range(100):
        rho = companion_radius(v, R, L)
        if rho < cap:
            return v
        v = v * (0.999 * cap / rho)
    raise RuntimeError("could not stabilise coefficients after 100 rescalings")


def sample_ground_truth(config: SimulationConfig, structural, rng: np.random.Generator) -> GroundTruth:
    """Draw group edges from the logit prior and group/subject coefficients."""
    R, L, K = config.R, config.L, config.K
    N = np.asarray(structural, dtype=float).reshape(config.G, K)
    lo, hi = config.omega_magnitude
    gamma = np.zeros((config.G, K), dtype=bool)
    omega = np.zeros((config.G, K))
    for g, (a0, a1) in enumerate(config.logit_params):
        gamma[g] = rng.random(K) < expit(a0 + a1 * N[g])
        mag = rng.uniform(lo, hi, size=K) * rng.choice([-1.0, 1.0], size=K)
        omega[g] = _stabilise(np.where(gamma[g], mag, 0.0), R, L, config.stability_cap)

    if config.lambda_diag is not None:
        lam = np.asarray(config.lambda_diag, float)
    else:
        lam = rng.uniform(*config.lambda_range, size=R)
    labels = config.group_labels()
    coefs = np.zeros((config.n, K))
    for s in range(config.n):
        A = subject_deviation(rng, lam)
        B = np.zeros((R * L, R))
        B[:R, :] = A
        coefs[s] = _stabilise(omega[labels[s] - 1] + vec(B), R, L, config.stability_cap)
    return GroundTruth(omega=omega, gamma=gamma, subject_coefs=coefs, structural=N)


def subject_deviation(rng: np.random.Generator, lam) -> np.ndarray:
    """Symmetric deviation Q' diag(lam) Q with Q orthogonal from a Gaussian QR."""
    lam = np.asarray(lam, dtype=float)
    Q, _ = np.linalg.qr(rng.standard_normal((lam.size, lam.size)))
    A = Q.T @ np.diag(lam) @ Q
    return 0.5 * (A + A.T)


def simulate_series(coefs: np.ndarray, R: int, L: int, T: int, rng: np.random.Generator,
                    noise_variance: float = 1.0, burn_in: int = BURN_IN) -> np.ndarray:
    """Forward-simulate one T x R x n tensor, one VAR(L) per row of ``coefs``."""
    from .data import lag_matrices
    n = coefs.shape[0]
    Phi = np.stack([lag_matrices(c, R, L) for c in coefs])  # (n, L, R, R)
    total = T + burn_in
    x = np.zeros((total + L, n, R))
    noise = rng.standard_normal((total, n, R)) * np.sqrt(noise_variance)
    for t in range(L, total + L):
        acc = noise[t - L].copy()
        for l in range(L):
            acc += np.einsum("sij,sj->si", Phi[:, l], x[t - l - 1])
        if np.any(np.abs(acc) > DIVERGENCE_BOUND):
            raise RuntimeError("unstable coefficients")
        x[t] = acc
    return np.transpose(x[L + burn_in:], (0, 2, 1))


def simulate_dataset(config: SimulationConfig, truth: GroundTruth, rng: np.random.Generator) -> StudyDataset:
    x = simulate_series(truth.subject_coefs, config.R, config.L, config.T, rng, config.noise_variance)
    return StudyDataset(series=x, group_labels=config.group_labels(), n_groups=config.G, lag=config.L)


def replicate_rng(master_seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, replicate])


def generate(config: SimulationConfig, rng: np.random.Generator):
    """Structural prior, ground truth and dataset for one replicate."""
    mats = structural_matrices(config, rng)
    N = np.stack([tile_over_lags(M, config.L) for M in mats])
    truth = sample_ground_truth(config, N, rng)
    truth.structural_matrices = mats
    data = simulate_dataset(config, truth, rng)
    return data, truth, StructuralPrior(N)
