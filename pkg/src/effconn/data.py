"""Study data containers, centering, lagged designs and the coefficient index.

Coefficients of one subject form an ``RL x R`` matrix ``B`` whose rows are
(lag, source) pairs in lag-major order and whose columns are target regions.
The flat layout used everywhere is ``vec(B)``, i.e. column stacking, so the
0-based flat index of (lag, source, target) is::

    k = target * R * L + lag * R + source

The public ``flat_index``/``triple`` helpers use 1-based arguments, matching
how edges are reported to users.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when study inputs are malformed."""


# -- index algebra -----------------------------------------------------------

def n_coefficients(R: int, L: int) -> int:
    return L * R * R


def flat_index(lag: int, source: int, target: int, R: int, L: int) -> int:
    """Map a 1-based (lag, source, target) triple to the 1-based flat index."""
    for name, v, hi in (("lag", lag, L), ("source", source, R), ("target", target, R)):
        if not 1 <= v <= hi:
            raise ValidationError(f"{name}={v} out of range 1..{hi}")
    return (target - 1) * R * L + (lag - 1) * R + (source - 1) + 1


def triple(k: int, R: int, L: int) -> tuple[int, int, int]:
    """Inverse of :func:`flat_index`."""
    K = n_coefficients(R, L)
    if not 1 <= k <= K:
        raise ValidationError(f"k={k} out of range 1..{K}")
    k0 = k - 1
    target, rem = divmod(k0, R * L)
    lag, source = divmod(rem, R)
    return lag + 1, source + 1, target + 1


def index_table(R: int, L: int) -> np.ndarray:
    """(K, 3) array of 0-based (lag, source, target) for every flat index."""
    k = np.arange(n_coefficients(R, L))
    target, rem = np.divmod(k, R * L)
    lag, source = np.divmod(rem, R)
    return np.stack([lag, source, target], axis=1)


def vec(B: np.ndarray) -> np.ndarray:
    """Column-stack an ``RL x R`` coefficient matrix."""
    return np.asarray(B).reshape(-1, order="F")


def unvec(v: np.ndarray, R: int, L: int) -> np.ndarray:
    return np.asarray(v).reshape(R * L, R, order="F")


def lag_matrices(v: np.ndarray, R: int, L: int) -> np.ndarray:
    """VAR transition matrices ``Phi[l]`` with ``x_t = sum_l Phi[l] x_{t-l}``.

    ``Phi[l][target, source]`` equals the coefficient at (l, source, target).
    """
    B = unvec(v, R, L)
    return np.stack([B[l * R:(l + 1) * R, :].T for l in range(L)])


def from_lag_matrices(Phi: np.ndarray) -> np.ndarray:
    Phi = np.asarray(Phi)
    B = np.concatenate([P.T for P in Phi], axis=0)
    return vec(B)


def tile_over_lags(M: np.ndarray, L: int) -> np.ndarray:
    """Vectorise an ``R x R`` (source, target) matrix, repeated for each lag."""
    M = np.asarray(M, dtype=float)
    R = M.shape[0]
    B = np.zeros((R * L, R))
    for l in range(L):
        B[l * R:(l + 1) * R, :] = M
    return vec(B)


def companion_radius(v: np.ndarray, R: int, L: int) -> float:
    """Spectral radius of the VAR companion matrix."""
    Phi = lag_matrices(v, R, L)
    top = np.concatenate(list(Phi), axis=1)
    if L == 1:
        C = top
    else:
        C = np.zeros((R * L, R * L))
        C[:R] = top
        C[R:, :-R] = np.eye(R * (L - 1))
    return float(np.max(np.abs(np.linalg.eigvals(C))))


# -- containers --------------------------------------------------------------

def center(series: np.ndarray) -> np.ndarray:
    """Subtract the time mean of every (region, subject) column of a T x R x n tensor."""
    x = np.asarray(series, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValidationError(f"expected a T x R x n tensor, got shape {x.shape}")
    bad = ~np.isfinite(x)
    if bad.any():
        t, r, s = np.argwhere(bad)[0]
        raise ValidationError(
            f"non-finite value in subject {s + 1}, region {r + 1} (time {t + 1})")
    return x - x.mean(axis=0, keepdims=True)


@dataclass(frozen=True)
class StudyDataset:
    series: np.ndarray
    group_labels: np.ndarray
    n_groups: int
    lag: int = 1
    roi_names: list[str] | None = None

    def __post_init__(self):
        x = np.asarray(self.series, dtype=float)
        if x.ndim != 3:
            raise ValidationError(f"series must be T x R x n, got shape {x.shape}")
        T, R, n = x.shape
        labels = np.asarray(self.group_labels, dtype=int).ravel()
        if self.lag < 1:
            raise ValidationError("lag must be a positive integer")
        if T <= self.lag:
            raise ValidationError("insufficient time points for lag")
        if R < 2:
            raise ValidationError("need at least two regions")
        if labels.size != n:
            raise ValidationError(f"{labels.size} group labels for {n} subjects")
        if self.n_groups < 1 or labels.min() < 1 or labels.max() > self.n_groups:
            raise ValidationError(f"group labels must lie in 1..{self.n_groups}")
        missing = set(range(1, self.n_groups + 1)) - set(labels.tolist())
        if missing:
            raise ValidationError(f"groups without subjects: {sorted(missing)}")
        names = self.roi_names or [f"ROI_{i + 1}" for i in range(R)]
        if len(names) != R:
            raise ValidationError(f"{len(names)} ROI names for {R} regions")
        x = center(x)
        x.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "series", x)
        object.__setattr__(self, "group_labels", labels)
        object.__setattr__(self, "roi_names", list(names))

    @property
    def T(self) -> int:
        return self.series.shape[0]

    @property
    def R(self) -> int:
        return self.series.shape[1]

    @property
    def n(self) -> int:
        return self.series.shape[2]

    @property
    def K(self) -> int:
        return n_coefficients(self.R, self.lag)

    def group_members(self, g: int) -> np.ndarray:
        """0-based subject indices of 1-based group ``g``."""
        return np.flatnonzero(self.group_labels == g)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_labels, minlength=self.n_groups + 1)[1:]


@dataclass(frozen=True)
class LaggedDesign:
    """Per-subject responses ``X[s]`` ((T-L) x R) and lagged design ``U[s]`` ((T-L) x RL)."""
    X: np.ndarray
    U: np.ndarray

    @property
    def gram(self) -> np.ndarray:
        """``U[s]' U[s]`` for every subject, shape (n, RL, RL)."""
        return np.einsum("sti,stj->sij", self.U, self.U)

    @property
    def cross(self) -> np.ndarray:
        """``U[s]' X[s]`` for every subject, shape (n, RL, R)."""
        return np.einsum("sti,stj->sij", self.U, self.X)


def build_lagged_design(dataset: StudyDataset) -> LaggedDesign:
    x = dataset.series
    T, R, n = x.shape
    L = dataset.lag
    if T <= L:
        raise ValidationError("insufficient time points for lag")
    X = np.transpose(x[L:], (2, 0, 1)).copy()
    U = np.concatenate([np.transpose(x[L - l:T - l], (2, 0, 1)) for l in range(1, L + 1)], axis=2)
    return LaggedDesign(X=X, U=U)


@dataclass(frozen=True)
class StructuralPrior:
    """Per-group external connectivity vectors of length L*R^2."""
    vectors: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("structural prior entries must be finite and >= 0")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    def check(self, n_groups: int, K: int):
        if self.vectors.shape != (n_groups, K):
            raise ValidationError(
                f"structural prior must hold {n_groups} vectors of length {K} (L*R^2), "
                f"got shape {self.vectors.shape}")

    @classmethod
    def from_matrices(cls, mats, L: int = 1) -> "StructuralPrior":
        return cls(np.stack([tile_over_lags(M, L) for M in mats]))


@dataclass(frozen=True)
class SmoothingMatrix:
    """Symmetric binary neighbourhood matrix for the ICAR slab."""
    S: np.ndarray
    row_sums: np.ndarray = field(init=False)

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValidationError(f"smoothing matrix must be square, got {S.shape}")
        if not np.array_equal(S, S.T):
            raise ValidationError("smoothing matrix must be symmetric")
        if not np.all((S == 0) | (S == 1)):
            raise ValidationError("smoothing matrix entries must be 0 or 1")
        rs = S.sum(axis=1)
        if np.any(rs < 1):
            raise ValidationError("every smoothing row needs at least one neighbour")
        S.setflags(write=False)
        rs.setflags(write=False)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "row_sums", rs)

    @classmethod
    def identity(cls, K: int) -> "SmoothingMatrix":
        return cls(np.eye(K))

    @property
    def is_diagonal(self) -> bool:
        return not np.any(self.S - np.diag(np.diag(self.S)))

    def check(self, K: int):
        if self.S.shape != (K, K):
            raise ValidationError(f"smoothing matrix must be {K} x {K}, got {self.S.shape}")


def same_source_smoothing(R: int, L: int) -> SmoothingMatrix:
    """Neighbours are coefficients at the same lag leaving the same source region."""
    idx = index_table(R, L)
    same = (idx[:, None, 0] == idx[None, :, 0]) & (idx[:, None, 1] == idx[None, :, 1])
    return SmoothingMatrix(same.astype(float))
