"""Covariance kernels on a per-iteration time grid.

Kernels are evaluated at integer timestep indices 1..p (unit spacing), which
is the natural grid for error trajectories sampled once per control step.
The module also provides the two projections used when turning an empirical
residual covariance into a valid stationary kernel: diagonal averaging onto
the symmetric-Toeplitz set and spectral truncation onto the PSD cone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz
from scipy.optimize import minimize

from .errors import ConfigError, ParameterError, ShapeError

SYM_TOL = 1e-10
PSD_TOL = 1e-10


def _as_square(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {M.shape}")
    return M


def is_stationary(M: np.ndarray, tol: float = SYM_TOL) -> bool:
    """True when every diagonal of ``M`` is constant (Toeplitz structure)."""
    M = _as_square(M)
    p = M.shape[0]
    for d in range(p):
        diag = np.diagonal(M, offset=d)
        if diag.size and np.ptp(diag) > tol * max(1.0, abs(diag[0])):
            return False
        lower = np.diagonal(M, offset=-d)
        if lower.size and np.ptp(lower) > tol * max(1.0, abs(lower[0])):
            return False
    return True


@dataclass(frozen=True)
class CovKernel:
    """A p-by-p covariance matrix over one iteration's timesteps.

    Invariants are enforced at construction: symmetry, positive
    semidefiniteness up to a small numerical tolerance, and (when
    ``stationary_flag`` is set) constant diagonals.
    """

    values: np.ndarray
    stationary_flag: bool = False

    def __post_init__(self):
        values = _as_square(self.values, "covariance")
        if not np.allclose(values, values.T, atol=SYM_TOL, rtol=0.0):
            raise ShapeError("covariance matrix must be symmetric")
        values = 0.5 * (values + values.T)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        min_eig = float(np.linalg.eigvalsh(values)[0])
        scale = max(1.0, float(np.trace(values)) / values.shape[0])
        if min_eig < -PSD_TOL * scale:
            raise ParameterError(
                f"covariance matrix is not PSD (min eigenvalue {min_eig:.3e})"
            )
        if self.stationary_flag and not is_stationary(values):
            raise ParameterError("stationary_flag set but diagonals are not constant")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None) -> np.ndarray:
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class KernelFamily:
    """A parametric kernel family: kind, variance, and shape parameters.

    params holds the lengthscale for 'rbf' (one or more, one per input
    dimension), (lengthscale, period) for 'periodic', and is empty for
    'general' (a data-driven kernel with no parametric form).
    """

    kind: str
    variance: float = 1.0
    params: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("rbf", "periodic", "general"):
            raise ParameterError(f"unknown kernel kind {self.kind!r}")
        if self.variance <= 0:
            raise ParameterError("variance must be positive")
        params = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", params)
        if self.kind == "rbf" and (len(params) < 1 or any(v <= 0 for v in params)):
            raise ParameterError("rbf kernel needs positive lengthscale(s)")
        if self.kind == "periodic":
            if len(params) != 2 or params[0] <= 0 or params[1] <= 0:
                raise ParameterError("periodic kernel needs positive (lengthscale, period)")


def eval_rbf(t, t2, variance: float, lengthscale: float):
    """Squared-exponential kernel  sigma^2 exp(-(t - t2)^2 / (2 l^2))."""
    if variance <= 0 or lengthscale <= 0:
        raise ParameterError("variance and lengthscale must be positive")
    d = np.asarray(t, dtype=float) - np.asarray(t2, dtype=float)
    return variance * np.exp(-0.5 * (d / lengthscale) ** 2)


def eval_periodic(t, t2, variance: float, lengthscale: float, period: float):
    """Periodic kernel  sigma^2 exp(-2 sin^2(pi (t - t2) / T) / l^2)."""
    if variance <= 0 or lengthscale <= 0 or period <= 0:
        raise ParameterError("variance, lengthscale and period must be positive")
    d = np.asarray(t, dtype=float) - np.asarray(t2, dtype=float)
    s = np.sin(np.pi * d / period)
    return variance * np.exp(-2.0 * (s / lengthscale) ** 2)


def build_cov_matrix(family: KernelFamily, p: int) -> CovKernel:
    """Evaluate ``family`` on the integer grid 1..p.

    The grid is uniform, so rbf and periodic kernels yield stationary
    (Toeplitz) matrices.
    """
    if p < 1:
        raise ParameterError("p must be >= 1")
    if family.kind == "general":
        raise ConfigError("'general' has no closed form; supply the matrix directly")
    idx = np.arange(1, p + 1, dtype=float)
    tt, ss = np.meshgrid(idx, idx, indexing="ij")
    if family.kind == "rbf":
        values = eval_rbf(tt, ss, family.variance, family.params[0])
    else:
        ell, period = family.params
        values = eval_periodic(tt, ss, family.variance, ell, period)
    return CovKernel(values=values, stationary_flag=True)


def toeplitz_project(M: np.ndarray) -> np.ndarray:
    """Frobenius-nearest symmetric Toeplitz matrix to ``M``.

    Entry at lag d is the mean of all entries of M at offsets +d and -d
    pooled, which is the orthogonal projection onto the symmetric-Toeplitz
    subspace.
    """
    M = _as_square(M)
    p = M.shape[0]
    lags = np.empty(p)
    for d in range(p):
        upper = np.diagonal(M, offset=d)
        if d == 0:
            lags[d] = upper.mean()
        else:
            lower = np.diagonal(M, offset=-d)
            lags[d] = np.concatenate([upper, lower]).mean()
    return toeplitz(lags)


def default_psd_floor(M: np.ndarray) -> float:
    """Scale-relative eigenvalue floor: 1e-8 times the mean diagonal."""
    M = _as_square(M)
    return 1e-8 * max(float(np.trace(M)) / M.shape[0], np.finfo(float).tiny)


def psd_truncate(M: np.ndarray, floor: float | None = None) -> CovKernel:
    """Clip eigenvalues of a symmetric matrix at ``floor`` and reconstruct.

    Returns a CovKernel whose minimum eigenvalue is >= floor. The default
    floor is scale-relative (see default_psd_floor), which keeps subsequent
    conditional solves well-posed.
    """
    M = _as_square(M)
    if not np.allclose(M, M.T, atol=SYM_TOL, rtol=0.0):
        raise ShapeError("psd_truncate expects a symmetric matrix")
    if floor is None:
        floor = default_psd_floor(M)
    if floor < 0:
        raise ParameterError("floor must be non-negative")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    w = np.maximum(w, floor)
    out = (V * w) @ V.T
    out = 0.5 * (out + out.T)
    return CovKernel(values=out, stationary_flag=is_stationary(out))


_DEFAULT_BOXES = {
    # (variance, lengthscale[, period]) bounds; period bounds are scaled by p.
    "rbf": ((1e-6, 1e4), (0.05, 1e3)),
    "periodic": ((1e-6, 1e4), (0.05, 1e2), (0.5, 2.0)),
}


def frobenius_fit(
    K_tilde: np.ndarray,
    kind: str,
    box: tuple | None = None,
    n_starts: int = 8,
    seed: int = 0,
) -> KernelFamily:
    """Fit kernel hyperparameters by Frobenius distance to ``K_tilde``.

    Minimizes ||K_tilde - K(sigma^2, theta)||_F over a bounded box with
    multi-start Nelder-Mead in log-parameter space (the objective is cheap
    and 2-3 dimensional, so derivative-free local search suffices). The
    returned objective is never worse than at any multi-start initial point.
    """
    K_tilde = _as_square(K_tilde, "target")
    if not np.allclose(K_tilde, K_tilde.T, atol=SYM_TOL, rtol=0.0):
        raise ShapeError("frobenius_fit expects a symmetric target")
    if kind == "general":
        raise ConfigError("'general' kernels have no hyperparameters to fit")
    if kind not in _DEFAULT_BOXES:
        raise ParameterError(f"unknown kernel kind {kind!r}")
    p = K_tilde.shape[0]
    if box is None:
        box = _DEFAULT_BOXES[kind]
        if kind == "periodic":
            box = (box[0], box[1], (box[2][0] * p, box[2][1] * p))
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    if any(lo >= hi or lo <= 0 for lo, hi in box):
        raise ConfigError("parameter box must have 0 < lower < upper per axis")

    idx = np.arange(1, p + 1, dtype=float)
    tt, ss = np.meshgrid(idx, idx, indexing="ij")

    def model(params):
        if kind == "rbf":
            return eval_rbf(tt, ss, params[0], params[1])
        return eval_periodic(tt, ss, params[0], params[1], params[2])

    def objective(log_params):
        return float(np.linalg.norm(K_tilde - model(np.exp(log_params))))

    log_box = np.log(np.asarray(box))
    rng = np.random.default_rng(seed)
    starts = rng.uniform(log_box[:, 0], log_box[:, 1], size=(n_starts, len(box)))
    best_x, best_f = None, np.inf
    for x0 in starts:
        res = minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=log_box,
            options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 2000},
        )
        f = min(res.fun, objective(x0))
        x = res.x if res.fun <= objective(x0) else x0
        if f < best_f:
            best_x, best_f = x, f
    params = np.exp(best_x)
    if kind == "rbf":
        return KernelFamily(kind="rbf", variance=params[0], params=(params[1],))
    return KernelFamily(kind="periodic", variance=params[0], params=(params[1], params[2]))
