"""Quasi-periodic Gaussian-process error model.

Per output dimension j the lifted error block evolves as a first-order
block autoregression

    x_{i+1} = omega_j x_i + eps_{i+1},      eps ~ N(0, K_j)  i.i.d.,

with |omega_j| < 1 and x_1 drawn from the stationary distribution
N(0, K_j / (1 - omega_j^2)). This module provides exact next-block
prediction (block and element-wise), the triangular predictor matrices used
for closed-loop analysis, the two-stage parameter estimator, and a dense
brute-force conditional mean that serves as the validation oracle for all
prediction paths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import (
    InsufficientDataError,
    NumericalError,
    ParameterError,
    ShapeError,
)
from .kernels import (
    CovKernel,
    build_cov_matrix,
    frobenius_fit,
    is_stationary,
    psd_truncate,
    toeplitz_project,
)

OMEGA_CLIP = 0.999
BRUTE_FORCE_GUARD = 5000


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class QpgpModel:
    """Parameters of the quasi-periodic GP: coupling omega_j and noise kernels.

    ``raw_covariances`` optionally carries the unprojected stage-1 covariance
    estimates so a later re-estimation can warm-start from the actual
    alternating-minimization fixed point; it is in-session state and is not
    serialized.
    """

    omega: np.ndarray
    kernels: tuple[CovKernel, ...]
    raw_covariances: tuple | None = None

    def __post_init__(self):
        omega = _readonly(np.atleast_1d(self.omega))
        if omega.ndim != 1:
            raise ShapeError("omega must be a vector")
        if np.any(np.abs(omega) >= 1.0):
            raise ParameterError("|omega_j| < 1 is required (strict)")
        kernels = tuple(self.kernels)
        if len(kernels) != omega.size:
            raise ShapeError("need one kernel per output dimension")
        sizes = {k.size for k in kernels}
        if len(sizes) != 1:
            raise ShapeError("all kernels must share the same size p")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "kernels", kernels)
        if self.raw_covariances is not None:
            raw = tuple(_readonly(c) for c in self.raw_covariances)
            if len(raw) != omega.size:
                raise ShapeError("need one raw covariance per output dimension")
            object.__setattr__(self, "raw_covariances", raw)
        object.__setattr__(self, "_chol_cache", {})

    @property
    def n(self) -> int:
        return self.omega.size

    @property
    def p(self) -> int:
        return self.kernels[0].size

    def chol(self, j: int) -> np.ndarray:
        """Cholesky factor of K_j; leading submatrices factor leading blocks."""
        cache = self._chol_cache
        if j not in cache:
            try:
                cache[j] = np.linalg.cholesky(self.kernels[j].values)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(
                    "kernel covariance is singular; re-estimate with a larger "
                    "psd floor"
                ) from exc
        return cache[j]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "omega": self.omega.tolist(),
            "kernels": [k.values.reshape(-1).tolist() for k in self.kernels],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "QpgpModel":
        n, p = int(doc["n"]), int(doc["p"])
        omega = np.asarray(doc["omega"], dtype=float)
        if omega.size != n or len(doc["kernels"]) != n:
            raise ShapeError("inconsistent model document")
        kernels = []
        for flat in doc["kernels"]:
            values = np.asarray(flat, dtype=float).reshape(p, p)
            kernels.append(CovKernel(values=values, stationary_flag=is_stationary(values)))
        return cls(omega=omega, kernels=tuple(kernels))

    @classmethod
    def from_json(cls, text: str) -> "QpgpModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "QpgpModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class _LagStats:
    """Sufficient statistics for the reduced likelihood, per dimension.

    c00 = sum_{k>=2} e_{k-1} e_{k-1}^T,  d = sum e_k e_{k-1}^T,
    c11 = sum e_k e_k^T; all shaped (n, p, p). Maintained incrementally so
    re-estimation cost does not grow with the number of stored iterations.
    """

    c00: np.ndarray
    d: np.ndarray
    c11: np.ndarray
    pairs: int


class ErrorHistory:
    """Ordered per-iteration error blocks, each an (n, p) array.

    Instances are treated as immutable: ``append`` returns a new history
    sharing existing blocks and incrementally updated lag statistics.
    """

    def __init__(self, blocks, _stats: _LagStats | None = None):
        blocks = [_readonly(np.atleast_2d(b)) for b in blocks]
        if not blocks:
            raise ShapeError("history must contain at least one block")
        shape = blocks[0].shape
        if any(b.shape != shape for b in blocks):
            raise ShapeError("all error blocks must share the same (n, p) shape")
        self._blocks = blocks
        self._stats = _stats

    @property
    def n(self) -> int:
        return self._blocks[0].shape[0]

    @property
    def p(self) -> int:
        return self._blocks[0].shape[1]

    def __len__(self) -> int:
        return len(self._blocks)

    def __getitem__(self, k) -> np.ndarray:
        return self._blocks[k]

    @property
    def blocks(self) -> tuple[np.ndarray, ...]:
        return tuple(self._blocks)

    @property
    def last(self) -> np.ndarray:
        return self._blocks[-1]

    def append(self, block: np.ndarray) -> "ErrorHistory":
        block = _readonly(np.atleast_2d(block))
        if block.shape != self._blocks[0].shape:
            raise ShapeError("appended block has mismatched shape")
        stats = None
        if self._stats is not None:
            prev = self._blocks[-1]
            stats = _LagStats(
                c00=self._stats.c00 + np.einsum("ja,jb->jab", prev, prev),
                d=self._stats.d + np.einsum("ja,jb->jab", block, prev),
                c11=self._stats.c11 + np.einsum("ja,jb->jab", block, block),
                pairs=self._stats.pairs + 1,
            )
        return ErrorHistory(self._blocks + [block], _stats=stats)

    def lag_stats(self) -> _LagStats:
        if self._stats is None:
            n, p = self.n, self.p
            c00 = np.zeros((n, p, p))
            d = np.zeros((n, p, p))
            c11 = np.zeros((n, p, p))
            for prev, cur in zip(self._blocks[:-1], self._blocks[1:]):
                c00 += np.einsum("ja,jb->jab", prev, prev)
                d += np.einsum("ja,jb->jab", cur, prev)
                c11 += np.einsum("ja,jb->jab", cur, cur)
            self._stats = _LagStats(c00=c00, d=d, c11=c11, pairs=len(self._blocks) - 1)
        return self._stats


def sample_trajectory(model: QpgpModel, iterations: int, seed: int) -> ErrorHistory:
    """Draw ``iterations`` consecutive blocks from the structural equation.

    The first block comes from the stationary distribution, so the sampled
    sequence is stationary with block covariance K_j / (1 - omega_j^2).
    """
    if iterations < 1:
        raise ParameterError("iterations must be >= 1")
    n, p = model.n, model.p
    rng = np.random.default_rng(seed)
    factors = []
    for k in model.kernels:
        w, V = np.linalg.eigh(k.values)
        factors.append(V * np.sqrt(np.clip(w, 0.0, None)))

    def draw_noise():
        z = rng.standard_normal((n, p))
        return np.stack([factors[j] @ z[j] for j in range(n)])

    scale = 1.0 / np.sqrt(1.0 - model.omega**2)
    blocks = [draw_noise() * scale[:, None]]
    for _ in range(iterations - 1):
        blocks.append(model.omega[:, None] * blocks[-1] + draw_noise())
    return ErrorHistory(blocks)


def _check_block(model: QpgpModel, e_prev: np.ndarray) -> np.ndarray:
    e_prev = np.atleast_2d(np.asarray(e_prev, dtype=float))
    if e_prev.shape != (model.n, model.p):
        raise ShapeError(
            f"error block shape {e_prev.shape} does not match model ({model.n}, {model.p})"
        )
    return e_prev


def block_predict(model: QpgpModel, e_prev: np.ndarray) -> np.ndarray:
    """Next-block conditional mean given all past blocks: omega_j * e_prev_j."""
    e_prev = _check_block(model, e_prev)
    return model.omega[:, None] * e_prev


def element_predict(model, e_prev, prefix, j: int, t: int) -> float:
    """Conditional mean of element t of the next block, dimension j.

    Conditions on all past blocks plus the first t-1 elements of the next
    block already observed (``prefix``). The cross-covariance is row t of
    K_j restricted to columns 1..t-1, which is what the conditional mean of
    a general stationary kernel requires; for t = 1 the correction vanishes
    and the prediction is omega_j * e_prev_j(1).
    """
    e_prev = _check_block(model, e_prev)
    if not 1 <= t <= model.p:
        raise ParameterError(f"t must be in 1..{model.p}")
    prefix = np.asarray(prefix, dtype=float).reshape(-1)
    if prefix.size != t - 1:
        raise ShapeError(f"prefix must have length t-1 = {t - 1}, got {prefix.size}")
    omega = model.omega[j]
    base = omega * e_prev[j, t - 1]
    if t == 1:
        return float(base)
    L = model.chol(j)[: t - 1, : t - 1]
    resid = prefix - omega * e_prev[j, : t - 1]
    y = solve_triangular(L, resid, lower=True, check_finite=False)
    w = solve_triangular(L.T, y, lower=False, check_finite=False)
    c = model.kernels[j].values[t - 1, : t - 1]
    return float(base + c @ w)


def element_predict_remainder(model, e_prev, prefix, j: int) -> np.ndarray:
    """Conditional mean of all remaining elements given the observed prefix.

    Equivalent to calling element_predict once per remaining index with the
    same prefix (plus sequential substitution for later elements collapses
    to this single joint conditional mean); one solve serves the whole
    remainder, keeping the per-iteration online cost at O(p^3).
    """
    e_prev = _check_block(model, e_prev)
    prefix = np.asarray(prefix, dtype=float).reshape(-1)
    t0 = prefix.size  # number of observed elements
    p = model.p
    if t0 >= p:
        raise ShapeError("prefix must leave at least one element to predict")
    omega = model.omega[j]
    base = omega * e_prev[j, t0:]
    if t0 == 0:
        return base
    L = model.chol(j)[:t0, :t0]
    resid = prefix - omega * e_prev[j, :t0]
    y = solve_triangular(L, resid, lower=True, check_finite=False)
    w = solve_triangular(L.T, y, lower=False, check_finite=False)
    C = model.kernels[j].values[t0:, :t0]
    return base + C @ w


def predictor_matrix(model: QpgpModel, t: int, j: int) -> np.ndarray:
    """Lower-triangular matrix M^(t) with  e_hat^(t) = M^(t) e_prev^(t).

    This is the analysis-mode (offline) form of sequential prediction in
    which each element's prefix is replaced by its own prediction. Built by
    the recursion  M^(1) = omega,
    M^(t) = [[M^(t-1), 0], [c_t^T K_{t-1}^{-1} (M^(t-1) - omega I), omega]].
    """
    if not 1 <= t <= model.p:
        raise ParameterError(f"t must be in 1..{model.p}")
    omega = model.omega[j]
    K = model.kernels[j].values
    L = model.chol(j)
    M = np.zeros((t, t))
    M[0, 0] = omega
    for s in range(2, t + 1):
        c = K[s - 1, : s - 1]
        Ls = L[: s - 1, : s - 1]
        y = solve_triangular(Ls, c, lower=True, check_finite=False)
        v = solve_triangular(Ls.T, y, lower=False, check_finite=False)
        M[s - 1, : s - 1] = v @ (M[: s - 1, : s - 1] - omega * np.eye(s - 1))
        M[s - 1, s - 1] = omega
    return M


@dataclass(frozen=True)
class Stage1Result:
    """Alternating-minimization output: coupling, raw covariance, diagnostics."""

    omega: float
    cov: np.ndarray
    iterations: int
    objectives: np.ndarray = field(repr=False, default=None)


def _reduced_nll(omega, K, c00, d, c11, pairs) -> float:
    # -log-likelihood of residuals e_k - omega e_{k-1}, k = 2..i, up to const.
    R = c11 - omega * (d + d.T) + omega**2 * c00
    p = K.shape[0]
    scale = max(float(np.trace(K)) / p, np.finfo(float).tiny)
    try:
        L = np.linalg.cholesky(K + 1e-10 * scale * np.eye(p))
    except np.linalg.LinAlgError:
        K = psd_truncate(K).values
        L = np.linalg.cholesky(K)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    Kinv_R = cho_solve((L, True), R, check_finite=False)
    p = K.shape[0]
    return 0.5 * (pairs * (logdet + p * np.log(2.0 * np.pi)) + float(np.trace(Kinv_R)))


def estimate_stage1(
    history: ErrorHistory,
    j: int,
    warm: tuple[float, np.ndarray] | None = None,
    tol: float = 1e-6,
    max_iterations: int = 100,
) -> Stage1Result:
    """Stage I: alternating minimization of the reduced likelihood.

    Alternates an exact weighted-regression step for omega with the
    residual maximum-likelihood covariance step; both are coordinate
    minimizers, so the objective is non-increasing. omega is clipped to
    (-0.999, 0.999). Requires at least two blocks.
    """
    if len(history) < 2:
        raise InsufficientDataError("stage-1 estimation needs at least 2 blocks")
    stats = history.lag_stats()
    c00, d, c11 = stats.c00[j], stats.d[j], stats.c11[j]
    pairs = stats.pairs
    p = history.p

    if warm is not None:
        omega = float(np.clip(warm[0], -OMEGA_CLIP, OMEGA_CLIP))
        K = np.array(np.asarray(warm[1], dtype=float))
    else:
        omega, K = 0.0, np.eye(p)

    objectives = []
    ridge = 1e-8 * np.eye(p)
    for it in range(1, max_iterations + 1):
        # The omega step is invariant to the scale of K; normalizing keeps the
        # solve well-posed even when residuals have collapsed to zero. A
        # deterministic ridge handles the rank-deficient case (fewer block
        # pairs than p) smoothly, so the alternation map has a true fixed
        # point; psd_truncate remains the fallback for anything worse.
        scale = float(np.trace(K)) / p
        Kn = K / scale + ridge if scale > 0 and np.isfinite(scale) else np.eye(p)
        try:
            L = np.linalg.cholesky(Kn)
        except np.linalg.LinAlgError:
            Kn = psd_truncate(Kn).values
            L = np.linalg.cholesky(Kn)
        Kinv_d = cho_solve((L, True), d, check_finite=False)
        Kinv_c00 = cho_solve((L, True), c00, check_finite=False)
        denom = float(np.trace(Kinv_c00))
        omega_new = float(np.trace(Kinv_d)) / denom if denom > 0 else 0.0
        omega_new = float(np.clip(omega_new, -OMEGA_CLIP, OMEGA_CLIP))
        K_new = (c11 - omega_new * (d + d.T) + omega_new**2 * c00) / pairs
        K_new = 0.5 * (K_new + K_new.T)
        objectives.append(_reduced_nll(omega_new, K_new, c00, d, c11, pairs))
        norm_old, norm_new = np.linalg.norm(K), np.linalg.norm(K_new)
        converged = (
            abs(omega_new - omega) <= tol * max(1.0, abs(omega))
            and abs(norm_new - norm_old) <= tol * max(1.0, norm_old)
        )
        omega, K = omega_new, K_new
        if converged:
            break
    return Stage1Result(
        omega=omega, cov=K, iterations=it, objectives=np.asarray(objectives)
    )


def estimate_stage2(K_tilde: np.ndarray, floor: float | None = None) -> CovKernel:
    """Stage II: diagonal averaging to stationarity, then spectral truncation."""
    return psd_truncate(toeplitz_project(K_tilde), floor)


def update_estimates(
    history: ErrorHistory,
    previous: QpgpModel | None = None,
    kernel_mode: str = "general",
    psd_floor_scale: float = 1e-8,
    return_info: bool = False,
):
    """Re-estimate the full model from the error history.

    Runs stage 1 (warm-started from ``previous`` when given) and stage 2 per
    output dimension. ``kernel_mode`` is 'general' (keep the projected
    kernel) or 'parametric:rbf' / 'parametric:periodic' (replace it with the
    Frobenius-fit parametric reconstruction). ``psd_floor_scale`` sets the
    stage-2 eigenvalue floor relative to the mean kernel diagonal; raise it
    when downstream conditional solves (element-wise prediction) amplify
    estimation noise. Cost per call is O(p^3) per dimension thanks to the
    history's incremental lag statistics.
    """
    if kernel_mode not in ("general", "parametric:rbf", "parametric:periodic"):
        raise ParameterError(f"unknown kernel_mode {kernel_mode!r}")
    n, p = history.n, history.p
    omegas = np.empty(n)
    kernels = []
    raw_covs = []
    infos = []
    for j in range(n):
        warm = None
        if previous is not None:
            prev_cov = (
                previous.raw_covariances[j]
                if previous.raw_covariances is not None
                else previous.kernels[j].values
            )
            warm = (previous.omega[j], prev_cov)
        res = estimate_stage1(history, j, warm=warm)
        infos.append(res)
        omegas[j] = res.omega
        raw_covs.append(res.cov)
        if kernel_mode == "general":
            floor = psd_floor_scale * max(
                float(np.trace(res.cov)) / p, np.finfo(float).tiny
            )
            kernels.append(estimate_stage2(res.cov, floor=floor))
        else:
            kind = kernel_mode.split(":", 1)[1]
            family = frobenius_fit(res.cov, kind=kind)
            kernels.append(build_cov_matrix(family, p))
    model = QpgpModel(
        omega=omegas, kernels=tuple(kernels), raw_covariances=tuple(raw_covs)
    )
    return (model, infos) if return_info else model


def brute_force_conditional_mean(
    model: QpgpModel,
    history: ErrorHistory,
    prefix: np.ndarray,
    j: int,
) -> np.ndarray:
    """Exact dense conditional mean of the remaining next-block elements.

    Stacks all observed blocks of dimension j plus the observed prefix of
    the next block, builds the full joint covariance under stationary
    initialization, Cov(x_a(s), x_b(t)) = omega^|a-b| K[s, t] / (1-omega^2),
    and solves the Gaussian conditioning formula directly. Intended as a
    validation oracle; refuses instances past a dense-solve size guard.
    """
    prefix = np.asarray(prefix, dtype=float).reshape(-1)
    i, p = len(history), history.p
    n_obs = i * p + prefix.size
    if prefix.size >= p:
        raise ShapeError("prefix must leave at least one element to predict")
    if n_obs > BRUTE_FORCE_GUARD:
        raise ParameterError(
            f"dense oracle limited to {BRUTE_FORCE_GUARD} conditioning points; "
            "shrink the instance"
        )
    omega = model.omega[j]
    K = model.kernels[j].values
    lags = np.abs(np.subtract.outer(np.arange(i + 1), np.arange(i + 1)))
    C_iter = omega**lags / (1.0 - omega**2)
    full = np.kron(C_iter, K)
    obs_idx = np.arange(n_obs)
    tgt_idx = np.arange(i * p + prefix.size, (i + 1) * p)
    y_obs = np.concatenate([np.concatenate([b[j] for b in history.blocks]), prefix])
    S_oo = full[np.ix_(obs_idx, obs_idx)]
    S_to = full[np.ix_(tgt_idx, obs_idx)]
    try:
        w = np.linalg.solve(S_oo, y_obs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("stacked covariance is singular") from exc
    return S_to @ w
