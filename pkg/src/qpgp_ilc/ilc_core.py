"""Iteration-domain controllers and stability diagnostics.

The loop implements the two lifted update laws

    standard:    u_{i+1} = u_i + L_i e_i
    predictive:  u_{i+1} = u_i + L_i e_i + K_i e_hat_{i+1}

with pluggable next-iteration error predictors (quasi-periodic GP in block
or element-wise mode, exact GP, sparse GP). Element-wise prediction runs
online: the predictive term for timestep t is computed during the next
rollout from the prefix of errors already observed in that rollout.

Contraction diagnostics evaluate the closed-loop iteration operators
A = I - G L - G K (Omega x I_p)  (block mode) and
B_t = I - G_t L_t - G_t K_t M_t  (element mode, leading-t submatrices) and
report spectral norms plus the covariance bound implied by the noise
kernels. They are advisory and never gate the loop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParameterError, QpgpIlcError, ShapeError
from .gp_baseline import FullGp, fit_sparse_gp, GpDataset
from .kernels import KernelFamily
from .qpgp import (
    ErrorHistory,
    QpgpModel,
    block_predict,
    element_predict_remainder,
    predictor_matrix,
    update_estimates,
)

PREDICTOR_KINDS = ("standard", "qpgp_block", "qpgp_element", "gp_full", "gp_sparse")


# ---------------------------------------------------------------------------
# Gains


@dataclass(frozen=True)
class GainSchedule:
    """Learning gain L and predictive gain K with an annealing rule."""

    base_L: float
    base_K: float = 0.0
    mode: str = "constant"

    def __post_init__(self):
        if self.mode not in ("constant", "inverse_iteration"):
            raise ParameterError(f"unknown gain mode {self.mode!r}")
        if np.isscalar(self.base_L) and (self.base_L < 0 or not np.isfinite(self.base_L)):
            raise ParameterError("base_L must be finite and non-negative")
        if np.isscalar(self.base_K) and (self.base_K < 0 or not np.isfinite(self.base_K)):
            raise ParameterError("base_K must be finite and non-negative")


def anneal(schedule: GainSchedule, iteration: int):
    """Gains at a given iteration: constant, or base/i for the 1/i schedule."""
    if iteration < 1:
        raise ParameterError("iteration must be >= 1")
    if schedule.mode == "constant":
        return schedule.base_L, schedule.base_K
    return schedule.base_L / iteration, schedule.base_K / iteration


# ---------------------------------------------------------------------------
# Lifted update laws


def standard_update(u, e, L):
    """u_{i+1} = u_i + L e_i (L scalar or matrix acting on the lifted error)."""
    u = np.asarray(u, dtype=float)
    e = np.asarray(e, dtype=float)
    if np.isscalar(L) or np.ndim(L) == 0:
        if u.shape != e.shape:
            raise ShapeError("scalar gain requires matching input/error shapes")
        return u + L * e
    L = np.asarray(L, dtype=float)
    if L.shape != (u.size, e.size):
        raise ShapeError("gain matrix must map the error vector to the input vector")
    return u + (L @ e.reshape(-1)).reshape(u.shape)


def predictive_update(u, e, e_hat, L, K):
    """u_{i+1} = u_i + L e_i + K e_hat_{i+1}; K = 0 reduces to standard_update."""
    if (np.isscalar(K) or np.ndim(K) == 0) and K == 0:
        return standard_update(u, e, L)
    return standard_update(standard_update(u, e, L), e_hat, K)


# ---------------------------------------------------------------------------
# Contraction diagnostics


@dataclass(frozen=True)
class ContractionReport:
    """Spectral-norm diagnostics of the closed-loop iteration operator."""

    mode: str
    norm: float
    kernel_norm_bound: float
    contraction_satisfied: bool
    covariance_bound: float

    @property
    def geometric_bound(self) -> float:
        """Stationary covariance bound from iterating the proof recursion
        P <- norm^2 P + covariance_bound."""
        if not self.contraction_satisfied:
            return np.inf
        return self.covariance_bound / (1.0 - self.norm**2)


def _gain_matrix(gain, rows: int, cols: int) -> np.ndarray:
    if np.isscalar(gain) or np.ndim(gain) == 0:
        if rows != cols:
            raise ShapeError("scalar gain requires a square operator; pass a matrix")
        return float(gain) * np.eye(rows)
    gain = np.asarray(gain, dtype=float)
    if gain.shape != (rows, cols):
        raise ShapeError(f"gain must have shape ({rows}, {cols})")
    return gain


def contraction_block(G, L, K, omega, kernels) -> ContractionReport:
    """Block-mode operator A = I - G L - G K (Omega x I_p)."""
    G = np.asarray(G, dtype=float)
    np_dim, mp_dim = G.shape
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    n = omega.size
    if np_dim % n:
        raise ShapeError("G row count must be a multiple of the output dimension")
    p = np_dim // n
    L = _gain_matrix(L, mp_dim, np_dim)
    K = _gain_matrix(K, mp_dim, np_dim)
    omega_lift = np.kron(np.diag(omega), np.eye(p))
    A = np.eye(np_dim) - G @ L - G @ K @ omega_lift
    norm = float(np.linalg.norm(A, 2))
    kernel_bound = max(float(np.linalg.norm(np.asarray(k), 2)) for k in kernels)
    return ContractionReport(
        mode="block",
        norm=norm,
        kernel_norm_bound=kernel_bound,
        contraction_satisfied=norm < 1.0,
        covariance_bound=2.0 * kernel_bound,
    )


def contraction_element(G, L, K, model: QpgpModel, t: int) -> ContractionReport:
    """Element-mode operator B_t on the leading-t sub-system.

    Rows/columns are selected per lifted block (first t timesteps of every
    output and input dimension); the predictor matrices enter as the direct
    sum over output dimensions.
    """
    G = np.asarray(G, dtype=float)
    n, p = model.n, model.p
    if not 1 <= t <= p:
        raise ParameterError(f"t must be in 1..{p}")
    np_dim, mp_dim = G.shape
    if np_dim != n * p or mp_dim % p:
        raise ShapeError("G must be (n p x m p) for the model's (n, p)")
    m = mp_dim // p
    rows = np.concatenate([j * p + np.arange(t) for j in range(n)])
    cols = np.concatenate([k * p + np.arange(t) for k in range(m)])
    L = _gain_matrix(L, mp_dim, np_dim)
    K = _gain_matrix(K, mp_dim, np_dim)
    G_t = G[np.ix_(rows, cols)]
    L_t = L[np.ix_(cols, rows)]
    K_t = K[np.ix_(cols, rows)]
    M_t = np.zeros((n * t, n * t))
    for j in range(n):
        M_t[j * t : (j + 1) * t, j * t : (j + 1) * t] = predictor_matrix(model, t, j)
    B = np.eye(n * t) - G_t @ L_t - G_t @ K_t @ M_t
    norm = float(np.linalg.norm(B, 2))
    kernel_bound = max(
        float(np.linalg.norm(k.values[:t, :t], 2)) for k in model.kernels
    )
    return ContractionReport(
        mode="element",
        norm=norm,
        kernel_norm_bound=kernel_bound,
        contraction_satisfied=norm < 1.0,
        covariance_bound=2.0 * kernel_bound,
    )


def finite_difference_jacobian(plant, u, seed: int, iteration: int = 1, step: float = 1e-4):
    """Estimate the lifted input-output Jacobian by forward differences.

    Uses common random numbers (same seed/iteration for all rollouts) so the
    plant's stochastic terms cancel.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    base = plant.rollout(u, seed=seed, iteration=iteration).outputs.reshape(-1)
    G = np.empty((base.size, u.size))
    flat = u.reshape(-1)
    for col in range(flat.size):
        bumped = flat.copy()
        bumped[col] += step
        out = plant.rollout(bumped.reshape(u.shape), seed=seed, iteration=iteration)
        G[:, col] = (out.outputs.reshape(-1) - base) / step
    return G


# ---------------------------------------------------------------------------
# Controller configuration and per-iteration records


@dataclass(frozen=True)
class ControllerSpec:
    """One controller cell: update law, gains, and predictor options."""

    kind: str
    gains: GainSchedule
    name: str | None = None
    kernel_mode: str = "general"
    kernel_floor_scale: float = 1e-8
    fixed_model: QpgpModel | None = None
    gp_kernel: KernelFamily | None = None
    gp_noise_variance: float = 1e-2
    num_inducing: int = 100
    sparse_refit_every: int = 10
    sparse_refine_iterations: int = 2
    sparse_placement_window: int | None = 20
    online_gain: float | None = None

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise ParameterError(f"unknown controller kind {self.kind!r}")
        if self.name is None:
            object.__setattr__(self, "name", self.kind)


@dataclass(frozen=True)
class ExperimentRecord:
    """One summary row per (controller, seed, iteration)."""

    controller: str
    seed: int
    iteration: int
    rms_error: float
    max_error: float
    predict_s: float
    estimate_s: float
    rollout_s: float
    cumulative_s: float

    FIELDS = (
        "controller", "seed", "iteration", "rms_error", "max_error",
        "predict_s", "estimate_s", "rollout_s", "cumulative_s",
    )

    def row(self) -> list:
        return [getattr(self, name) for name in self.FIELDS]


class RolloutAborted(QpgpIlcError):
    """Raised when a rollout produced non-finite errors; carries partials."""

    def __init__(self, message, records, rollouts):
        super().__init__(message)
        self.records = records
        self.rollouts = rollouts


# ---------------------------------------------------------------------------
# Predictors


class _QpgpPredictor:
    def __init__(self, spec: ControllerSpec):
        self.spec = spec
        self.model = spec.fixed_model
        self._estimating = spec.fixed_model is None

    def update(self, history: ErrorHistory):
        if self._estimating and len(history) >= 2:
            self.model = update_estimates(
                history,
                previous=self.model,
                kernel_mode=self.spec.kernel_mode,
                psd_floor_scale=self.spec.kernel_floor_scale,
            )

    def predict_block(self, e_last: np.ndarray):
        if self.model is None:
            return None
        return block_predict(self.model, e_last)

    def element_hook(self, plant, e_last: np.ndarray, gain_K: float, u_base: np.ndarray):
        """Per-timestep online refinement of the predictive feedforward term.

        The structured part of the element-wise prediction (omega * e_i) is
        already persisted in the stored input by the between-iteration
        update; what remains online is the prefix-dependent deviation
        correction, which exists only while the iteration executes. With an
        uncorrelated kernel the deviation vanishes and element-wise control
        coincides with block mode. The prediction target honors the plant's
        input/error pairing: with ``error_shift`` s, the input at step k
        carries the predicted error at step k+s, with unobserved
        intermediate elements replaced by their own sequential predictions.
        """
        model = self.model
        if model is None or gain_K == 0.0:
            return None
        n, p = model.n, model.p
        omega = model.omega
        structured = omega[:, None] * e_last

        def hook(k: int, prefix: np.ndarray) -> np.ndarray:
            # full-iteration deviation from the structured prediction:
            # observed for steps < k, predicted for steps >= k
            deviation = np.empty((n, p))
            for j in range(n):
                deviation[j, : k - 1] = prefix[j]
                deviation[j, k - 1 :] = element_predict_remainder(
                    model, e_last, prefix[j], j
                )
            deviation -= structured
            return gain_K * plant.online_correction(deviation, u_base[:, k - 1], k)

        return hook


class _GpPredictor:
    def __init__(self, spec: ControllerSpec, plant, iterations: int, seed: int):
        self.spec = spec
        self.plant = plant
        self.seed = seed
        kernel = spec.gp_kernel or KernelFamily(kind="rbf", variance=1.0, params=(2.0, 5.0))
        self.kernel = kernel
        if spec.kind == "gp_full":
            capacity = iterations * plant.p
            self.models = [
                FullGp(kernel, spec.gp_noise_variance, capacity=capacity)
                for _ in range(plant.n)
            ]
        else:
            self.models = [None] * plant.n
        self._blocks = []

    def update(self, history: ErrorHistory):
        i = len(history)
        block = history.last
        p = self.plant.p
        inputs = np.column_stack([np.full(p, float(i)), np.arange(1, p + 1)])
        self._blocks.append(block)
        if self.spec.kind == "gp_full":
            for j, model in enumerate(self.models):
                model.extend(inputs, block[j])
            return
        refit = (i - 1) % max(self.spec.sparse_refit_every, 1) == 0 or self.models[0] is None
        for j in range(self.plant.n):
            if refit or self.models[j] is None:
                data = GpDataset.from_blocks(self._blocks, j)
                model = fit_sparse_gp(
                    data,
                    num_inducing=self.spec.num_inducing,
                    kernel=self.kernel,
                    noise_variance=self.spec.gp_noise_variance,
                    refine_iterations=self.spec.sparse_refine_iterations,
                    seed=int(np.random.default_rng([self.seed, 7000 + i]).integers(2**31)),
                    placement_window=self.spec.sparse_placement_window,
                )
                self.models[j] = model
            else:
                self.models[j].extend(inputs, block[j])

    def predict_block(self, e_last: np.ndarray):
        if self.models[0] is None or len(self._blocks) < 1:
            return None
        p = self.plant.p
        X_star = np.column_stack(
            [np.full(p, float(len(self._blocks) + 1)), np.arange(1, p + 1)]
        )
        return np.stack([m.predict(X_star) for m in self.models])

    def element_hook(self, *args, **kwargs):
        return None


class _NoPredictor:
    model = None

    def update(self, history):
        pass

    def predict_block(self, e_last):
        return None

    def element_hook(self, *args, **kwargs):
        return None


def _make_predictor(spec: ControllerSpec, plant, iterations: int, seed: int):
    if spec.kind == "standard":
        return _NoPredictor()
    if spec.kind in ("qpgp_block", "qpgp_element"):
        return _QpgpPredictor(spec)
    return _GpPredictor(spec, plant, iterations, seed)


# ---------------------------------------------------------------------------
# The loop


def run_ilc_loop(plant, controller: ControllerSpec, iterations: int, seed: int):
    """Execute ``iterations`` rollouts under the configured controller.

    Returns (rollouts, records). Deterministic given (plant config,
    controller, iterations, seed): all stochastic plant terms derive from
    (seed, iteration) only. Non-finite errors abort the loop with the
    partial results attached to the exception.
    """
    if iterations < 1:
        raise ParameterError("iterations must be >= 1")
    u = plant.initial_input()
    predictor = _make_predictor(controller, plant, iterations, seed)
    history = None
    records: list[ExperimentRecord] = []
    rollouts = []
    cumulative = 0.0
    for i in range(1, iterations + 1):
        hook = None
        hook_time = 0.0
        if controller.kind == "qpgp_element" and history is not None:
            # the online deviation term cancels the current lap's predictable
            # error and does not accumulate in u, so it may carry its own
            # constant gain; default follows the annealed predictive gain
            if controller.online_gain is not None:
                gain_online = controller.online_gain
            else:
                _, gain_online = anneal(controller.gains, i - 1)
            inner = predictor.element_hook(plant, history.last, gain_online, u)
            if inner is not None:
                def hook(k, prefix, _inner=inner):
                    nonlocal hook_time
                    t0 = time.perf_counter()
                    out = _inner(k, prefix)
                    hook_time += time.perf_counter() - t0
                    return out

        t0 = time.perf_counter()
        rollout = plant.rollout(u, seed=seed, iteration=i, step_correction=hook)
        rollout_s = time.perf_counter() - t0 - hook_time
        errors = rollout.errors
        rollouts.append(rollout)
        if not np.all(np.isfinite(errors)):
            raise RolloutAborted(
                f"non-finite errors at iteration {i} (controller {controller.name})",
                records,
                rollouts,
            )
        if history is None:
            history = ErrorHistory([errors])
            history.lag_stats()  # prime incremental statistics
        else:
            history = history.append(errors)

        t0 = time.perf_counter()
        predictor.update(history)
        estimate_s = time.perf_counter() - t0

        t0 = time.perf_counter()
        e_hat = None
        if controller.kind != "standard":
            # element mode persists the structured part of its prediction
            # (identical to block form); the deviation term lives in the hook
            e_hat = predictor.predict_block(errors)
        predict_s = (time.perf_counter() - t0) + hook_time

        L_i, K_i = anneal(controller.gains, i)
        correction = plant.error_to_input(errors, u)
        if e_hat is not None and K_i != 0.0:
            u = predictive_update(u, correction, plant.error_to_input(e_hat, u), L_i, K_i)
        else:
            u = standard_update(u, correction, L_i)

        cumulative += predict_s + estimate_s + rollout_s
        records.append(
            ExperimentRecord(
                controller=controller.name,
                seed=seed,
                iteration=i,
                rms_error=float(np.sqrt(np.mean(errors**2))),
                max_error=float(np.max(np.abs(errors))),
                predict_s=predict_s,
                estimate_s=estimate_s,
                rollout_s=rollout_s,
                cumulative_s=cumulative,
            )
        )
    return rollouts, records
