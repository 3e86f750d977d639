"""Simulated plants: raceline-tracking vehicle and 3-link planar manipulator.

Both plants execute one full iteration (lap / trajectory pass) per rollout,
given lifted feedforward inputs, and report the lifted error block. Rollouts
are pure functions of (config, inputs, seed, iteration): the per-iteration
noise stream is derived from (seed, iteration) only, so different
controllers see identical disturbance realizations and repeated runs are
bit-identical.

A minimal linear plant is included for contraction diagnostics and
closed-loop theory checks.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError

DAMPING = 1e-3  # pseudo-inverse regularization for joint corrections


# ---------------------------------------------------------------------------
# Reference paths


@dataclass(frozen=True)
class ReferencePath:
    """Discrete reference curve with its arc parameter values."""

    points: np.ndarray
    arc_parameter: np.ndarray
    closed: bool = True

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        arc = np.asarray(self.arc_parameter, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 3:
            raise ShapeError("reference path needs at least 3 (x, y) points")
        if arc.shape != (points.shape[0],):
            raise ShapeError("arc parameter must match point count")
        points.setflags(write=False)
        arc.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "arc_parameter", arc)

    def __len__(self) -> int:
        return self.points.shape[0]

    def polyline_length(self) -> float:
        deltas = np.diff(self.points, axis=0)
        length = float(np.sum(np.hypot(deltas[:, 0], deltas[:, 1])))
        if self.closed:
            length += float(np.hypot(*(self.points[0] - self.points[-1])))
        return length

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "s", "x", "y"])
            for idx, (s, (x, y)) in enumerate(zip(self.arc_parameter, self.points)):
                writer.writerow([idx, repr(float(s)), repr(float(x)), repr(float(y))])


def gen_raceline(p: int, speed: float, dt: float) -> ReferencePath:
    """Closed racetrack R(s) = 10 + 2 sin(2s) + sin(3s), rescaled so the
    closed polyline length equals speed * dt * p."""
    if p < 3:
        raise ParameterError("p must be >= 3")
    s = 2.0 * np.pi * np.arange(p) / p
    radius = 10.0 + 2.0 * np.sin(2.0 * s) + np.sin(3.0 * s)
    points = np.column_stack([radius * np.cos(s), radius * np.sin(s)])
    raw = ReferencePath(points=points, arc_parameter=s)
    scale = (speed * dt * p) / raw.polyline_length()
    return ReferencePath(points=points * scale, arc_parameter=s)


def gen_circle_ref(p: int, center=(1.5, 1.0), radius: float = 0.5) -> ReferencePath:
    if p < 3:
        raise ParameterError("p must be >= 3")
    s = 2.0 * np.pi * np.arange(p) / p
    points = np.column_stack([center[0] + radius * np.cos(s), center[1] + radius * np.sin(s)])
    return ReferencePath(points=points, arc_parameter=s)


def gen_lissajous_ref(p: int) -> ReferencePath:
    """Planar Lissajous curve y(t) = 0.25 + 0.04 sin(3t + pi/2),
    z(t) = 0.45 + 0.02 sin(2t); provided as an optional reference shape."""
    if p < 3:
        raise ParameterError("p must be >= 3")
    t = 2.0 * np.pi * np.arange(p) / p
    y = 0.25 + 0.04 * np.sin(3.0 * t + np.pi / 2.0)
    z = 0.45 + 0.02 * np.sin(2.0 * t)
    return ReferencePath(points=np.column_stack([y, z]), arc_parameter=t)


# ---------------------------------------------------------------------------
# Rollout container


@dataclass
class PlantRollout:
    """One executed iteration: lifted inputs, outputs, errors, and timing."""

    inputs: np.ndarray
    outputs: np.ndarray
    errors: np.ndarray
    path_xy: np.ndarray | None = None
    seconds: float = 0.0

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        self.errors = np.atleast_2d(np.asarray(self.errors, dtype=float))
        if self.inputs.shape[1] != self.errors.shape[1]:
            raise ShapeError("inputs and errors must share the timestep count")
        if self.outputs.shape != self.errors.shape:
            raise ShapeError("outputs and errors must share (n, p)")


def _rollout_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(iteration)])


# ---------------------------------------------------------------------------
# Vehicle plant


def pure_pursuit(state, target, wheelbase: float) -> float:
    """Geometric steering toward a target point.

    alpha = atan2(dy, dx) - heading; delta = atan(2 L sin(alpha) / dist).
    Returns 0 when the target coincides with the position.
    """
    x, y, heading = state
    dx, dy = target[0] - x, target[1] - y
    dist = np.hypot(dx, dy)
    if dist < 1e-12:
        return 0.0
    alpha = np.arctan2(dy, dx) - heading
    return float(np.arctan(2.0 * wheelbase * np.sin(alpha) / dist))


def lateral_error(position, path: ReferencePath) -> float:
    """Signed normal-direction deviation from the nearest reference point.

    Tangent is the central difference at the nearest index (wrapping for
    closed paths); the normal is its left-hand perpendicular, so positive
    error means the vehicle sits left of the path.
    """
    pos = np.asarray(position[:2], dtype=float)
    pts = path.points
    star = int(np.argmin(np.sum((pts - pos) ** 2, axis=1)))
    p = len(path)
    if path.closed:
        before, after = pts[(star - 1) % p], pts[(star + 1) % p]
    else:
        before, after = pts[max(star - 1, 0)], pts[min(star + 1, p - 1)]
    tangent = after - before
    norm = np.hypot(*tangent)
    if norm < 1e-12:
        return float(np.hypot(*(pos - pts[star])))
    tangent = tangent / norm
    normal = np.array([-tangent[1], tangent[0]])
    return float(normal @ (pos - pts[star]))


@dataclass(frozen=True)
class VehicleConfig:
    """Raceline-tracking vehicle with corrupted steering.

    The applied steering is g*(ff + fb) + bias + drift_slope*t_k + noise,
    saturated to +-saturation, with t_k = k*dt the elapsed lap time; the
    heading additionally integrates a constant drift rate. Drift rates are
    per second, which keeps the corruption "slow" relative to the actuator
    range at any sampling resolution.
    """

    p: int = 200
    speed: float = 8.0
    wheelbase: float = 0.5
    dt: float = 0.04
    steering_gain: float = 0.7
    bias: float = 0.15
    drift_slope: float = 0.01
    noise_variance: float = 0.015
    heading_drift: float = 0.04
    saturation: float = 0.5
    lookahead_steps: int = 2
    correction_damping: float = 1.0

    def __post_init__(self):
        if min(self.speed, self.wheelbase, self.dt, self.saturation) <= 0:
            raise ParameterError("speed, wheelbase, dt, saturation must be positive")
        if self.noise_variance < 0:
            raise ParameterError("noise variance must be non-negative")


_VEHICLE_ADJOINT_CACHE: dict = {}


class VehiclePlant:
    """Kinematic bicycle following the closed raceline, one lap per rollout."""

    name = "vehicle"
    n = 1
    m = 1

    def __init__(self, config: VehicleConfig | None = None, path: ReferencePath | None = None):
        self.config = config or VehicleConfig()
        self.p = self.config.p
        if path is not None and len(path) != self.p:
            raise ShapeError("path point count must equal p")
        self.path = path if path is not None else gen_raceline(
            self.p, self.config.speed, self.config.dt
        )
        key = self.config
        if key not in _VEHICLE_ADJOINT_CACHE:
            _VEHICLE_ADJOINT_CACHE[key] = self._measure_adjoint()
        self._jacobian, self._mapping = _VEHICLE_ADJOINT_CACHE[key]

    def initial_input(self) -> np.ndarray:
        return np.zeros((1, self.p))

    def _measure_adjoint(self):
        """Finite-difference steering-to-error Jacobian at the nominal input.

        Error corrections are routed through the damped pseudo-inverse
        G^T (G G^T + lambda^2 I)^{-1}, the lifted analogue of the
        manipulator's per-timestep Jacobian inverse: the learning operator
        I - L G G^T (G G^T + lambda^2)^{-1} contracts for any gain L < 2,
        strongly observable error directions converge at nearly the full
        gain, and near-null directions (un-correctable measurement noise)
        are suppressed by the damping.
        """
        fields = {
            f: getattr(self.config, f)
            for f in (
                "p", "speed", "wheelbase", "dt", "steering_gain", "bias",
                "drift_slope", "heading_drift", "saturation",
                "lookahead_steps", "correction_damping",
            )
        }
        clean = VehiclePlant.__new__(VehiclePlant)
        clean.config = VehicleConfig(**fields, noise_variance=0.0)
        clean.p = self.p
        clean.path = self.path
        lam2 = self.config.correction_damping**2

        def measure(u0):
            base = clean.rollout(u0, seed=0, iteration=1).errors[0]
            step = 1e-4
            G = np.empty((self.p, self.p))
            for c in range(self.p):
                u = u0.copy()
                u[0, c] += step
                G[:, c] = (clean.rollout(u, seed=0, iteration=1).errors[0] - base) / step
            mapping = np.linalg.solve(G @ G.T + lam2 * np.eye(self.p), G).T
            return G, mapping

        # measure at the nominal input, pre-converge the noise-free twin,
        # then re-measure at the converged operating point: inversion
        # accuracy matters most near convergence
        u = np.zeros((1, self.p))
        G, mapping = measure(u)
        for i in range(1, 41):
            e = clean.rollout(u, seed=0, iteration=1).errors
            u = u - (0.5 / i**0.5) * (mapping @ e[0])[None, :]
        return measure(u)

    def lifted_jacobian(self) -> np.ndarray:
        """The measured lifted steering-to-error Jacobian (np x mp)."""
        return self._jacobian

    def initial_state(self):
        pts = self.path.points
        tangent = pts[1] - pts[-1]
        return np.array([pts[0, 0], pts[0, 1], np.arctan2(tangent[1], tangent[0])])

    def error_to_input(self, errors: np.ndarray, u: np.ndarray) -> np.ndarray:
        errors = np.atleast_2d(errors)
        return -(self._mapping @ errors[0])[None, :]

    def online_correction(self, deviation: np.ndarray, u_t: np.ndarray, k: int) -> np.ndarray:
        # deviation covers the whole iteration: observed prefix deviations
        # plus predicted remainder deviations
        return np.array([-(self._mapping[k - 1] @ deviation[0])])

    def rollout(self, u, seed: int, iteration: int, step_correction=None) -> PlantRollout:
        cfg = self.config
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape != (1, self.p):
            raise ShapeError(f"feedforward must have shape (1, {self.p})")
        t_start = time.perf_counter()
        rng = _rollout_rng(seed, iteration)
        noise = rng.normal(0.0, np.sqrt(cfg.noise_variance), size=self.p)
        state = self.initial_state()
        pts = self.path.points
        applied = np.empty(self.p)
        lateral = np.empty(self.p)
        positions = np.empty((self.p, 2))
        errors_so_far = np.empty((1, self.p))
        v_dt = cfg.speed * cfg.dt
        for k in range(1, self.p + 1):
            ff = u[0, k - 1]
            if step_correction is not None:
                ff = ff + float(step_correction(k, errors_so_far[:, : k - 1]))
            fb = pure_pursuit(state, pts[(k - 1 + cfg.lookahead_steps) % self.p], cfg.wheelbase)
            delta = (
                cfg.steering_gain * (ff + fb)
                + cfg.bias
                + cfg.drift_slope * k * cfg.dt
                + noise[k - 1]
            )
            delta = float(np.clip(delta, -cfg.saturation, cfg.saturation))
            heading = state[2]
            state = np.array([
                state[0] + v_dt * np.cos(heading),
                state[1] + v_dt * np.sin(heading),
                heading + v_dt / cfg.wheelbase * np.tan(delta) + cfg.heading_drift * cfg.dt,
            ])
            if not np.all(np.isfinite(state)):
                raise NumericalError(f"vehicle state diverged at step {k}")
            applied[k - 1] = ff
            lateral[k - 1] = lateral_error(state, self.path)
            errors_so_far[0, k - 1] = -lateral[k - 1]
            positions[k - 1] = state[:2]
        return PlantRollout(
            inputs=applied[None, :],
            outputs=lateral[None, :],
            errors=-lateral[None, :],
            path_xy=positions,
            seconds=time.perf_counter() - t_start,
        )


# ---------------------------------------------------------------------------
# Manipulator plant


def manip_fk(theta, lengths=(1.0, 1.0, 0.5)):
    """Forward kinematics. Returns (joint positions including base, ee)."""
    theta = np.asarray(theta, dtype=float).reshape(3)
    angles = np.cumsum(theta)
    steps = np.asarray(lengths)[:, None] * np.column_stack([np.cos(angles), np.sin(angles)])
    joints = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
    return joints, joints[-1]


def _fk_batch(theta: np.ndarray, lengths) -> np.ndarray:
    # theta: (3, p) -> end-effector (2, p)
    angles = np.cumsum(theta, axis=0)
    lengths = np.asarray(lengths)[:, None]
    x = np.sum(lengths * np.cos(angles), axis=0)
    y = np.sum(lengths * np.sin(angles), axis=0)
    return np.vstack([x, y])


def manip_jacobian(theta, lengths=(1.0, 1.0, 0.5)) -> np.ndarray:
    """Analytic 2x3 end-effector Jacobian: column k sums partial link terms
    from link k outward (cumulative-angle chain rule)."""
    theta = np.asarray(theta, dtype=float).reshape(3)
    angles = np.cumsum(theta)
    lsin = np.asarray(lengths) * np.sin(angles)
    lcos = np.asarray(lengths) * np.cos(angles)
    J = np.empty((2, 3))
    for k in range(3):
        J[0, k] = -np.sum(lsin[k:])
        J[1, k] = np.sum(lcos[k:])
    return J


def manip_ik(x_ref: float, y_ref: float, lengths=(1.0, 1.0, 0.5)):
    """Closed-form inverse kinematics with the last link held at global
    orientation zero (elbow-up branch), so fk(ik(x, y)) == (x, y).

    The wrist target is (x_ref - l3, y_ref); the third joint angle
    compensates the first two to keep the final link horizontal.
    """
    l1, l2, l3 = lengths
    x_e, y_e = x_ref - l3, y_ref
    D = (x_e**2 + y_e**2 - l1**2 - l2**2) / (2.0 * l1 * l2)
    if abs(D) > 1.0 + 1e-9:
        raise ParameterError(f"target ({x_ref}, {y_ref}) unreachable (|D| = {abs(D):.6f})")
    D = float(np.clip(D, -1.0, 1.0))
    theta2 = float(np.arctan2(np.sqrt(1.0 - D**2), D))
    theta1 = float(
        np.arctan2(y_e, x_e) - np.arctan2(l2 * np.sin(theta2), l1 + l2 * np.cos(theta2))
    )
    return theta1, theta2, -(theta1 + theta2)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Constant joint offsets applied from `iteration` onward."""

    iteration: int
    offsets: tuple = (0.1, -0.1, 0.05)

    def __post_init__(self):
        if self.iteration < 1:
            raise ParameterError("disturbance iteration must be >= 1")
        if len(self.offsets) != 3:
            raise ShapeError("need one offset per joint")


@dataclass(frozen=True)
class ManipConfig:
    """3-link planar arm tracking a circle, with joint-bias corruption.

    bias_scale multiplies the deterministic bias terms (0 disables them for
    clean-plant checks); the noise standard deviations scale independently.
    """

    p: int = 100
    lengths: tuple = (1.0, 1.0, 0.5)
    center: tuple = (1.5, 1.0)
    radius: float = 0.5
    noise_sds: tuple = (0.1, 0.2, 0.1)
    bias_scale: float = 1.0
    disturbance: DisturbanceSpec | None = None

    def __post_init__(self):
        if any(l <= 0 for l in self.lengths):
            raise ParameterError("link lengths must be positive")
        if self.radius <= 0:
            raise ParameterError("radius must be positive")


class ManipulatorPlant:
    """Kinematic 3-link arm; outputs are end-effector positions per step."""

    name = "manipulator"
    n = 2
    m = 3

    def __init__(self, config: ManipConfig | None = None):
        self.config = config or ManipConfig()
        cfg = self.config
        self.p = cfg.p
        self.path = gen_circle_ref(cfg.p, cfg.center, cfg.radius)
        self.s_grid = np.linspace(0.0, 1.0, cfg.p)
        for x, y in self.path.points:  # reachability (wrist convention)
            manip_ik(x, y, cfg.lengths)

    def initial_input(self) -> np.ndarray:
        angles = np.array([manip_ik(x, y, self.config.lengths) for x, y in self.path.points])
        return angles.T.copy()

    def _bias(self, rng: np.random.Generator) -> np.ndarray:
        s = self.s_grid
        sds = self.config.noise_sds
        b = np.empty((3, self.p))
        b[0] = 0.2 + 0.5 * np.sin(8.0 * np.pi * s)
        b[1] = -0.25 + 0.1 * np.cos(6.0 * np.pi * s)
        b[2] = 0.35 + 0.5 * np.exp(-((s - 0.04) ** 2) / (2.0 * 0.05**2))
        b *= self.config.bias_scale
        b += rng.normal(0.0, 1.0, size=(3, self.p)) * np.asarray(sds)[:, None]
        return b

    def error_to_input(self, errors: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Map Cartesian errors to joint corrections via the damped
        pseudo-inverse of the per-timestep Jacobian at the commanded angles."""
        errors = np.atleast_2d(errors)
        out = np.empty((3, self.p))
        for t in range(self.p):
            out[:, t] = self.error_to_input_step(errors[:, t], u[:, t], t + 1)
        return out

    def error_to_input_step(self, error_t, u_t, t: int) -> np.ndarray:
        J = manip_jacobian(u_t, self.config.lengths)
        JJt = J @ J.T + DAMPING**2 * np.eye(2)
        return J.T @ np.linalg.solve(JJt, np.asarray(error_t, dtype=float))

    def online_correction(self, deviation: np.ndarray, u_t: np.ndarray, k: int) -> np.ndarray:
        return self.error_to_input_step(deviation[:, k - 1], u_t, k)

    def jacobian_lifted(self, u: np.ndarray) -> np.ndarray:
        """Block-diagonal lifted Jacobian (output blocks x input blocks),
        ordered dimension-major to match lifted error vectors."""
        p = self.p
        G = np.zeros((2 * p, 3 * p))
        for t in range(p):
            J = manip_jacobian(u[:, t], self.config.lengths)
            for a in range(2):
                for b in range(3):
                    G[a * p + t, b * p + t] = J[a, b]
        return G

    def rollout(self, u, seed: int, iteration: int, step_correction=None) -> PlantRollout:
        cfg = self.config
        u = np.asarray(u, dtype=float)
        if u.shape != (3, self.p):
            raise ShapeError(f"feedforward must have shape (3, {self.p})")
        t_start = time.perf_counter()
        rng = _rollout_rng(seed, iteration)
        bias = self._bias(rng)
        if cfg.disturbance is not None and iteration >= cfg.disturbance.iteration:
            bias = bias + np.asarray(cfg.disturbance.offsets)[:, None]
        ref = self.path.points.T
        if step_correction is None:
            applied = u
            ee = _fk_batch(u + bias, cfg.lengths)
            errors = ref - ee
        else:
            applied = np.empty((3, self.p))
            ee = np.empty((2, self.p))
            errors = np.empty((2, self.p))
            for k in range(1, self.p + 1):
                cmd = u[:, k - 1] + step_correction(k, errors[:, : k - 1])
                applied[:, k - 1] = cmd
                _, ee_k = manip_fk(cmd + bias[:, k - 1], cfg.lengths)
                ee[:, k - 1] = ee_k
                errors[:, k - 1] = ref[:, k - 1] - ee_k
        if not np.all(np.isfinite(errors)):
            raise NumericalError("manipulator errors diverged")
        return PlantRollout(
            inputs=applied,
            outputs=ee,
            errors=errors,
            path_xy=ee.T.copy(),
            seconds=time.perf_counter() - t_start,
        )


# ---------------------------------------------------------------------------
# Linear diagnostic plant


class LinearPlant:
    """Memoryless linear plant y = G u + z for contraction experiments.

    G defaults to identity; z is optional additive Gaussian noise with one
    covariance factor per output dimension, redrawn each iteration.
    """

    name = "linear"

    def __init__(self, desired: np.ndarray, gain_matrix: np.ndarray | None = None,
                 noise_factors: list | None = None):
        self.desired = np.atleast_2d(np.asarray(desired, dtype=float))
        self.n, self.p = self.desired.shape
        self.m = self.n
        self.G = np.eye(self.n * self.p) if gain_matrix is None else np.asarray(gain_matrix)
        if self.G.shape != (self.n * self.p, self.n * self.p):
            raise ShapeError("gain matrix must be (np x np)")
        self.noise_factors = noise_factors

    def initial_input(self) -> np.ndarray:
        return np.zeros((self.m, self.p))

    def error_to_input(self, errors: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.atleast_2d(errors)

    def error_to_input_step(self, error_t, u_t, t: int):
        return np.asarray(error_t, dtype=float)

    def online_correction(self, deviation: np.ndarray, u_t: np.ndarray, k: int) -> np.ndarray:
        return np.asarray(deviation[:, k - 1], dtype=float)

    def rollout(self, u, seed: int, iteration: int, step_correction=None) -> PlantRollout:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if step_correction is not None:
            if not np.array_equal(self.G, np.eye(self.n * self.p)):
                raise ParameterError(
                    "per-step corrections on the linear plant require identity gain"
                )
            corr = np.empty_like(u)
            errors_so_far = np.empty((self.n, self.p))
            # memoryless plant: outputs depend only on same-step inputs
            y = np.empty((self.n, self.p))
            noise = self._noise(seed, iteration)
            for k in range(1, self.p + 1):
                corr[:, k - 1] = step_correction(k, errors_so_far[:, : k - 1])
                y[:, k - 1] = u[:, k - 1] + corr[:, k - 1] + noise[:, k - 1]
                errors_so_far[:, k - 1] = self.desired[:, k - 1] - y[:, k - 1]
            applied = u + corr
            errors = self.desired - y
        else:
            applied = u
            y = (self.G @ u.reshape(-1)).reshape(self.n, self.p) + self._noise(seed, iteration)
            errors = self.desired - y
        return PlantRollout(inputs=applied, outputs=y, errors=errors)

    def _noise(self, seed: int, iteration: int) -> np.ndarray:
        if self.noise_factors is None:
            return np.zeros((self.n, self.p))
        rng = _rollout_rng(seed, iteration)
        z = rng.standard_normal((self.n, self.p))
        return np.stack([self.noise_factors[j] @ z[j] for j in range(self.n)])
