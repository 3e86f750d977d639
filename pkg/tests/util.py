"""Shared helpers for the test suite."""

import numpy as np

from qpgp_ilc.kernels import CovKernel
from qpgp_ilc.qpgp import QpgpModel


def random_spd(p: int, rng: np.random.Generator, ridge: float = 0.1) -> np.ndarray:
    """Well-conditioned random SPD matrix of size p."""
    W = rng.standard_normal((p, p + 2))
    M = W @ W.T / (p + 2)
    return M + ridge * np.eye(p)


def random_model(n: int, p: int, rng: np.random.Generator) -> QpgpModel:
    omega = rng.uniform(-0.9, 0.9, size=n)
    kernels = tuple(CovKernel(values=random_spd(p, rng)) for _ in range(n))
    return QpgpModel(omega=omega, kernels=kernels)
