"""Dense matrix helpers, seeded PRNG, and the AdamW optimizer.

Matrices are plain 2-d float64 numpy arrays throughout the package. Random
streams come from numpy's PCG64 generator: the algorithm is fixed and
documented, so a recorded seed reproduces every downstream artifact
bit-exactly on any platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, NumericError


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seed gives an identical stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError("as_matrix: expected 2-d data", arr.shape)
    return arr


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    return a @ b


def gaussian(rng: np.random.Generator, rows: int, cols: int, std: float) -> np.ndarray:
    """i.i.d. N(0, std^2) matrix; std=0 yields exact zeros."""
    if std < 0:
        raise ValueError(f"gaussian: std must be >= 0, got {std}")
    if std == 0:
        return np.zeros((rows, cols))
    return rng.normal(0.0, std, size=(rows, cols))


def checksum(arr: np.ndarray) -> str:
    """SHA-1 of the raw little-endian bytes; used for freeze/immutability audits."""
    data = np.ascontiguousarray(arr, dtype=np.float64)
    if data.dtype.byteorder == ">":
        data = data.astype("<f8")
    return hashlib.sha1(data.tobytes()).hexdigest()


@dataclass
class AdamWState:
    """Per-parameter AdamW state with decoupled weight decay.

    Defaults follow common practice (beta1=0.9, beta2=0.999, eps=1e-8,
    weight_decay=0); only the learning rate is externally prescribed.
    """

    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def _ensure_buffers(self, shape) -> None:
        if self.m is None:
            self.m = np.zeros(shape)
            self.v = np.zeros(shape)
        elif self.m.shape != shape:
            raise DimensionError("adamw_step: state buffers", self.m.shape, shape)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState) -> np.ndarray:
    """One AdamW update, applied in place to ``param``. Returns ``param``."""
    if param.shape != grad.shape:
        raise DimensionError("adamw_step", param.shape, grad.shape)
    if state.lr < 0:
        raise ValueError(f"adamw_step: lr must be >= 0, got {state.lr}")
    check_finite(grad, "adamw_step: gradient")
    state._ensure_buffers(param.shape)
    state.step += 1
    kernels.adamw_update(param, np.ascontiguousarray(grad), state.m, state.v,
                         state.step, state.lr, state.beta1, state.beta2,
                         state.eps, state.weight_decay)
    return param
