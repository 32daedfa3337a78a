"""Iterative shrinkage solvers and their verification oracles.

The solvers are written against a minimal operator protocol (apply / adjoint
/ zero_code / random_code) so the same code paths run on multiscale
dictionaries and on dense matrices; the dense route is what the independent
oracles (coordinate descent, least-norm solution) check against.

Thresholds are stored pre-reparameterization: the effective weight is
relu(raw) + FLOOR, which keeps every threshold strictly positive no matter
what the optimizer does to the raw value.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import precision, rng
from .linops import DictionaryParams, MultiscaleCode, ScaleSpec, dict_adjoint, dict_apply

FLOOR = 1e-5


class ShrinkMode(str, Enum):
    NONNEG = "nonneg"
    SIGNED = "signed"


class DegenerateOperatorError(RuntimeError):
    """Power iteration hit a zero vector; the operator (or start) is degenerate."""


@dataclass
class Thresholds:
    """Per (step, scale, channel) raw threshold values.

    raw[k][i] is a (C_i,) array for step k and scale i; the effective
    threshold is relu(raw) + FLOOR.
    """

    raw: list[list[np.ndarray]]

    @property
    def num_steps(self) -> int:
        return len(self.raw)

    def effective(self, step: int) -> list[np.ndarray]:
        return [np.maximum(r, 0) + FLOOR for r in self.raw[step]]

    @classmethod
    def constant(cls, spec: ScaleSpec, steps: int, value: float) -> "Thresholds":
        """Raw values chosen so every effective threshold equals ``value``."""
        if value < FLOOR:
            raise ValueError(f"threshold {value} below floor {FLOOR}")
        dt = precision.active_dtype()
        return cls(
            [
                [np.full(spec.channels_at(i), value - FLOOR, dtype=dt) for i in range(spec.scales + 1)]
                for _ in range(steps)
            ]
        )


# ---------------------------------------------------------------------------
# operator protocol


class DictOperator:
    """Multiscale dictionary viewed as a linear map code -> image."""

    def __init__(self, params: DictionaryParams):
        self.params = params

    def apply(self, code: MultiscaleCode) -> np.ndarray:
        return dict_apply(self.params, code)

    def adjoint(self, image: np.ndarray) -> MultiscaleCode:
        return dict_adjoint(self.params, image)

    def zero_code(self, like: np.ndarray) -> MultiscaleCode:
        batch = like.shape[0] if like.ndim == 4 else None
        return MultiscaleCode.zeros(self.params.spec, batch=batch)

    def random_code(self, gen: np.random.Generator) -> MultiscaleCode:
        return MultiscaleCode.random(self.params.spec, gen)


class DenseOperator:
    """Dense (d, N) matrix with flat codes; the oracle-side twin."""

    def __init__(self, matrix: np.ndarray):
        m = precision.asarray(matrix)
        if m.ndim != 2:
            raise ValueError(f"expected a rank-2 matrix, got shape {m.shape}")
        self.matrix = m

    def apply(self, code: np.ndarray) -> np.ndarray:
        return self.matrix @ code

    def adjoint(self, image: np.ndarray) -> np.ndarray:
        return self.matrix.T @ image

    def zero_code(self, like: np.ndarray) -> np.ndarray:
        return np.zeros(self.matrix.shape[1], dtype=self.matrix.dtype)

    def random_code(self, gen: np.random.Generator) -> np.ndarray:
        return gen.standard_normal(self.matrix.shape[1]).astype(self.matrix.dtype)


def as_operator(op):
    if isinstance(op, DictionaryParams):
        return DictOperator(op)
    if isinstance(op, np.ndarray):
        return DenseOperator(op)
    return op


# ---------------------------------------------------------------------------
# shrinkage


def _weight_list(lam, code: MultiscaleCode) -> list[np.ndarray]:
    """Normalize lam to one broadcastable (C_i, 1, 1) array per scale."""
    if np.isscalar(lam) or (isinstance(lam, np.ndarray) and lam.ndim == 0):
        return [np.full((p.shape[-3], 1, 1), lam, dtype=p.dtype) for p in code.parts]
    out = []
    for part, l in zip(code.parts, lam, strict=True):
        a = np.asarray(l, dtype=part.dtype)
        if a.ndim != 1 or a.shape[0] != part.shape[-3]:
            raise ValueError(f"threshold shape {a.shape} does not match {part.shape[-3]} channels")
        out.append(a.reshape(-1, 1, 1))
    return out


def _shrink_arrays(pre: np.ndarray, t: np.ndarray, mode: ShrinkMode) -> np.ndarray:
    if mode is ShrinkMode.NONNEG:
        return np.maximum(pre - t, 0)
    return np.sign(pre) * np.maximum(np.abs(pre) - t, 0)


def shrink_step(alpha, z, encoder, adjoint, lam, eta: float, mode: ShrinkMode):
    """One proximal gradient step.

    nonneg: relu(alpha + eta * adj(z - enc(alpha)) - eta * lam)
    signed: soft-threshold(alpha + eta * adj(z - enc(alpha)), eta * lam)

    ``encoder``/``adjoint`` may be DictionaryParams, dense matrices or
    operator objects; with tied dictionaries pass the same object twice.
    """
    if eta <= 0:
        raise ValueError(f"step size must be positive, got {eta}")
    mode = ShrinkMode(mode)
    enc = as_operator(encoder)
    adj = as_operator(adjoint)
    resid = z - enc.apply(alpha)
    grad = adj.adjoint(resid)
    if isinstance(alpha, MultiscaleCode):
        weights = _weight_list(lam, alpha)
        parts = [
            _shrink_arrays(a + eta * g, eta * w, mode)
            for a, g, w in zip(alpha.parts, grad.parts, weights, strict=True)
        ]
        return MultiscaleCode(parts)
    return _shrink_arrays(alpha + eta * grad, eta * np.asarray(lam, dtype=alpha.dtype), mode)


def ista_k(z, encoder, lam, eta: float, steps: int, mode: ShrinkMode = ShrinkMode.NONNEG):
    """K iterations of ISTA from a zero code; K = 0 returns the zero code."""
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    enc = as_operator(encoder)
    alpha = enc.zero_code(z)
    for _ in range(steps):
        alpha = shrink_step(alpha, z, enc, enc, lam, eta, mode)
    return alpha


def lista_k(z, encoder, adjoint, lams, eta: float, steps: int, mode: ShrinkMode = ShrinkMode.NONNEG):
    """Unrolled ISTA with an untied adjoint and per-step thresholds.

    ``lams`` is a sequence of length ``steps``; lams[0] is applied first.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if len(lams) != steps:
        raise ValueError(f"got {len(lams)} thresholds for {steps} steps")
    enc = as_operator(encoder)
    adj = as_operator(adjoint)
    alpha = enc.zero_code(z)
    for k in range(steps):
        alpha = shrink_step(alpha, z, enc, adj, lams[k], eta, mode)
    return alpha


def lasso_objective(alpha, z, encoder, lam) -> float:
    """0.5 * ||z - enc(alpha)||^2 + sum of lam-weighted absolute values."""
    enc = as_operator(encoder)
    resid = z - enc.apply(alpha)
    quad = 0.5 * float(np.vdot(resid, resid))
    if isinstance(alpha, MultiscaleCode):
        weights = _weight_list(lam, alpha)
        l1 = sum(float(np.sum(w * np.abs(p))) for w, p in zip(weights, alpha.parts, strict=True))
    else:
        l1 = float(np.sum(np.asarray(lam) * np.abs(alpha)))
    return quad + l1


# ---------------------------------------------------------------------------
# spectral norm estimate


@dataclass(frozen=True)
class SpectralEstimate:
    lam_max: float  # dominant eigenvalue of E^T E
    step_size: float  # 1 / lam_max


def power_iteration(encoder, iters: int = 50, seed: int = 0, start=None) -> SpectralEstimate:
    """Estimate the largest eigenvalue of E^T E by normalized power steps.

    The start vector is a seeded random code unless ``start`` is given;
    a zero start (or a zero operator) raises DegenerateOperatorError because
    the normalization is undefined there.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    enc = as_operator(encoder)
    b = enc.random_code(rng.stream(seed, rng.POWER)) if start is None else start
    nrm = _code_norm(b)
    if nrm == 0:
        raise DegenerateOperatorError("zero start vector")
    b = b * (1.0 / nrm)
    for _ in range(iters):
        c = enc.adjoint(enc.apply(b))
        nrm = _code_norm(c)
        if nrm == 0:
            raise DegenerateOperatorError("power iteration collapsed to zero")
        b = c * (1.0 / nrm)
    image = enc.apply(b)
    lam = float(np.vdot(image, image)) / _code_dot(b, b)
    if lam <= 0:
        raise DegenerateOperatorError(f"nonpositive spectral estimate {lam}")
    return SpectralEstimate(lam_max=lam, step_size=1.0 / lam)


def _code_dot(a, b) -> float:
    if isinstance(a, MultiscaleCode):
        return a.dot(b)
    return float(np.vdot(a, b))


def _code_norm(a) -> float:
    return _code_dot(a, a) ** 0.5


# ---------------------------------------------------------------------------
# oracles (verification only)

ORACLE_MAX_SIZE = (64, 256)


def oracle_lasso(
    z: np.ndarray,
    matrix: np.ndarray,
    lam,
    mode: ShrinkMode = ShrinkMode.NONNEG,
    tol: float = 1e-12,
    max_sweeps: int = 200_000,
) -> np.ndarray:
    """Coordinate descent on the dense lasso; the solver-independent oracle.

    Sweeps coordinates with exact per-coordinate minimization until one full
    sweep decreases the objective by less than ``tol``. Capped at 64 x 256.
    """
    m = np.asarray(matrix, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if m.ndim != 2 or z.shape != (m.shape[0],):
        raise ValueError(f"matrix {m.shape} and target {z.shape} disagree")
    if m.shape[0] > ORACLE_MAX_SIZE[0] or m.shape[1] > ORACLE_MAX_SIZE[1]:
        raise ValueError(f"problem {m.shape} exceeds oracle cap {ORACLE_MAX_SIZE}")
    mode = ShrinkMode(mode)
    n = m.shape[1]
    lam_vec = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    col_sq = np.einsum("ij,ij->j", m, m)
    alpha = np.zeros(n)
    resid = z.copy()

    def objective() -> float:
        return 0.5 * float(resid @ resid) + float(lam_vec @ np.abs(alpha))

    prev = objective()
    for _ in range(max_sweeps):
        for j in range(n):
            if col_sq[j] == 0:
                continue
            old = alpha[j]
            rho = m[:, j] @ resid + col_sq[j] * old
            if mode is ShrinkMode.NONNEG:
                new = max(0.0, (rho - lam_vec[j]) / col_sq[j])
            else:
                new = np.sign(rho) * max(0.0, abs(rho) - lam_vec[j]) / col_sq[j]
            if new != old:
                resid -= (new - old) * m[:, j]
                alpha[j] = new
        cur = objective()
        if prev - cur < tol:
            break
        prev = cur
    return alpha.astype(precision.active_dtype())


def least_norm_solution(matrix: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of M alpha = z for full row rank M (oracle)."""
    m = np.asarray(matrix, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    y = np.linalg.solve(m @ m.T, z)
    return (m.T @ y).astype(precision.active_dtype())
