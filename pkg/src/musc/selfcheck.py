"""Built-in verification: every solver path checked against an independent oracle.

Each check pits a production code path against a second computation that
shares no implementation with it (dense matrix algebra, coordinate descent,
finite differences, eigendecomposition). ``quick`` runs reduced problem
sizes and iteration budgets; ``full`` runs the acceptance-grade versions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import precision, rng
from .data import TaskSpec
from .linops import (
    DictionaryParams,
    MultiscaleCode,
    ScaleSpec,
    dict_adjoint,
    dict_apply,
    materialize,
    tconv_siso,
    tconv_siso_direct,
)
from .model import backward, forward, init_model, loss
from .probe import center_indicator, extract_atom, sparsity_profile
from .sparse import (
    ShrinkMode,
    ista_k,
    lasso_objective,
    least_norm_solution,
    oracle_lasso,
    power_iteration,
    shrink_step,
)

LEVELS = ("quick", "full")


class CheckFailure(AssertionError):
    """A verification check found a violation."""


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _rand_dict(spec: ScaleSpec, seed: int) -> DictionaryParams:
    gen = rng.stream(seed, rng.CHECK)
    dt = precision.active_dtype()
    kmap = {}
    for name, shape in DictionaryParams.kernel_shapes(spec):
        std = 1.0 / (shape[1] * shape[2] * shape[3]) ** 0.5
        kmap[name] = (std * gen.standard_normal(shape)).astype(dt)
    return DictionaryParams.from_named(spec, kmap)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise CheckFailure(message)


def _code_norm64(code: MultiscaleCode) -> float:
    return float(np.sqrt(sum(np.vdot(p.astype(np.float64), p) for p in code.parts)))


# ---------------------------------------------------------------------------
# individual checks


def _check_upsample_kron(level: str) -> str:
    """Strided 2x2 transposed convolution vs its closed Kronecker form."""
    draws = 200 if level == "full" else 60
    gen = rng.stream(7, rng.CHECK)
    dt = precision.active_dtype()
    worst = 0.0
    for t in range(draws):
        n = 2 + t % 7
        xi = gen.standard_normal((n, n)).astype(dt)
        v = gen.standard_normal((2, 2)).astype(dt)
        delta = np.abs(tconv_siso(xi, v) - tconv_siso_direct(xi, v)).max()
        worst = max(worst, float(delta))
    _require(worst <= 1e-6, f"kron form deviates by {worst:.3e} > 1e-6")
    return f"max |delta| {worst:.2e} over {draws} draws, sizes 2..8"


_ADJOINT_SPECS = (
    ScaleSpec(scales=1, channels=4, height=6, width=6),
    ScaleSpec(scales=2, channels=8, height=8, width=8),
    ScaleSpec(scales=3, channels=8, height=4, width=4),
)


def _check_adjoint_identity(level: str) -> str:
    """<D alpha, y> == <alpha, D^T y> on three depths.

    The operators run at the active precision; the two inner products are
    taken in float64 and the violation is normalized by the product of the
    vector norms (the scale whose rounding produces it), so the comparison
    measures operator adjointness rather than cancellation luck when the
    inner products themselves land near zero.
    """
    pairs = 34 if level == "full" else 8
    worst = 0.0
    for k, spec in enumerate(_ADJOINT_SPECS):
        params = _rand_dict(spec, seed=20 + k)
        gen = rng.stream(30 + k, rng.CHECK)
        dt = precision.active_dtype()
        for _ in range(pairs):
            code = MultiscaleCode.random(spec, gen)
            y = gen.standard_normal(spec.image_shape()).astype(dt)
            img = dict_apply(params, code).astype(np.float64)
            lhs = float(np.vdot(img, y))
            back = dict_adjoint(params, y)
            rhs = float(
                sum(
                    np.vdot(a.astype(np.float64), b.astype(np.float64))
                    for a, b in zip(code.parts, back.parts)
                )
            )
            scale = max(
                float(np.linalg.norm(img)) * float(np.linalg.norm(y)),
                _code_norm64(code) * _code_norm64(back),
                1e-12,
            )
            rel = abs(lhs - rhs) / scale
            worst = max(worst, rel)
    _require(worst <= 1e-5, f"adjoint identity off by {worst:.3e} > 1e-5")
    return f"max rel err {worst:.2e} over {pairs * len(_ADJOINT_SPECS)} pairs, 3 depths"


def _check_materialization(level: str) -> str:
    """Operator application vs explicit matrix multiply on a tiny spec."""
    spec = ScaleSpec(scales=2, channels=8, height=3, width=3)
    params = _rand_dict(spec, seed=41)
    mat = materialize(params)
    gen = rng.stream(42, rng.CHECK)
    dt = precision.active_dtype()
    trials = 20 if level == "full" else 5
    worst = 0.0
    for _ in range(trials):
        code = MultiscaleCode.random(spec, gen)
        img = dict_apply(params, code)
        ref = (mat @ code.to_vec()).reshape(spec.image_shape())
        worst = max(worst, float(np.abs(img - ref).max() / max(np.abs(ref).max(), 1e-12)))
        y = gen.standard_normal(spec.image_shape()).astype(dt)
        back = dict_adjoint(params, y).to_vec()
        ref_b = mat.T @ y.ravel()
        worst = max(worst, float(np.abs(back - ref_b).max() / max(np.abs(ref_b).max(), 1e-12)))
    _require(worst <= 1e-5, f"materialization mismatch {worst:.3e} > 1e-5")
    return f"max rel err {worst:.2e}, matrix {mat.shape[0]}x{mat.shape[1]}"


def _check_ista_oracle(level: str) -> str:
    """ISTA on a dense surrogate vs exact coordinate descent, both modes."""
    del level
    with precision.use_dtype(np.float64):
        gen = rng.stream(12, rng.CHECK)
        m = gen.standard_normal((8, 16))
        m /= np.linalg.norm(m, axis=0, keepdims=True)
        z = gen.standard_normal(8)
        eta = 1.0 / float(np.linalg.eigvalsh(m.T @ m).max())
        gaps = []
        for mode in (ShrinkMode.NONNEG, ShrinkMode.SIGNED):
            alpha = ista_k(z, m, 0.1, eta, 1000, mode)
            star = oracle_lasso(z, m, 0.1, mode)
            gap = lasso_objective(alpha, z, m, 0.1) - lasso_objective(star, z, m, 0.1)
            _require(gap <= 1e-6, f"{mode.value}: objective gap {gap:.3e} > 1e-6")
            gaps.append(gap)
    return f"objective gaps {gaps[0]:.2e} / {gaps[1]:.2e} after 1000 steps"


def _check_monotone_descent(level: str) -> str:
    """Objective never increases along ISTA with eta = 1/lambda_max."""
    instances = 20 if level == "full" else 6
    with precision.use_dtype(np.float64):
        gen = rng.stream(13, rng.CHECK)
        for t in range(instances):
            m = gen.standard_normal((12, 20))
            z = gen.standard_normal(12)
            eta = 1.0 / float(np.linalg.eigvalsh(m.T @ m).max())
            mode = ShrinkMode.NONNEG if t % 2 == 0 else ShrinkMode.SIGNED
            alpha = np.zeros(20)
            prev = lasso_objective(alpha, z, m, 0.05)
            for step in range(25):
                alpha = shrink_step(alpha, z, m, m, 0.05, eta, mode)
                cur = lasso_objective(alpha, z, m, 0.05)
                _require(
                    cur <= prev + 1e-10 * max(1.0, abs(prev)),
                    f"instance {t} step {step}: objective rose {prev:.6e} -> {cur:.6e}",
                )
                prev = cur
    return f"non-increasing over {instances} instances x 25 steps"


def _check_least_norm_limit(level: str) -> str:
    """Zero-threshold signed iteration converges to the least-norm solution."""
    steps, tol = (5000, 1e-3) if level == "full" else (1500, 1e-2)
    with precision.use_dtype(np.float64):
        spec = ScaleSpec(scales=2, channels=8, height=2, width=2)
        params = _rand_dict(spec, seed=57)
        mat = materialize(params)
        _require(
            np.linalg.matrix_rank(mat) == mat.shape[0],
            "materialized dictionary lost full row rank",
        )
        gen = rng.stream(58, rng.CHECK)
        code0 = MultiscaleCode.random(spec, gen)
        z = dict_apply(params, code0)
        star = least_norm_solution(mat, z.ravel())
        eta = 1.0 / float(np.linalg.eigvalsh(mat.T @ mat).max())
        alpha = ista_k(z, params, 0.0, eta, steps, ShrinkMode.SIGNED)
        rel = float(np.linalg.norm(alpha.to_vec() - star) / np.linalg.norm(star))
    _require(rel <= tol, f"least-norm limit off by {rel:.3e} > {tol}")
    return f"rel err {rel:.2e} after {steps} zero-threshold steps"


def _check_power_iteration(level: str) -> str:
    """Known 2x2 spectrum exactly; multiscale estimate vs dense eigenvalues."""
    del level
    with precision.use_dtype(np.float64):
        est = power_iteration(np.diag([3.0, 1.0]), iters=60, seed=1)
        _require(abs(est.lam_max - 9.0) <= 1e-6, f"diag(3,1): got {est.lam_max!r}, want 9")
        spec = ScaleSpec(scales=2, channels=8, height=3, width=3)
        params = _rand_dict(spec, seed=61)
        est_m = power_iteration(params, iters=300, seed=2)
        gram = materialize(params)
        oracle = float(np.linalg.eigvalsh(gram.T @ gram).max())
        rel = abs(est_m.lam_max - oracle) / oracle
    _require(rel <= 1e-4, f"multiscale lam_max off by {rel:.3e} > 1e-4")
    return f"diag exact; multiscale rel err {rel:.2e} vs dense eigensolve"


_GRAD_CONFIGS_FULL = (
    (ShrinkMode.NONNEG, True, False, 1),
    (ShrinkMode.SIGNED, True, True, 3),
    (ShrinkMode.NONNEG, False, False, 3),
    (ShrinkMode.SIGNED, False, True, 1),
)
_GRAD_CONFIGS_QUICK = (
    (ShrinkMode.NONNEG, True, False, 1),
    (ShrinkMode.SIGNED, False, True, 1),
)


def finite_difference_grads(model, batch, names=None, samples: int = 4, eps: float = 1e-6, indices=None):
    """Central-difference gradients for sampled entries of each leaf.

    Returns {leaf: [(flat_index, fd_value)]}. Entries are sampled at random
    unless ``indices`` maps leaf names to explicit flat indices. Mutates and
    restores leaves in place, so the model must not be shared across threads.
    """
    gen = rng.stream(97, rng.CHECK)
    out: dict[str, list[tuple[int, float]]] = {}
    frozen = model.frozen_leaves()
    for name, leaf in model.leaves.items():
        if names is not None and name not in names:
            continue
        if name in frozen:
            continue
        if indices is not None:
            idx = np.asarray(indices.get(name, []), dtype=np.int64)
        else:
            idx = gen.choice(leaf.size, size=min(samples, leaf.size), replace=False)
        entries = []
        for i in idx:
            old = leaf.flat[i]
            leaf.flat[i] = old + eps
            hi = loss(model, batch)
            leaf.flat[i] = old - eps
            lo = loss(model, batch)
            leaf.flat[i] = old
            entries.append((int(i), (hi - lo) / (2 * eps)))
        out[name] = entries
    return out


def _check_gradients(level: str) -> str:
    """Reverse-mode gradients vs central finite differences, 64-bit."""
    configs = _GRAD_CONFIGS_FULL if level == "full" else _GRAD_CONFIGS_QUICK
    worst = 0.0
    with precision.use_dtype(np.float64):
        spec = ScaleSpec(scales=2, channels=8, height=3, width=3)
        gen = rng.stream(71, rng.CHECK)
        z = 0.5 * gen.standard_normal((2,) + spec.image_shape())
        x = 0.5 * gen.standard_normal((2,) + spec.image_shape())
        batch = (z, x)
        for mode, wn, tied, k in configs:
            m = init_model(
                spec,
                steps=k,
                mode=mode,
                tie_dicts=tied,
                weight_norm=wn,
                seed=5,
                power_iters=30,
            )
            grads = backward(m, forward(m, z).tape, batch)
            # probe each leaf at its largest-magnitude gradient entries:
            # near-zero entries sit at the finite-difference noise floor
            # and compare noise against noise
            frozen = m.frozen_leaves()
            picks = {
                name: np.argsort(np.abs(g.ravel()))[-3:].tolist()
                for name, g in grads.items()
                if name not in frozen
            }
            fd = finite_difference_grads(m, batch, eps=1e-5, indices=picks)
            for name, entries in fd.items():
                for i, fd_val in entries:
                    g = float(grads[name].flat[i])
                    rel = abs(g - fd_val) / max(abs(g), abs(fd_val), 1e-6)
                    _require(
                        rel <= 1e-4,
                        f"mode={mode.value} wn={wn} tied={tied} K={k} "
                        f"leaf {name}[{i}]: grad {g:.6e} vs fd {fd_val:.6e}",
                    )
                    worst = max(worst, rel)
    return f"max rel err {worst:.2e} across {len(configs)} configs, all leaf classes"


def _check_probing(level: str) -> str:
    """Atom supports behave; short training run stays sparse (full only)."""
    spec = ScaleSpec(scales=2, channels=8, height=6, width=6)
    params = _rand_dict(spec, seed=83)
    sides = []
    for scale in range(spec.scales, -1, -1):
        _, side = extract_atom(params, center_indicator(spec, scale, 0))
        sides.append(side)
    _require(sides[0] <= 3, f"finest-scale atom support {sides[0]} > 3")
    for a, b in zip(sides, sides[1:]):
        _require(a <= b, f"support shrank toward coarser scale: {sides}")
    detail = f"supports fine->coarse {sides}"
    if level == "full":
        from .training import TrainConfig, train_loop

        cfg = TrainConfig(
            spec=ScaleSpec(scales=2, channels=8, height=4, width=4),
            task=TaskSpec(task="streaks", size=16, n_train=48, n_val=8, n_test=8, seed=1),
            steps=250,
            k_steps=5,
            batch_size=8,
            eval_interval=50,
        )
        result = train_loop(cfg)
        report = sparsity_profile(result.model, result.data["val"].corrupted)
        _require(report.overall < 0.5, f"trained code density {report.overall:.3f} >= 0.5")
        detail += f"; trained density {report.overall:.3f}"
    return detail


CHECKS: list[tuple[str, Callable[[str], str]]] = [
    ("upsample_kron_equivalence", _check_upsample_kron),
    ("dictionary_adjoint_identity", _check_adjoint_identity),
    ("materialized_matrix_equivalence", _check_materialization),
    ("ista_vs_coordinate_descent", _check_ista_oracle),
    ("ista_monotone_descent", _check_monotone_descent),
    ("zero_threshold_least_norm_limit", _check_least_norm_limit),
    ("power_iteration_spectrum", _check_power_iteration),
    ("gradient_finite_difference", _check_gradients),
    ("atom_support_and_sparsity", _check_probing),
]


def run_selfcheck(level: str = "quick", report: Callable[[CheckResult], None] | None = None):
    """Run every check at the given level; returns the list of results.

    ``report`` is called with each result as it lands, for streaming output.
    Unexpected exceptions inside a check are recorded as failures rather
    than aborting the suite.
    """
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            detail = fn(level)
            passed = True
        except CheckFailure as exc:
            detail = str(exc)
            passed = False
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            detail = f"crashed: {exc!r}"
            passed = False
        res = CheckResult(name, passed, detail, time.perf_counter() - t0)
        if report is not None:
            report(res)
        results.append(res)
    return results
