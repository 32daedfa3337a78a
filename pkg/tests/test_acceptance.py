"""Formal acceptance gate.

Each test pins one verifiable claim about the library with its tolerance and
a wall-clock budget. The end-to-end trainings (toy task, ablation grid) are
the expensive part; they run once as session fixtures and are shared.
"""

import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from musc import precision
from musc.data import TaskSpec, gen_corpus, input_psnr
from musc.linops import (
    DictionaryParams,
    MultiscaleCode,
    ScaleSpec,
    dict_adjoint,
    dict_apply,
    materialize,
    tconv_siso,
    tconv_siso_direct,
)
from musc.model import init_model
from musc.probe import center_indicator, extract_atom, sparsity_profile
from musc.rng import CHECK, stream
from musc.selfcheck import finite_difference_grads
from musc.sparse import (
    ShrinkMode,
    ista_k,
    lasso_objective,
    least_norm_solution,
    oracle_lasso,
    power_iteration,
    shrink_step,
)
from musc.training import TrainConfig, train_loop

TOY_TASK = TaskSpec(task="streaks", size=32, n_train=200, n_val=32, n_test=32, seed=0)
TOY_SPEC = ScaleSpec(scales=2, channels=16, height=8, width=8)


def rand_dict(spec, seed=0, dtype=np.float32):
    # fan-scaled draws, the same convention model init uses; unit-variance
    # kernels condition the cascade badly enough to drown the tolerances
    gen = stream(seed, CHECK)
    kmap = {}
    for name, shape in DictionaryParams.kernel_shapes(spec):
        std = 1.0 / (shape[1] * shape[2] * shape[3]) ** 0.5
        kmap[name] = (std * gen.standard_normal(shape)).astype(dtype)
    return DictionaryParams.from_named(spec, kmap)


def toy_config(**overrides):
    base = dict(spec=TOY_SPEC, task=TOY_TASK, steps=2000, k_steps=5, eval_interval=100)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def toy_corpus():
    return gen_corpus(TOY_TASK)


@pytest.fixture(scope="session")
def toy_runs(toy_corpus):
    """The pinned toy training, executed twice for the reproducibility check."""
    runs = []
    for i in range(2):
        print(f"\n[toy training run {i + 1}/2, 2000 steps]", file=sys.stderr, flush=True)
        t0 = time.perf_counter()
        result = train_loop(toy_config(), data=toy_corpus)
        runs.append((result, time.perf_counter() - t0))
    return runs


@pytest.fixture(scope="session")
def ablation_losses(toy_corpus, toy_runs):
    """Final validation loss for {default, tied, fixed-threshold} x 3 seeds.

    The default/seed-0 cell reuses the toy training run.
    """
    from musc.training import dataset_loss

    variants = {"default": {}, "tied": {"tie_dicts": True}, "fixed": {"learn_lambda": False}}
    losses: dict[tuple[str, int], float] = {}
    for name, overrides in variants.items():
        for seed in (0, 1, 2):
            if name == "default" and seed == 0:
                losses[(name, seed)] = dataset_loss(toy_runs[0][0].model, toy_corpus["val"])
                continue
            print(f"\n[ablation {name} seed {seed}]", file=sys.stderr, flush=True)
            r = train_loop(toy_config(seed=seed, **overrides), data=toy_corpus)
            losses[(name, seed)] = dataset_loss(r.model, toy_corpus["val"])
    return losses


# --- 1 -----------------------------------------------------------------


def test_transposed_convolution_equals_kronecker_form():
    """200 random draws, sizes 2..8, 32-bit, max |delta| <= 1e-6, < 1 s."""
    t0 = time.perf_counter()
    gen = stream(1, CHECK)
    worst = 0.0
    for _ in range(200):
        n = int(gen.integers(2, 9))
        xi = gen.standard_normal((n, n)).astype(np.float32)
        v = gen.standard_normal((2, 2)).astype(np.float32)
        kron = np.kron(xi, v[::-1, ::-1])
        worst = max(worst, float(np.abs(tconv_siso(xi, v) - kron).max()))
        worst = max(worst, float(np.abs(tconv_siso_direct(xi, v) - kron).max()))
    assert worst <= 1e-6
    assert time.perf_counter() - t0 < 1.0


# --- 2 -----------------------------------------------------------------


def test_synthesis_adjoint_identity():
    """100 random pairs across depths 1..3, relative error <= 1e-5, < 10 s."""
    t0 = time.perf_counter()
    specs = [
        (ScaleSpec(scales=1, channels=4, height=6, width=6), 34),
        (ScaleSpec(scales=2, channels=8, height=8, width=8), 33),
        (ScaleSpec(scales=3, channels=8, height=4, width=4), 33),
    ]
    worst = 0.0
    for si, (spec, pairs) in enumerate(specs):
        params = rand_dict(spec, seed=40 + si)
        gen = stream(45 + si, CHECK)
        for _ in range(pairs):
            code = MultiscaleCode.random(spec, gen)
            y = gen.standard_normal(spec.image_shape()).astype(np.float32)
            img = dict_apply(params, code).astype(np.float64)
            lhs = float(np.vdot(img, y))
            back = dict_adjoint(params, y)
            rhs = float(
                sum(np.vdot(a.astype(np.float64), b) for a, b in zip(code.parts, back.parts))
            )
            # normalize the violation by the scale of the computation, not by
            # the inner products themselves, which can land near zero by
            # cancellation for random pairs
            def nrm(parts):
                return float(np.sqrt(sum(np.vdot(p.astype(np.float64), p) for p in parts)))

            scale = max(
                float(np.linalg.norm(img)) * float(np.linalg.norm(y)),
                nrm(code.parts) * nrm(back.parts),
                1e-12,
            )
            worst = max(worst, abs(lhs - rhs) / scale)
    assert worst <= 1e-5
    assert time.perf_counter() - t0 < 10.0


# --- 3 -----------------------------------------------------------------


def test_operators_match_materialized_matrix():
    """Apply/adjoint equal explicit matrix products, <= 1e-5 relative, < 10 s."""
    t0 = time.perf_counter()
    spec = ScaleSpec(scales=2, channels=8, height=3, width=3)
    assert spec.code_dim() <= 1024
    params = rand_dict(spec, seed=30)
    mat = materialize(params).astype(np.float64)
    gen = stream(31, CHECK)
    worst = 0.0
    for _ in range(20):
        code = MultiscaleCode.random(spec, gen)
        got = dict_apply(params, code).ravel().astype(np.float64)
        want = mat @ code.to_vec()
        worst = max(worst, float(np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12)))
        y = gen.standard_normal(spec.image_shape()).astype(np.float32)
        got = dict_adjoint(params, y).to_vec().astype(np.float64)
        want = mat.T @ y.ravel()
        worst = max(worst, float(np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12)))
    assert worst <= 1e-5
    assert time.perf_counter() - t0 < 10.0


# --- 4 -----------------------------------------------------------------


def test_ista_matches_coordinate_descent_oracle():
    """Dense 8x16 problem, lam=0.1, both modes, objective gap <= 1e-6, < 5 s."""
    t0 = time.perf_counter()
    with precision.use_dtype(np.float64):
        gen = stream(12, CHECK)
        m = gen.standard_normal((8, 16))
        m /= np.linalg.norm(m, axis=0)
        z = gen.standard_normal(8)
        eta = 1.0 / float(np.linalg.eigvalsh(m.T @ m).max())
        for mode in ShrinkMode:
            alpha = ista_k(z, m, 0.1, eta, steps=1000, mode=mode)
            ref = oracle_lasso(z, m, 0.1, mode=mode)
            gap = lasso_objective(alpha, z, m, 0.1) - lasso_objective(ref, z, m, 0.1)
            assert gap <= 1e-6, mode
    assert time.perf_counter() - t0 < 5.0


# --- 5 -----------------------------------------------------------------


def test_objective_descends_monotonically():
    """20 random instances, every step non-increasing, < 5 s."""
    t0 = time.perf_counter()
    with precision.use_dtype(np.float64):
        for seed in range(20):
            gen = stream(50 + seed, CHECK)
            m = gen.standard_normal((12, 20))
            z = gen.standard_normal(12)
            eta = 1.0 / float(np.linalg.eigvalsh(m.T @ m).max())
            alpha = np.zeros(20)
            prev = lasso_objective(alpha, z, m, 0.1)
            for _ in range(25):
                alpha = shrink_step(alpha, z, m, m, 0.1, eta, ShrinkMode.NONNEG)
                cur = lasso_objective(alpha, z, m, 0.1)
                assert cur <= prev + 1e-10 * max(1.0, abs(prev))
                prev = cur
    assert time.perf_counter() - t0 < 5.0


# --- 6 -----------------------------------------------------------------


def test_zero_threshold_limit_is_least_norm():
    """Signed mode, lam=0, K=5000: within 1e-3 relative of the oracle, < 30 s."""
    t0 = time.perf_counter()
    with precision.use_dtype(np.float64):
        spec = ScaleSpec(scales=2, channels=8, height=2, width=2)
        params = rand_dict(spec, seed=60, dtype=np.float64)
        mat = materialize(params)
        assert np.linalg.matrix_rank(mat) == mat.shape[0]
        gen = stream(61, CHECK)
        target = MultiscaleCode.random(spec, gen)
        z = dict_apply(params, target)
        eta = 1.0 / float(np.linalg.eigvalsh(mat.T @ mat).max())
        alpha = ista_k(z, params, 0.0, eta, steps=5000, mode=ShrinkMode.SIGNED)
        ref = least_norm_solution(mat, z.ravel())
        rel = float(np.linalg.norm(alpha.to_vec() - ref) / np.linalg.norm(ref))
        assert rel <= 1e-3
    assert time.perf_counter() - t0 < 30.0


# --- 7 -----------------------------------------------------------------


def test_power_iteration_spectrum():
    """diag(3,1) gives 9 within 1e-6; multiscale matches dense within 1e-4, < 5 s."""
    t0 = time.perf_counter()
    est = power_iteration(np.diag([3.0, 1.0]).astype(np.float32), iters=60)
    assert abs(est.lam_max - 9.0) <= 1e-6
    spec = ScaleSpec(scales=2, channels=8, height=3, width=3)
    params = rand_dict(spec, seed=70)
    mat = materialize(params).astype(np.float64)
    truth = float(np.linalg.eigvalsh(mat.T @ mat).max())
    est = power_iteration(params, iters=300, seed=1)
    assert abs(est.lam_max - truth) / truth <= 1e-4
    assert time.perf_counter() - t0 < 5.0


# --- 8 -----------------------------------------------------------------


def test_gradients_match_finite_differences():
    """64-bit, K in {1, 3}, every leaf class, relative error <= 1e-4, < 60 s."""
    t0 = time.perf_counter()
    spec = ScaleSpec(scales=2, channels=8, height=3, width=3)
    configs = [
        dict(steps=1, weight_norm=True, tie_dicts=False, mode=ShrinkMode.NONNEG),
        dict(steps=3, weight_norm=True, tie_dicts=False, mode=ShrinkMode.SIGNED),
        dict(steps=1, weight_norm=False, tie_dicts=True, mode=ShrinkMode.SIGNED),
        dict(steps=3, weight_norm=False, tie_dicts=False, mode=ShrinkMode.NONNEG),
    ]
    with precision.use_dtype(np.float64):
        from musc.model import backward, forward

        for ci, kw in enumerate(configs):
            model = init_model(spec, seed=80 + ci, **kw)
            gen = stream(81 + ci, CHECK)
            x = gen.standard_normal((2,) + spec.image_shape())
            z = x + 0.1 * gen.standard_normal(x.shape)
            state = forward(model, z)
            grads = backward(model, state.tape, (z, x))
            # probe where the analytic gradient is largest; entries near zero
            # sit below the finite-difference noise floor
            picks = {
                name: np.argsort(np.abs(g.ravel()))[-3:].tolist()
                for name, g in grads.items()
                if name not in model.frozen_leaves()
            }
            fd = finite_difference_grads(model, (z, x), eps=1e-5, indices=picks)
            classes = set()
            for name, pairs in fd.items():
                classes.add(name.split(".")[0] if not name.endswith((".g", ".u")) else name[-1])
                for idx, want in pairs:
                    got = grads[name].flat[idx]
                    rel = abs(got - want) / max(abs(got), abs(want), 1e-6)
                    assert rel <= 1e-4, (kw, name, idx, got, want)
            assert "lam" in classes and "eta" in classes
    assert time.perf_counter() - t0 < 60.0


# --- 9 -----------------------------------------------------------------


def test_toy_training_beats_baseline_and_reproduces(toy_corpus, toy_runs):
    """Streaks 32x32, 2000 steps, seed 0: >= baseline + 2 dB, bitwise stable, < 15 min."""
    baseline = input_psnr(toy_corpus["val"])
    (r1, t1), (r2, t2) = toy_runs
    final = r1.metrics[-1].val_psnr
    assert final >= baseline + 2.0, (final, baseline)
    traj1 = [(row.step, row.loss) for row in r1.metrics]
    traj2 = [(row.step, row.loss) for row in r2.metrics]
    assert traj1 == traj2  # bitwise-identical loss trajectory
    assert t1 < 900 and t2 < 900


# --- 10 ----------------------------------------------------------------


def test_ablation_orderings_hold_in_the_median(ablation_losses):
    """Median over 3 seeds: untied <= tied and learnable <= fixed thresholds, < 1 h."""
    med = {
        name: statistics.median(ablation_losses[(name, s)] for s in (0, 1, 2))
        for name in ("default", "tied", "fixed")
    }
    detail = {k: round(v, 4) for k, v in sorted(ablation_losses.items())}
    assert med["default"] <= med["tied"], (med, detail)
    assert med["default"] <= med["fixed"], (med, detail)


# --- 11 ----------------------------------------------------------------


def test_trained_model_atoms_and_code_density(toy_runs):
    """Finest atoms fit 3x3, support grows coarser, density < 0.5, < 1 min."""
    t0 = time.perf_counter()
    model = toy_runs[0][0].model
    dec = model.dict_params("dec")
    spec = dec.spec
    per_scale_max = []
    for scale in range(spec.scales, -1, -1):
        sup = 0
        for ch in range(spec.channels_at(scale)):
            _, s = extract_atom(dec, center_indicator(spec, scale, ch))
            sup = max(sup, s)
        per_scale_max.append(sup)
    assert per_scale_max[0] <= 3, per_scale_max
    assert per_scale_max == sorted(per_scale_max), per_scale_max
    report = sparsity_profile(model, toy_runs[0][0].data["val"].corrupted)
    assert report.eps == 1e-8
    assert report.overall < 0.5, report
    assert time.perf_counter() - t0 < 60.0


# --- 12 ----------------------------------------------------------------


def test_full_selfcheck_passes_via_cli():
    """`musc selfcheck --level full` exits 0 with every check PASS."""
    r = subprocess.run(
        [sys.executable, "-m", "musc", "selfcheck", "--level", "full"],
        capture_output=True,
        text=True,
        timeout=600,
    )
    assert r.returncode == 0, r.stdout + r.stderr
    lines = [ln for ln in r.stdout.strip().split("\n") if ln]
    assert len(lines) >= 9
    assert all(ln.split("\t")[1] == "PASS" for ln in lines), r.stdout
