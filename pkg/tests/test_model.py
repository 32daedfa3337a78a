"""Unrolled model: forward/backward, optimizers, checkpoints, reparametrization."""

import numpy as np
import pytest

from musc import precision
from musc.linops import MultiscaleCode, ScaleSpec, dict_adjoint, materialize
from musc.model import (
    AdamState,
    CheckpointFormatError,
    ModelParams,
    NonFiniteGradientError,
    StaleTapeError,
    adam_step,
    backward,
    expected_leaf_names,
    forward,
    init_model,
    load_checkpoint,
    loss,
    save_checkpoint,
    sgd_step,
)
from musc.rng import CHECK, stream
from musc.sparse import ShrinkMode, lista_k

SPEC = ScaleSpec(scales=2, channels=8, height=3, width=3)


def make_batch(spec, n=2, seed=0):
    gen = stream(seed, CHECK)
    shape = (n,) + spec.image_shape()
    x = gen.standard_normal(shape).astype(np.float32)
    z = x + 0.1 * gen.standard_normal(shape).astype(np.float32)
    return z, x


# ---------------------------------------------------------------------------
# construction


def test_init_is_deterministic_per_seed():
    a = init_model(SPEC, seed=7)
    b = init_model(SPEC, seed=7)
    assert a.leaves.keys() == b.leaves.keys()
    for name in a.leaves:
        np.testing.assert_array_equal(a.leaves[name], b.leaves[name])
    c = init_model(SPEC, seed=8)
    assert any(not np.array_equal(a.leaves[n], c.leaves[n]) for n in a.leaves if n != "eta")


@pytest.mark.parametrize("tie", [False, True])
@pytest.mark.parametrize("wn", [False, True])
def test_leaf_inventory_matches_contract(tie, wn):
    m = init_model(SPEC, steps=3, tie_dicts=tie, weight_norm=wn)
    assert set(m.leaves) == expected_leaf_names(SPEC, 3, tie, wn)


def test_init_adjoint_and_decoder_start_as_encoder_copies():
    m = init_model(SPEC, steps=2)
    adj = dict(m.dict_params("adj").named_kernels())
    dec = dict(m.dict_params("dec").named_kernels())
    for name, enc_k in m.dict_params("enc").named_kernels():
        np.testing.assert_array_equal(adj[name], enc_k)
        np.testing.assert_array_equal(dec[name], enc_k)


def test_init_validation():
    with pytest.raises(ValueError, match="steps"):
        init_model(SPEC, steps=-1)
    with pytest.raises(ValueError, match="floor"):
        init_model(SPEC, lambda_init=0.0)


def test_effective_thresholds_start_at_lambda_init():
    m = init_model(SPEC, steps=4, lambda_init=0.2)
    for k in range(4):
        for arr in m.lambda_eff(k):
            np.testing.assert_allclose(arr, 0.2, atol=1e-7)


def test_role_prefix_contract():
    m = init_model(SPEC, steps=1, tie_dicts=True)
    assert m.role_prefix("enc") == m.role_prefix("dec") == "dict"
    with pytest.raises(ValueError, match="unknown role"):
        m.role_prefix("oops")


# ---------------------------------------------------------------------------
# forward pass


def test_forward_matches_generic_unroll():
    m = init_model(SPEC, steps=3, seed=1)
    z, _ = make_batch(SPEC, n=1)
    state = forward(m, z[0])
    lams = [m.lambda_eff(k) for k in range(m.steps)]
    ref = lista_k(z[0], m.dict_params("enc"), m.dict_params("adj"), lams, m.eta, 3, m.mode)
    for a, b in zip(state.code.parts, ref.parts):
        np.testing.assert_array_equal(a, b)


def test_forward_matches_dense_recursion():
    spec = ScaleSpec(scales=1, channels=2, height=3, width=3)
    with precision.use_dtype(np.float64):
        m = init_model(spec, steps=4, seed=2, mode=ShrinkMode.SIGNED)
        enc = materialize(m.dict_params("enc"))
        adj = materialize(m.dict_params("adj"))
        z, _ = make_batch(spec, n=1, seed=3)
        z64 = z[0].astype(np.float64)
        alpha = np.zeros(spec.code_dim())
        template = MultiscaleCode.zeros(spec)
        for k in range(4):
            lam_vec = np.concatenate(
                [
                    np.broadcast_to(np.asarray(w).reshape(-1, 1, 1), p.shape).ravel()
                    for w, p in zip(m.lambda_eff(k), template.parts)
                ]
            )
            pre = alpha + m.eta * adj.T @ (z64.ravel() - enc @ alpha)
            alpha = np.sign(pre) * np.maximum(np.abs(pre) - m.eta * lam_vec, 0)
        got = forward(m, z64.astype(np.float64)).code.to_vec()
        np.testing.assert_allclose(got, alpha, atol=1e-10)


def test_huge_threshold_silences_the_code():
    m = init_model(SPEC, steps=3, lambda_init=1e6)
    z, _ = make_batch(SPEC)
    state = forward(m, z)
    assert state.code.count_nonzero() == 0
    assert not state.prediction.any()


def test_single_step_closed_form():
    m = init_model(SPEC, steps=1, seed=4)
    z, _ = make_batch(SPEC, n=1, seed=5)
    state = forward(m, z[0])
    back = dict_adjoint(m.dict_params("adj"), z[0])
    for part, g, w in zip(state.code.parts, back.parts, m.lambda_eff(0)):
        expect = np.maximum(m.eta * g - m.eta * w.reshape(-1, 1, 1), 0)
        np.testing.assert_allclose(part, expect, atol=1e-7)


def test_forward_shape_validation():
    m = init_model(SPEC, steps=1)
    with pytest.raises(ValueError, match="rank-3"):
        forward(m, np.zeros(5, np.float32))
    with pytest.raises(ValueError, match="does not match"):
        forward(m, np.zeros((1, 4, 4), np.float32))


def test_unbatched_forward_equals_batch_member():
    m = init_model(SPEC, steps=2, seed=6)
    z, _ = make_batch(SPEC, n=3, seed=7)
    batched = forward(m, z)
    single = forward(m, z[1])
    np.testing.assert_array_equal(single.prediction, batched.prediction[1])
    for a, b in zip(single.code.parts, batched.code.parts):
        np.testing.assert_array_equal(a, b[1])


# ---------------------------------------------------------------------------
# gradients


def test_backward_matches_finite_differences():
    from musc.selfcheck import finite_difference_grads

    spec = ScaleSpec(scales=1, channels=2, height=3, width=3)
    with precision.use_dtype(np.float64):
        m = init_model(spec, steps=2, seed=8)
        batch = make_batch(spec, n=2, seed=9)
        state = forward(m, batch[0])
        grads = backward(m, state.tape, batch)
        fd = finite_difference_grads(m, batch, samples=3)
        for name, pairs in fd.items():
            for idx, want in pairs:
                got = grads[name].flat[idx]
                rel = abs(got - want) / max(abs(got), abs(want), 1e-6)
                assert rel <= 1e-4, (name, idx, got, want)


def test_frozen_leaves_get_zero_grads_and_no_updates():
    m = init_model(SPEC, steps=2, learn_lambda=False, learn_eta=False, seed=10)
    batch = make_batch(SPEC, seed=11)
    state = forward(m, batch[0])
    grads = backward(m, state.tape, batch)
    frozen = m.frozen_leaves()
    assert "eta" in frozen and any(n.startswith("lam.") for n in frozen)
    for name in frozen:
        assert not grads[name].any()
    before = {n: m.leaves[n].copy() for n in frozen}
    opt = AdamState.init(m, lr=0.1)
    adam_step(m, grads, opt)
    for name in frozen:
        np.testing.assert_array_equal(m.leaves[name], before[name])


def test_stale_tape_is_rejected():
    m = init_model(SPEC, steps=1, seed=12)
    batch = make_batch(SPEC, seed=13)
    state = forward(m, batch[0])
    other = (batch[0] + 1, batch[1])
    with pytest.raises(StaleTapeError, match="different batch"):
        backward(m, state.tape, other)
    m.bump()
    with pytest.raises(StaleTapeError, match="version"):
        backward(m, state.tape, batch)


def test_loss_hand_value():
    m = init_model(SPEC, steps=0, seed=14)
    z, _ = make_batch(SPEC, n=2)
    # zero unroll steps produce a zero prediction, so the loss is the
    # mean squared clean-image energy
    x = np.ones((2,) + SPEC.image_shape(), dtype=np.float32)
    want = 0.5 * x[0].size
    assert loss(m, (z, x)) == pytest.approx(want, rel=1e-6)
    with pytest.raises(ValueError, match="disagree"):
        loss(m, (z, x[:1]))


# ---------------------------------------------------------------------------
# optimizers


def test_adam_first_step_is_signed_lr():
    m = init_model(SPEC, steps=1, seed=15)
    opt = AdamState.init(m, lr=1e-3)
    grads = {n: np.ones_like(v) for n, v in m.leaves.items()}
    before = {n: v.copy() for n, v in m.leaves.items()}
    version = m.version
    adam_step(m, grads, opt)
    assert m.version == version + 1
    moved = m.leaves["enc.head.u"]
    np.testing.assert_allclose(before["enc.head.u"] - moved, 1e-3, rtol=1e-5)


def test_sgd_step_is_plain_descent():
    m = init_model(SPEC, steps=1, seed=16)
    grads = {n: np.full_like(v, 2.0) for n, v in m.leaves.items()}
    before = {n: v.copy() for n, v in m.leaves.items()}
    sgd_step(m, grads, lr=0.25)
    np.testing.assert_allclose(before["eta"] - m.leaves["eta"], 0.5, rtol=1e-6)


def test_non_finite_gradients_refuse_to_apply():
    m = init_model(SPEC, steps=1, seed=17)
    grads = {n: np.zeros_like(v) for n, v in m.leaves.items()}
    grads["eta"] = np.array([np.nan], dtype=np.float32)
    with pytest.raises(NonFiniteGradientError, match="eta"):
        adam_step(m, grads, AdamState.init(m, lr=0.1))


def test_training_step_descends_on_a_fixed_batch():
    m = init_model(SPEC, steps=3, seed=18)
    batch = make_batch(SPEC, n=4, seed=19)
    opt = AdamState.init(m, lr=1e-3)
    first = loss(m, batch)
    for _ in range(25):
        state = forward(m, batch[0])
        grads = backward(m, state.tape, batch)
        adam_step(m, grads, opt)
    assert loss(m, batch) < first


# ---------------------------------------------------------------------------
# reparametrization


def test_weight_norm_direction_rescale_is_invisible():
    m = init_model(SPEC, steps=2, seed=20)
    z, _ = make_batch(SPEC, n=1, seed=21)
    base = forward(m, z).prediction
    for name in list(m.leaves):
        if name.endswith(".u"):
            m.leaves[name] *= 3.0
    m.bump()
    np.testing.assert_allclose(forward(m, z).prediction, base, rtol=1e-4, atol=1e-6)


def test_effective_kernel_norm_equals_gain():
    m = init_model(SPEC, steps=1, seed=22)
    for role in ("enc", "adj", "dec"):
        for name, k in m.dict_params(role).named_kernels():
            g = float(m.leaves[f"{role}.{name}.g"][0])
            assert np.linalg.norm(k) == pytest.approx(abs(g), rel=1e-5)


def test_tied_model_shares_one_dictionary():
    m = init_model(SPEC, steps=2, tie_dicts=True, seed=23)
    enc = dict(m.dict_params("enc").named_kernels())
    adj = dict(m.dict_params("adj").named_kernels())
    dec = dict(m.dict_params("dec").named_kernels())
    for name in enc:
        np.testing.assert_array_equal(enc[name], adj[name])
        np.testing.assert_array_equal(enc[name], dec[name])
    assert sum(1 for n in m.leaves if n.startswith("dict.")) > 0
    assert not any(n.startswith("enc.") for n in m.leaves)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    m = init_model(SPEC, steps=3, mode=ShrinkMode.SIGNED, tie_dicts=False, seed=24)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.spec == m.spec
    assert back.steps == m.steps
    assert back.mode is m.mode
    assert (back.tie_dicts, back.learn_lambda, back.learn_eta, back.weight_norm) == (
        m.tie_dicts,
        m.learn_lambda,
        m.learn_eta,
        m.weight_norm,
    )
    assert back.leaves.keys() == m.leaves.keys()
    for n in m.leaves:
        np.testing.assert_array_equal(back.leaves[n], m.leaves[n])
    z, _ = make_batch(SPEC, n=1, seed=25)
    np.testing.assert_array_equal(forward(back, z).prediction, forward(m, z).prediction)


def test_checkpoint_rejects_corruption(tmp_path):
    m = init_model(SPEC, steps=1, seed=26)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    blob = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad)


def test_clone_is_independent():
    m = init_model(SPEC, steps=1, seed=27)
    c = m.clone()
    c.leaves["eta"][0] = 123.0
    assert m.leaves["eta"][0] != 123.0
