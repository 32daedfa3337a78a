"""Synthetic corpus generation, image metrics, on-disk corpus format."""

import math

import numpy as np
import pytest

from musc.data import (
    SampleSet,
    TaskSpec,
    gen_corpus,
    input_psnr,
    load_corpus,
    mean_psnr,
    nmse,
    psnr,
    psnr_fr,
    sample_pair,
    save_corpus,
)

SMALL = dict(size=16, n_train=4, n_val=2, n_test=2)


# ---------------------------------------------------------------------------
# task spec validation


def test_task_spec_rejects_bad_values():
    with pytest.raises(ValueError, match="unknown task"):
        TaskSpec(task="sharpen")
    with pytest.raises(ValueError, match="too small"):
        TaskSpec(size=2)
    with pytest.raises(ValueError, match="at least one"):
        TaskSpec(n_val=0, **{k: v for k, v in SMALL.items() if k != "n_val"})
    with pytest.raises(ValueError, match="nonnegative"):
        TaskSpec(sigma=-0.1)
    with pytest.raises(ValueError, match="divide"):
        TaskSpec(size=30, blur_factor=4)


# ---------------------------------------------------------------------------
# determinism and structure


def test_sampling_is_deterministic():
    spec = TaskSpec(task="streaks", **SMALL)
    z1, x1 = sample_pair(spec, "train", 3)
    z2, x2 = sample_pair(spec, "train", 3)
    np.testing.assert_array_equal(z1, z2)
    np.testing.assert_array_equal(x1, x2)
    z3, _ = sample_pair(spec, "val", 3)
    assert not np.array_equal(z1, z3)
    z4, _ = sample_pair(spec, "train", 4)
    assert not np.array_equal(z1, z4)


def test_seed_changes_everything():
    a = TaskSpec(task="gauss", **SMALL)
    b = TaskSpec(task="gauss", seed=1, **SMALL)
    za, xa = sample_pair(a, "train", 0)
    zb, xb = sample_pair(b, "train", 0)
    assert not np.array_equal(xa, xb)
    assert not np.array_equal(za, zb)


def test_corpus_shapes_and_split_sizes():
    spec = TaskSpec(task="streaks", **SMALL)
    data = gen_corpus(spec)
    assert set(data) == {"train", "val", "test"}
    assert len(data["train"]) == 4
    assert len(data["val"]) == 2
    assert data["train"].corrupted.shape == (4, 1, 16, 16)
    assert data["train"].clean.shape == (4, 1, 16, 16)
    assert data["train"].corrupted.dtype == np.float32
    # gen_corpus rows must equal their pointwise counterparts
    z, x = sample_pair(spec, "test", 1)
    np.testing.assert_array_equal(data["test"].corrupted[1, 0], z)
    np.testing.assert_array_equal(data["test"].clean[1, 0], x)


def test_noiseless_settings_copy_the_clean_image():
    spec = TaskSpec(task="gauss", sigma=0.0, **SMALL)
    z, x = sample_pair(spec, "train", 0)
    np.testing.assert_array_equal(z, x)
    spec = TaskSpec(task="streaks", streak_count=0, **SMALL)
    z, x = sample_pair(spec, "train", 0)
    np.testing.assert_array_equal(z, x)


def test_streaks_only_brighten_pixels():
    spec = TaskSpec(task="streaks", **SMALL)
    data = gen_corpus(spec)
    diff = data["train"].corrupted - data["train"].clean
    assert diff.min() >= -1e-6
    assert diff.max() > 0


def test_clean_images_are_in_unit_range():
    spec = TaskSpec(task="blur", size=16, n_train=8, n_val=1, n_test=1)
    data = gen_corpus(spec)
    x = data["train"].clean
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_gauss_noise_psnr_concentrates():
    # sigma 0.1 on a unit-range image gives PSNR near -20 log10(sigma) = 20 dB
    spec = TaskSpec(task="gauss", sigma=0.1, size=32, n_train=16, n_val=1, n_test=1)
    base = input_psnr(gen_corpus(spec)["train"])
    assert 18.0 <= base <= 23.0


# ---------------------------------------------------------------------------
# metrics


def test_psnr_hand_values():
    ref = np.zeros((4, 4))
    ref[0, 0] = 1.0  # range exactly 1
    pred = ref + 0.1
    assert psnr(pred, ref) == pytest.approx(20.0, abs=1e-9)
    assert psnr(ref + 0.01, ref) == pytest.approx(40.0, abs=1e-9)
    assert psnr(ref, ref) == math.inf


def test_psnr_uses_reference_range():
    ref = np.zeros((4, 4))
    ref[0, 0] = 2.0
    # same MSE, doubled range: +20 log10(2) versus the unit-range case
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0 + 20 * math.log10(2), abs=1e-9)


def test_psnr_is_invariant_to_reference_offset():
    gen = np.random.default_rng(0)
    ref = gen.random((8, 8))
    noise = 0.05 * gen.standard_normal((8, 8))
    assert psnr(ref + noise, ref) == pytest.approx(psnr(ref + noise + 3, ref + 3), rel=1e-12)


def test_psnr_full_range_fixes_the_peak():
    ref = np.zeros((4, 4))
    ref[0, 0] = 0.5  # range 0.5, but psnr_fr still uses 1.0
    pred = ref + 0.1
    assert psnr_fr(pred, ref) == pytest.approx(20.0, abs=1e-9)
    assert psnr(pred, ref) == pytest.approx(20.0 - 20 * math.log10(2), abs=1e-9)


def test_nmse_hand_value():
    ref = np.array([3.0, 4.0])
    pred = np.array([3.0, 5.0])
    assert nmse(pred, ref) == pytest.approx(1 / 25)


def test_metric_error_paths():
    with pytest.raises(ValueError, match="constant"):
        psnr(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError, match="zero"):
        nmse(np.ones(3), np.zeros(3))
    for fn in (psnr, psnr_fr, nmse, mean_psnr):
        with pytest.raises(ValueError, match="mismatch"):
            fn(np.zeros((2, 2)), np.zeros((3, 2)))


def test_mean_psnr_averages_per_sample():
    ref = np.zeros((2, 4, 4))
    ref[:, 0, 0] = 1.0
    preds = ref.copy()
    preds[0] += 0.1
    preds[1] += 0.01
    assert mean_psnr(preds, ref) == pytest.approx(30.0, abs=1e-9)


# ---------------------------------------------------------------------------
# persistence


def test_corpus_round_trip(tmp_path):
    spec = TaskSpec(task="streaks", **SMALL)
    data = gen_corpus(spec)
    root = tmp_path / "corpus"
    save_corpus(root, data, spec)
    back, meta = load_corpus(root)
    for split in ("train", "val", "test"):
        np.testing.assert_array_equal(back[split].corrupted, data[split].corrupted)
        np.testing.assert_array_equal(back[split].clean, data[split].clean)
    assert meta["task"] == "streaks"
    assert float(meta["input_psnr_train"]) == pytest.approx(input_psnr(data["train"]))
    assert (root / "spec.txt").exists()


def test_load_rejects_missing_and_corrupt(tmp_path):
    with pytest.raises(FileNotFoundError, match="spec.txt"):
        load_corpus(tmp_path / "nowhere")
    spec = TaskSpec(task="gauss", **SMALL)
    data = gen_corpus(spec)
    root = tmp_path / "corpus"
    save_corpus(root, data, spec)
    # drop one file so indices stop being contiguous
    victims = sorted((root / "train").glob("*_z.ntf"))
    victims[0].unlink()
    with pytest.raises(ValueError, match="contiguous|pair"):
        load_corpus(root)


def test_sample_set_len():
    s = SampleSet(np.zeros((5, 1, 4, 4)), np.zeros((5, 1, 4, 4)), "train")
    assert len(s) == 5
