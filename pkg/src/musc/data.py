"""Synthetic imaging corpora and quality metrics.

Clean images are piecewise-smooth compositions of Gaussian blobs and
rectangles in [0, 1]. Three corruption tasks are supported:

    streaks : additive bright line segments (the derain-style task)
    gauss   : additive white Gaussian noise
    blur    : Gaussian blur followed by bilinear down/up sampling

Every sample is generated from its own (seed, split, index) random stream,
so corpora are reproducible element by element and splits never overlap.
"""

import math
import os
import re
from dataclasses import dataclass

import numpy as np

from . import precision, rng, tensor

TASKS = ("streaks", "gauss", "blur")
SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class TaskSpec:
    task: str = "streaks"
    size: int = 32
    n_train: int = 200
    n_val: int = 32
    n_test: int = 32
    seed: int = 0
    # streaks
    streak_count: int = 6
    streak_len: tuple[float, float] = (8.0, 20.0)
    streak_intensity: tuple[float, float] = (0.3, 0.8)
    # gauss
    sigma: float = 0.1
    # blur
    blur_sigma: float = 1.2
    blur_factor: int = 2

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.size < 4:
            raise ValueError(f"size {self.size} too small")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("all splits need at least one sample")
        if self.streak_count < 0 or self.sigma < 0:
            raise ValueError("corruption strength must be nonnegative")
        if self.blur_factor < 1 or self.size % self.blur_factor:
            raise ValueError(f"blur factor {self.blur_factor} must divide size {self.size}")


@dataclass
class SampleSet:
    """One split: corrupted inputs and clean targets, (N, 1, H, W)."""

    corrupted: np.ndarray
    clean: np.ndarray
    split: str

    def __len__(self) -> int:
        return self.corrupted.shape[0]


# ---------------------------------------------------------------------------
# clean images


def _clean_image(gen: np.random.Generator, size: int) -> np.ndarray:
    """Blobby piecewise-smooth image clipped to [0, 1] with full range."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    n_blobs = int(gen.integers(3, 7))
    for b in range(n_blobs):
        cy, cx = gen.uniform(0, size, size=2)
        sig = gen.uniform(0.06 * size, 0.22 * size)
        # the first blob is bright enough to clip, pinning the image max at 1
        amp = gen.uniform(1.05, 1.4) if b == 0 else gen.uniform(0.35, 1.0)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    for _ in range(int(gen.integers(1, 4))):
        y0, y1 = np.sort(gen.integers(0, size, size=2))
        x0, x1 = np.sort(gen.integers(0, size, size=2))
        img[y0 : y1 + 1, x0 : x1 + 1] += gen.uniform(-0.4, 0.5)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# corruptions


def _add_streaks(gen: np.random.Generator, x: np.ndarray, spec: TaskSpec) -> np.ndarray:
    size = x.shape[0]
    overlay = np.zeros_like(x)
    for _ in range(spec.streak_count):
        theta = gen.uniform(0, math.pi)
        length = gen.uniform(*spec.streak_len)
        cy, cx = gen.uniform(0, size, size=2)
        val = gen.uniform(*spec.streak_intensity)
        steps = max(2, int(2 * length))
        for t in np.linspace(-length / 2, length / 2, steps):
            py = int(round(cy + t * math.sin(theta)))
            px = int(round(cx + t * math.cos(theta)))
            if 0 <= py < size and 0 <= px < size:
                overlay[py, px] = max(overlay[py, px], val)
    return x + overlay


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t**2) / (2 * sigma**2))
    return k / k.sum()


def _blur2d(x: np.ndarray, sigma: float) -> np.ndarray:
    k = _gauss_kernel(sigma)
    r = (len(k) - 1) // 2
    padded = np.pad(x, r, mode="reflect")
    rows = np.apply_along_axis(lambda a: np.convolve(a, k, mode="valid"), 1, padded)
    cols = np.apply_along_axis(lambda a: np.convolve(a, k, mode="valid"), 0, rows)
    return cols


def _bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers."""
    in_h, in_w = x.shape
    sy = in_h / out_h
    sx = in_w / out_w
    fy = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0, in_h - 1)
    fx = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0, in_w - 1)
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    a = x[np.ix_(y0, x0)]
    b = x[np.ix_(y0, x1)]
    c = x[np.ix_(y1, x0)]
    d = x[np.ix_(y1, x1)]
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)


def _corrupt(gen: np.random.Generator, x: np.ndarray, spec: TaskSpec) -> np.ndarray:
    if spec.task == "streaks":
        return _add_streaks(gen, x, spec)
    if spec.task == "gauss":
        return x + spec.sigma * gen.standard_normal(x.shape)
    blurred = _blur2d(x, spec.blur_sigma)
    small = _bilinear_resize(blurred, x.shape[0] // spec.blur_factor, x.shape[1] // spec.blur_factor)
    return _bilinear_resize(small, x.shape[0], x.shape[1])


def sample_pair(spec: TaskSpec, split: str, idx: int) -> tuple[np.ndarray, np.ndarray]:
    """(corrupted, clean) 2-D pair for one sample; fully seed-determined."""
    gen = rng.stream(spec.seed, rng.DATA, SPLIT_IDS[split], idx)
    x = _clean_image(gen, spec.size)
    z = _corrupt(gen, x, spec)
    dt = precision.active_dtype()
    return z.astype(dt), x.astype(dt)


def gen_corpus(spec: TaskSpec) -> dict[str, SampleSet]:
    """Generate the train/val/test splits as (N, 1, H, W) sample sets."""
    out = {}
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    for split, n in counts.items():
        zs = []
        xs = []
        for idx in range(n):
            z, x = sample_pair(spec, split, idx)
            zs.append(z[None])
            xs.append(x[None])
        out[split] = SampleSet(np.stack(zs), np.stack(xs), split)
    return out


# ---------------------------------------------------------------------------
# metrics


def psnr(pred, ref) -> float:
    """Peak signal-to-noise ratio against the reference's own value range."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    rng_ = float(ref.max() - ref.min())
    if rng_ == 0:
        raise ValueError("reference image is constant, PSNR undefined")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(rng_**2 / mse)


def psnr_fr(pred, ref) -> float:
    """PSNR with a fixed full range of 1.0."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def nmse(pred, ref) -> float:
    """||pred - ref||^2 / ||ref||^2."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    denom = float(np.sum(ref**2))
    if denom == 0:
        raise ValueError("reference is identically zero, NMSE undefined")
    return float(np.sum((pred - ref) ** 2)) / denom


def mean_psnr(preds: np.ndarray, refs: np.ndarray) -> float:
    """Mean per-sample PSNR over matching (N, ...) stacks."""
    if preds.shape != refs.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {refs.shape}")
    return float(np.mean([psnr(p, r) for p, r in zip(preds, refs)]))


def input_psnr(samples: SampleSet) -> float:
    """Baseline: mean PSNR of the corrupted inputs themselves."""
    return mean_psnr(samples.corrupted, samples.clean)


# ---------------------------------------------------------------------------
# persistence


def save_corpus(root, corpora: dict[str, SampleSet], spec: TaskSpec) -> None:
    """Write NTF pairs per split plus a spec.txt with the pinned baselines."""
    os.makedirs(root, exist_ok=True)
    lines = [
        f"task={spec.task}",
        f"size={spec.size}",
        f"n_train={spec.n_train}",
        f"n_val={spec.n_val}",
        f"n_test={spec.n_test}",
        f"seed={spec.seed}",
        f"streak_count={spec.streak_count}",
        f"streak_len={spec.streak_len[0]},{spec.streak_len[1]}",
        f"streak_intensity={spec.streak_intensity[0]},{spec.streak_intensity[1]}",
        f"sigma={spec.sigma}",
        f"blur_sigma={spec.blur_sigma}",
        f"blur_factor={spec.blur_factor}",
    ]
    for split, samples in corpora.items():
        sdir = os.path.join(root, split)
        os.makedirs(sdir, exist_ok=True)
        for idx in range(len(samples)):
            tensor.write_ntf(os.path.join(sdir, f"{idx}_z.ntf"), samples.corrupted[idx])
            tensor.write_ntf(os.path.join(sdir, f"{idx}_x.ntf"), samples.clean[idx])
        lines.append(f"input_psnr_{split}={input_psnr(samples):.6f}")
    with open(os.path.join(root, "spec.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_corpus(root) -> tuple[dict[str, SampleSet], dict[str, str]]:
    """Read a corpus directory back; returns (splits, spec.txt key/values)."""
    spec_path = os.path.join(root, "spec.txt")
    if not os.path.isfile(spec_path):
        raise FileNotFoundError(f"no spec.txt under {root}")
    with open(spec_path, encoding="utf-8") as fh:
        meta = dict(
            line.strip().split("=", 1) for line in fh if line.strip() and not line.startswith("#")
        )
    corpora = {}
    for split in SPLIT_IDS:
        sdir = os.path.join(root, split)
        if not os.path.isdir(sdir):
            continue
        pat = re.compile(r"^(\d+)_z\.ntf$")
        ids = sorted(int(m.group(1)) for f in os.listdir(sdir) if (m := pat.match(f)))
        if ids != list(range(len(ids))):
            raise ValueError(f"non-contiguous sample indices in {sdir}")
        zs = []
        xs = []
        for idx in ids:
            z = tensor.read_ntf(os.path.join(sdir, f"{idx}_z.ntf"))
            x = tensor.read_ntf(os.path.join(sdir, f"{idx}_x.ntf"))
            if z.shape != x.shape:
                raise ValueError(f"pair {idx} in {sdir}: {z.shape} vs {x.shape}")
            zs.append(z)
            xs.append(x)
        if ids:
            corpora[split] = SampleSet(np.stack(zs), np.stack(xs), split)
    if not corpora:
        raise ValueError(f"no splits found under {root}")
    return corpora, meta
