"""Task-driven training loop.

Minibatch indices come from a dedicated random stream, so a (config, seed)
pair pins down the whole trajectory bit for bit. Validation PSNR is computed
with predictions clipped at zero (targets are nonnegative-range images);
training itself never clips.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import rng
from .data import SampleSet, TaskSpec, gen_corpus, load_corpus, mean_psnr
from .linops import ScaleSpec
from .model import (
    AdamState,
    ModelParams,
    adam_step,
    backward,
    forward,
    init_model,
    save_checkpoint,
    sgd_step,
)
from .sparse import ShrinkMode

OPTIMIZERS = ("adam", "sgd")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    spec: ScaleSpec
    task: TaskSpec
    steps: int = 2000
    k_steps: int = 5
    mode: str = "nonneg"
    tie_dicts: bool = False
    learn_lambda: bool = True
    learn_eta: bool = True
    weight_norm: bool = True
    lambda_init: float = 0.1
    optimizer: str = "adam"
    lr: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    eval_interval: int = 100
    power_iters: int = 50
    data_dir: str | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("batch_size and eval_interval must be positive")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        img_side = self.spec.height << self.spec.scales
        if self.task.size != img_side or (self.spec.width << self.spec.scales) != img_side:
            raise ValueError(
                f"model produces {img_side} pixels per side, task images are {self.task.size}"
            )


class MetricRow(NamedTuple):
    step: int
    loss: float
    val_psnr: float


@dataclass
class TrainResult:
    model: ModelParams
    metrics: list[MetricRow]
    data: dict[str, SampleSet] = field(repr=False, default=None)


def evaluate_psnr(m: ModelParams, samples: SampleSet, batch_size: int = 16) -> float:
    """Mean clipped-prediction PSNR over a sample set."""
    preds = predict(m, samples.corrupted, batch_size)
    return mean_psnr(preds, np.asarray(samples.clean, dtype=preds.dtype))


def predict(m: ModelParams, corrupted: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Reconstructions for a (N, C, H, W) stack, clipped below at zero."""
    outs = []
    for lo in range(0, corrupted.shape[0], batch_size):
        state = forward(m, corrupted[lo : lo + batch_size])
        outs.append(np.maximum(state.prediction, 0))
    return np.concatenate(outs)


def dataset_loss(m: ModelParams, samples: SampleSet, batch_size: int = 16) -> float:
    """Mean 0.5 * ||prediction - clean||^2 over a whole sample set."""
    total = 0.0
    for lo in range(0, len(samples), batch_size):
        state = forward(m, samples.corrupted[lo : lo + batch_size])
        diff = state.tape.prediction - samples.clean[lo : lo + batch_size]
        total += float(np.vdot(diff, diff))
    return total / (2.0 * len(samples))


def metrics_tsv(rows: list[MetricRow]) -> str:
    lines = ["step\tloss\tval_psnr"]
    lines += [f"{r.step}\t{r.loss!r}\t{r.val_psnr!r}" for r in rows]
    return "\n".join(lines) + "\n"


def train_loop(cfg: TrainConfig, data: dict[str, SampleSet] | None = None) -> TrainResult:
    """Run the full optimization; returns the model and the metric rows.

    Metric rows land at step 0 and every ``eval_interval`` steps (plus the
    final step); the loss column is the mean training loss since the last
    row. On divergence the last evaluated model is written to the checkpoint
    path (if any) before TrainingDiverged is raised.
    """
    if data is None:
        if cfg.data_dir:
            data, _ = load_corpus(cfg.data_dir)
        else:
            data = gen_corpus(cfg.task)
    if "train" not in data or "val" not in data:
        raise ValueError("training needs 'train' and 'val' splits")
    train = data["train"]
    val = data["val"]

    m = init_model(
        cfg.spec,
        steps=cfg.k_steps,
        mode=ShrinkMode(cfg.mode),
        tie_dicts=cfg.tie_dicts,
        learn_lambda=cfg.learn_lambda,
        learn_eta=cfg.learn_eta,
        weight_norm=cfg.weight_norm,
        lambda_init=cfg.lambda_init,
        seed=cfg.seed,
        power_iters=cfg.power_iters,
    )
    opt = AdamState.init(m, lr=cfg.lr) if cfg.optimizer == "adam" else None
    batch_gen = rng.stream(cfg.seed, rng.BATCH)

    metrics = [
        MetricRow(0, dataset_loss(m, train, cfg.batch_size), evaluate_psnr(m, val, cfg.batch_size))
    ]
    last_good = m.clone()
    window: list[float] = []
    for step in range(1, cfg.steps + 1):
        idx = batch_gen.integers(0, len(train), size=cfg.batch_size)
        zb = train.corrupted[idx]
        xb = train.clean[idx]
        state = forward(m, zb)
        diff = state.tape.prediction - xb
        batch_loss = float(np.vdot(diff, diff)) / (2.0 * zb.shape[0])
        if not math.isfinite(batch_loss):
            if cfg.checkpoint:
                save_checkpoint(last_good, cfg.checkpoint)
            raise TrainingDiverged(step - 1)
        grads = backward(m, state.tape, (zb, xb))
        if cfg.optimizer == "adam":
            adam_step(m, grads, opt)
        else:
            sgd_step(m, grads, cfg.lr)
        window.append(batch_loss)
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            metrics.append(MetricRow(step, float(np.mean(window)), evaluate_psnr(m, val, cfg.batch_size)))
            window.clear()
            last_good = m.clone()
    if cfg.checkpoint:
        save_checkpoint(m, cfg.checkpoint)
    return TrainResult(model=m, metrics=metrics, data=data)
