"""Unrolled sparse coding model and its hand-written gradients.

The trainable object is a triple of multiscale dictionaries (encoder E used
in the residual, an untied adjoint used for the backprojection, decoder D
used for the final synthesis), per-step per-channel raw thresholds and a
scalar step size. The forward pass unrolls K shrinkage steps from a zero
code and keeps a tape; `backward` walks the tape in reverse and produces
exact gradients for every leaf without any autodiff framework.

Leaves live in a flat dict keyed by dotted names:

    enc.conv1 / adj.tconv2.u / dec.head.g ...   dictionary kernels
    lam.<step>.<scale>                          raw thresholds, shape (C_i,)
    eta                                         step size, shape (1,)

With tied dictionaries the three roles collapse onto a single 'dict.*'
family. With weight normalization each kernel is stored as a direction u
and a scalar gain g, the effective kernel being g * u / ||u||_F.
"""

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import precision, rng, tensor
from .linops import (
    DictionaryParams,
    DictTape,
    MultiscaleCode,
    ScaleSpec,
    dict_adjoint,
    dict_apply_vjp,
    dict_apply_with_tape,
    _kernel_shapes,
)
from .sparse import FLOOR, ShrinkMode, Thresholds, _weight_list, power_iteration

CHECKPOINT_MAGIC = b"MUSC1"

ROLES = ("enc", "adj", "dec")


class StaleTapeError(RuntimeError):
    """The tape was recorded for different parameters or a different batch."""


class NonFiniteGradientError(RuntimeError):
    """A gradient leaf contains NaN or Inf."""


class CheckpointFormatError(ValueError):
    """Raised for malformed checkpoint payloads."""


Gradients = dict[str, np.ndarray]


@dataclass
class ModelParams:
    spec: ScaleSpec
    steps: int
    mode: ShrinkMode
    tie_dicts: bool
    learn_lambda: bool
    learn_eta: bool
    weight_norm: bool
    leaves: dict[str, np.ndarray]
    version: int = 0

    def role_prefix(self, role: str) -> str:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        return "dict" if self.tie_dicts else role

    def effective_kernel(self, role: str, name: str) -> np.ndarray:
        prefix = self.role_prefix(role)
        if self.weight_norm:
            g = float(self.leaves[f"{prefix}.{name}.g"][0])
            u = self.leaves[f"{prefix}.{name}.u"]
            return (g / float(np.linalg.norm(u))) * u
        return self.leaves[f"{prefix}.{name}"]

    def dict_params(self, role: str) -> DictionaryParams:
        named = {n: self.effective_kernel(role, n) for n, _ in _kernel_shapes(self.spec)}
        return DictionaryParams.from_named(self.spec, named)

    def lambda_eff(self, step: int) -> list[np.ndarray]:
        return [
            np.maximum(self.leaves[f"lam.{step}.{i}"], 0) + FLOOR
            for i in range(self.spec.scales + 1)
        ]

    def thresholds(self) -> Thresholds:
        return Thresholds(
            [[self.leaves[f"lam.{k}.{i}"] for i in range(self.spec.scales + 1)] for k in range(self.steps)]
        )

    @property
    def eta(self) -> float:
        return float(self.leaves["eta"][0])

    def frozen_leaves(self) -> set[str]:
        frozen = set()
        if not self.learn_lambda:
            frozen.update(n for n in self.leaves if n.startswith("lam."))
        if not self.learn_eta:
            frozen.add("eta")
        return frozen

    def bump(self) -> None:
        self.version += 1

    def clone(self) -> "ModelParams":
        return ModelParams(
            spec=self.spec,
            steps=self.steps,
            mode=self.mode,
            tie_dicts=self.tie_dicts,
            learn_lambda=self.learn_lambda,
            learn_eta=self.learn_eta,
            weight_norm=self.weight_norm,
            leaves={k: v.copy() for k, v in self.leaves.items()},
            version=self.version,
        )


def _kernel_leaf_items(spec: ScaleSpec, prefix: str, weight_norm: bool, kernels_map: dict):
    """Yield (leaf_name, array) pairs for one dictionary's kernels."""
    for name, _ in _kernel_shapes(spec):
        k = kernels_map[name]
        if weight_norm:
            nrm = float(np.linalg.norm(k))
            yield f"{prefix}.{name}.g", np.array([nrm], dtype=k.dtype)
            yield f"{prefix}.{name}.u", k.copy()
        else:
            yield f"{prefix}.{name}", k.copy()


def expected_leaf_names(
    spec: ScaleSpec, steps: int, tie_dicts: bool, weight_norm: bool
) -> set[str]:
    names: set[str] = {"eta"}
    prefixes = ("dict",) if tie_dicts else ROLES
    for p in prefixes:
        for kname, _ in _kernel_shapes(spec):
            if weight_norm:
                names.add(f"{p}.{kname}.g")
                names.add(f"{p}.{kname}.u")
            else:
                names.add(f"{p}.{kname}")
    for k in range(steps):
        for i in range(spec.scales + 1):
            names.add(f"lam.{k}.{i}")
    return names


def init_model(
    spec: ScaleSpec,
    steps: int = 5,
    mode: ShrinkMode = ShrinkMode.NONNEG,
    tie_dicts: bool = False,
    learn_lambda: bool = True,
    learn_eta: bool = True,
    weight_norm: bool = True,
    lambda_init: float = 0.1,
    seed: int = 0,
    power_iters: int = 50,
) -> ModelParams:
    """Draw a fresh model.

    Kernels are zero-mean Gaussian with std 1/sqrt(fan_in * kernel_area);
    the adjoint and decoder start as copies of the encoder. Raw thresholds
    are set so every effective threshold equals ``lambda_init``, and the
    step size comes from a power iteration estimate of the encoder's
    spectral norm.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if lambda_init < FLOOR:
        raise ValueError(f"lambda_init {lambda_init} below floor {FLOOR}")
    mode = ShrinkMode(mode)
    dt = precision.active_dtype()
    gen = rng.stream(seed, rng.INIT)
    kernels_map = {}
    for name, shape in _kernel_shapes(spec):
        fan_in = shape[1] * shape[2] * shape[3]
        std = 1.0 / fan_in**0.5
        kernels_map[name] = (std * gen.standard_normal(shape)).astype(dt)

    leaves: dict[str, np.ndarray] = {}
    prefixes = ("dict",) if tie_dicts else ROLES
    for p in prefixes:
        leaves.update(_kernel_leaf_items(spec, p, weight_norm, kernels_map))
    for k in range(steps):
        for i in range(spec.scales + 1):
            leaves[f"lam.{k}.{i}"] = np.full(spec.channels_at(i), lambda_init - FLOOR, dtype=dt)

    model = ModelParams(
        spec=spec,
        steps=steps,
        mode=mode,
        tie_dicts=tie_dicts,
        learn_lambda=learn_lambda,
        learn_eta=learn_eta,
        weight_norm=weight_norm,
        leaves=leaves,
    )
    est = power_iteration(model.dict_params("enc"), iters=power_iters, seed=seed)
    leaves["eta"] = np.array([est.step_size], dtype=dt)
    return model


# ---------------------------------------------------------------------------
# forward / backward


class StepRecord(NamedTuple):
    alpha_prev: MultiscaleCode
    enc_tape: DictTape
    resid: np.ndarray
    grad: MultiscaleCode
    pre: MultiscaleCode


@dataclass
class Tape:
    owner: int  # id() of the ModelParams the tape was recorded for
    version: int
    z: np.ndarray  # batched input images
    batched: bool
    records: list[StepRecord]
    code: MultiscaleCode  # final code, batched
    dec_tape: DictTape
    prediction: np.ndarray  # batched


class ForwardState(NamedTuple):
    code: MultiscaleCode
    prediction: np.ndarray
    tape: Tape


def forward(model: ModelParams, images: np.ndarray) -> ForwardState:
    """Unroll K shrinkage steps from a zero code, then synthesize.

    ``images`` is (C_out, H, W) or batched (B, C_out, H, W); code and
    prediction mirror the input's batchedness.
    """
    z = np.asarray(images)
    batched = z.ndim == 4
    if not batched:
        if z.ndim != 3:
            raise ValueError(f"expected rank-3 image or rank-4 batch, got {z.shape}")
        z = z[None]
    if z.shape[1:] != model.spec.image_shape():
        raise ValueError(f"batch shape {z.shape} does not match {model.spec.image_shape()}")

    enc = model.dict_params("enc")
    adj = model.dict_params("adj")
    eta = model.eta
    alpha = MultiscaleCode.zeros(model.spec, batch=z.shape[0])
    records: list[StepRecord] = []
    for k in range(model.steps):
        weights = _weight_list(model.lambda_eff(k), alpha)
        ez, enc_tape = dict_apply_with_tape(enc, alpha)
        resid = z - ez
        grad = dict_adjoint(adj, resid)
        pre_parts = []
        new_parts = []
        for a, g, w in zip(alpha.parts, grad.parts, weights, strict=True):
            shifted = a + eta * g
            if model.mode is ShrinkMode.NONNEG:
                pre = shifted - eta * w
                new_parts.append(np.maximum(pre, 0))
            else:
                pre = shifted
                new_parts.append(np.sign(pre) * np.maximum(np.abs(pre) - eta * w, 0))
            pre_parts.append(pre)
        records.append(
            StepRecord(
                alpha_prev=alpha,
                enc_tape=enc_tape,
                resid=resid,
                grad=grad,
                pre=MultiscaleCode(pre_parts),
            )
        )
        alpha = MultiscaleCode(new_parts)

    dec = model.dict_params("dec")
    pred, dec_tape = dict_apply_with_tape(dec, alpha)
    tape = Tape(
        owner=id(model),
        version=model.version,
        z=z,
        batched=batched,
        records=records,
        code=alpha,
        dec_tape=dec_tape,
        prediction=pred,
    )
    if batched:
        return ForwardState(alpha, pred, tape)
    return ForwardState(MultiscaleCode([p[0] for p in alpha.parts]), pred[0], tape)


def loss(model: ModelParams, batch) -> float:
    """Mean over the batch of 0.5 * ||prediction - clean||^2."""
    z, x = _check_batch(model, batch)
    state = forward(model, z)
    diff = state.tape.prediction - x
    return float(np.vdot(diff, diff)) / (2.0 * z.shape[0])


def _check_batch(model: ModelParams, batch):
    z, x = batch
    z = np.asarray(z)
    x = np.asarray(x)
    if z.ndim == 3:
        z = z[None]
    if x.ndim == 3:
        x = x[None]
    if z.shape != x.shape:
        raise ValueError(f"corrupted {z.shape} and clean {x.shape} disagree")
    if z.shape[1:] != model.spec.image_shape():
        raise ValueError(f"batch shape {z.shape} does not match model {model.spec.image_shape()}")
    return z, x


def backward(model: ModelParams, tape: Tape, batch) -> Gradients:
    """Exact gradients of :func:`loss` for every leaf; frozen leaves get zeros.

    The tape must come from :func:`forward` on the same parameters and the
    same corrupted images, otherwise StaleTapeError is raised.
    """
    z, x = _check_batch(model, batch)
    if tape.owner != id(model) or tape.version != model.version:
        raise StaleTapeError(f"tape version {tape.version} != model version {model.version}")
    if tape.z.shape != z.shape or not np.array_equal(tape.z, z):
        raise StaleTapeError("tape was recorded for a different batch")

    spec = model.spec
    eta = model.eta
    nb = z.shape[0]
    enc = model.dict_params("enc")
    adj = model.dict_params("adj")
    dec = model.dict_params("dec")

    kernel_accum: dict[str, dict[str, np.ndarray]] = {}

    def add_kernels(role: str, grads: dict[str, np.ndarray], sign: float = 1.0) -> None:
        slot = kernel_accum.setdefault(model.role_prefix(role), {})
        for name, g in grads.items():
            cur = slot.get(name)
            slot[name] = sign * g if cur is None else cur + sign * g

    lam_grads = {
        f"lam.{k}.{i}": np.zeros_like(model.leaves[f"lam.{k}.{i}"])
        for k in range(model.steps)
        for i in range(spec.scales + 1)
    }
    eta_grad = 0.0

    err = (tape.prediction - x) / nb
    dalpha, dec_kernel_grads = dict_apply_vjp(dec, tape.dec_tape, err)
    add_kernels("dec", dec_kernel_grads)

    for k in range(model.steps - 1, -1, -1):
        rec = tape.records[k]
        lam_eff = model.lambda_eff(k)
        weights = _weight_list(lam_eff, rec.alpha_prev)
        dpre_parts = []
        for i, (da, pre, w) in enumerate(zip(dalpha.parts, rec.pre.parts, weights, strict=True)):
            if model.mode is ShrinkMode.NONNEG:
                mask = pre > 0
                dpre = da * mask
                # pre = alpha + eta*g - eta*lam: lam and eta enter linearly
                lam_grads[f"lam.{k}.{i}"] += -eta * dpre.sum(axis=(0, 2, 3))
                eta_grad += float(np.vdot(dpre, rec.grad.parts[i] - w))
            else:
                mask = np.abs(pre) > eta * w
                dpre = da * mask
                shrink_coeff = -np.sign(pre) * da * mask  # d out / d (eta*lam)
                lam_grads[f"lam.{k}.{i}"] += eta * shrink_coeff.sum(axis=(0, 2, 3))
                eta_grad += float(np.vdot(dpre, rec.grad.parts[i]))
                eta_grad += float(np.sum(shrink_coeff * w))
            dpre_parts.append(dpre)
        dpre_code = MultiscaleCode(dpre_parts)

        # through grad = adjoint(adj, resid): d resid = apply(adj, eta*dpre),
        # and the adj kernels see <apply(adj, eta*dpre), resid>
        dg = eta * dpre_code
        dresid, adj_tape = dict_apply_with_tape(adj, dg)
        _, adj_kernel_grads = dict_apply_vjp(adj, adj_tape, rec.resid)
        add_kernels("adj", adj_kernel_grads)

        # through resid = z - apply(enc, alpha_prev)
        enc_pull, enc_kernel_grads = dict_apply_vjp(enc, rec.enc_tape, dresid)
        add_kernels("enc", enc_kernel_grads, sign=-1.0)
        dalpha = dpre_code - enc_pull

    grads: Gradients = {}
    for prefix, per_kernel in kernel_accum.items():
        for name, g_eff in per_kernel.items():
            if model.weight_norm:
                u = model.leaves[f"{prefix}.{name}.u"]
                gain = float(model.leaves[f"{prefix}.{name}.g"][0])
                nu = float(np.linalg.norm(u))
                proj = float(np.vdot(g_eff, u)) / nu
                grads[f"{prefix}.{name}.g"] = np.array([proj], dtype=u.dtype)
                grads[f"{prefix}.{name}.u"] = (gain / nu) * g_eff - (gain * proj / nu**2) * u
            else:
                grads[f"{prefix}.{name}"] = g_eff

    for name, g in lam_grads.items():
        # chain through the relu reparameterization; flat at raw <= 0
        grads[name] = g * (model.leaves[name] > 0)
    grads["eta"] = np.array([eta_grad], dtype=model.leaves["eta"].dtype)

    for name in model.frozen_leaves():
        grads[name] = np.zeros_like(model.leaves[name])
    for name in model.leaves:
        if name not in grads:
            grads[name] = np.zeros_like(model.leaves[name])
    return grads


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, model: ModelParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, leaf in model.leaves.items():
            state.m[name] = np.zeros_like(leaf)
            state.v[name] = np.zeros_like(leaf)
        return state


def _check_finite(grads: Gradients) -> None:
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in leaves: {sorted(bad)}")


def adam_step(model: ModelParams, grads: Gradients, state: AdamState) -> None:
    """One Adam update in place; frozen leaves are left untouched."""
    _check_finite(grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    frozen = model.frozen_leaves()
    for name, leaf in model.leaves.items():
        if name in frozen:
            continue
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        leaf -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    model.bump()


def sgd_step(model: ModelParams, grads: Gradients, lr: float) -> None:
    _check_finite(grads)
    frozen = model.frozen_leaves()
    for name, leaf in model.leaves.items():
        if name not in frozen:
            leaf -= lr * grads[name]
    model.bump()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ModelParams, path) -> None:
    """Binary checkpoint: magic, leaf tensors, then a key=value footer."""
    names = sorted(model.leaves)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", len(names))
    for name in names:
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += tensor.ntf_bytes(model.leaves[name])
    spec = model.spec
    footer = {
        "scales": spec.scales,
        "channels": spec.channels,
        "height": spec.height,
        "width": spec.width,
        "out_channels": spec.out_channels,
        "bottom_conv": int(spec.bottom_conv),
        "steps": model.steps,
        "mode": model.mode.value,
        "tie_dicts": int(model.tie_dicts),
        "learn_lambda": int(model.learn_lambda),
        "learn_eta": int(model.learn_eta),
        "weight_norm": int(model.weight_norm),
    }
    blob += "".join(f"{k}={v}\n" for k, v in footer.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _ntf_slice(buf: bytes, ofs: int) -> tuple[np.ndarray, int]:
    if buf[ofs : ofs + 4] != tensor.NTF_MAGIC:
        raise CheckpointFormatError(f"bad tensor magic at offset {ofs}")
    if len(buf) < ofs + 8:
        raise CheckpointFormatError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, ofs + 4)
    if not 1 <= rank <= tensor.MAX_RANK:
        raise CheckpointFormatError(f"bad tensor rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", buf, ofs + 8)
    count = 1
    for d in dims:
        count *= d
    end = ofs + 8 + 4 * rank + 4 * count
    if len(buf) < end:
        raise CheckpointFormatError("truncated tensor payload")
    try:
        arr = tensor.ntf_from_bytes(buf[ofs:end])
    except tensor.NtfFormatError as e:
        raise CheckpointFormatError(str(e)) from e
    return arr, end


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:5]!r}")
    ofs = len(CHECKPOINT_MAGIC)
    if len(buf) < ofs + 4:
        raise CheckpointFormatError("truncated leaf count")
    (count,) = struct.unpack_from("<I", buf, ofs)
    ofs += 4
    leaves: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < ofs + 2:
            raise CheckpointFormatError("truncated leaf name")
        (nlen,) = struct.unpack_from("<H", buf, ofs)
        ofs += 2
        name = buf[ofs : ofs + nlen].decode("utf-8")
        ofs += nlen
        leaves[name], ofs = _ntf_slice(buf, ofs)
    try:
        footer = dict(
            line.split("=", 1) for line in buf[ofs:].decode("utf-8").splitlines() if line
        )
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointFormatError(f"bad footer: {e}") from e
    required = (
        "scales channels height width out_channels bottom_conv steps mode "
        "tie_dicts learn_lambda learn_eta weight_norm"
    ).split()
    missing = [k for k in required if k not in footer]
    if missing:
        raise CheckpointFormatError(f"footer missing keys: {missing}")
    try:
        spec = ScaleSpec(
            scales=int(footer["scales"]),
            channels=int(footer["channels"]),
            height=int(footer["height"]),
            width=int(footer["width"]),
            out_channels=int(footer["out_channels"]),
            bottom_conv=bool(int(footer["bottom_conv"])),
        )
        model = ModelParams(
            spec=spec,
            steps=int(footer["steps"]),
            mode=ShrinkMode(footer["mode"]),
            tie_dicts=bool(int(footer["tie_dicts"])),
            learn_lambda=bool(int(footer["learn_lambda"])),
            learn_eta=bool(int(footer["learn_eta"])),
            weight_norm=bool(int(footer["weight_norm"])),
            leaves=leaves,
        )
    except ValueError as e:
        raise CheckpointFormatError(f"bad footer values: {e}") from e
    expected = expected_leaf_names(spec, model.steps, model.tie_dicts, model.weight_norm)
    if set(leaves) != expected:
        raise CheckpointFormatError(
            f"leaf names do not match the declared architecture: "
            f"missing {sorted(expected - set(leaves))}, extra {sorted(set(leaves) - expected)}"
        )
    return model
