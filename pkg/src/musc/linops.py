"""Multiscale dictionary operators.

A dictionary maps a pyramid of sparse codes to an image through a chain of
expanding blocks. With S scales and C channels at the coarsest level, the
code at scale i (i = 0 coarsest) has C / 2**i channels on a 2**i * H by
2**i * W grid. Each block doubles resolution with a learned 2x2 transposed
convolution, concatenates the code of that scale in front, and mixes with a
3x3 convolution; a final 1x1 convolution maps features to image channels.

All spatial operators here are linear, so the exact adjoint is available in
closed form and `materialize` can lay the whole map out as a dense matrix for
verification on small problem sizes.
"""

from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple

import numpy as np

from . import kernels, precision

MATERIALIZE_CAP = 4096


@dataclass(frozen=True)
class ScaleSpec:
    """Geometry of a multiscale model.

    Attributes
    ----------
    scales : number of expanding blocks S (>= 1).
    channels : channel count C of the coarsest code; divisible by 2**scales.
    height, width : spatial dims of the coarsest code.
    out_channels : image channels produced by the head.
    bottom_conv : whether a 3x3 C->C convolution precedes the first block.
    """

    scales: int
    channels: int
    height: int
    width: int
    out_channels: int = 1
    bottom_conv: bool = True

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError(f"scales must be >= 1, got {self.scales}")
        if min(self.channels, self.height, self.width, self.out_channels) < 1:
            raise ValueError("all dimensions must be positive")
        if self.channels % (1 << self.scales):
            raise ValueError(
                f"channels={self.channels} not divisible by 2**scales={1 << self.scales}"
            )

    def channels_at(self, i: int) -> int:
        if not 0 <= i <= self.scales:
            raise ValueError(f"scale {i} outside 0..{self.scales}")
        return self.channels >> i

    def spatial_at(self, i: int) -> tuple[int, int]:
        if not 0 <= i <= self.scales:
            raise ValueError(f"scale {i} outside 0..{self.scales}")
        return (self.height << i, self.width << i)

    def code_shapes(self) -> list[tuple[int, int, int]]:
        return [(self.channels_at(i), *self.spatial_at(i)) for i in range(self.scales + 1)]

    def image_shape(self) -> tuple[int, int, int]:
        h, w = self.spatial_at(self.scales)
        return (self.out_channels, h, w)

    def code_dim(self) -> int:
        return sum(c * h * w for c, h, w in self.code_shapes())

    def image_dim(self) -> int:
        c, h, w = self.image_shape()
        return c * h * w


@dataclass
class MultiscaleCode:
    """Pyramid of code tensors, one per scale, coarsest first.

    Parts are either rank-3 (C_i, H_i, W_i) single codes or rank-4 batched
    (B, C_i, H_i, W_i) with a shared leading batch dim. Supports the vector
    space operations the iterative solvers need.
    """

    parts: list[np.ndarray]

    @property
    def batched(self) -> bool:
        return self.parts[0].ndim == 4

    @property
    def num_scales(self) -> int:
        return len(self.parts) - 1

    @classmethod
    def zeros(cls, spec: ScaleSpec, batch: int | None = None, dtype=None) -> "MultiscaleCode":
        dt = precision.active_dtype() if dtype is None else dtype
        lead = () if batch is None else (batch,)
        return cls([np.zeros(lead + s, dtype=dt) for s in spec.code_shapes()])

    @classmethod
    def random(cls, spec: ScaleSpec, rng: np.random.Generator, batch: int | None = None) -> "MultiscaleCode":
        dt = precision.active_dtype()
        lead = () if batch is None else (batch,)
        return cls([rng.standard_normal(lead + s).astype(dt) for s in spec.code_shapes()])

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "MultiscaleCode":
        return MultiscaleCode([fn(p) for p in self.parts])

    def zip(self, other: "MultiscaleCode", fn) -> "MultiscaleCode":
        return MultiscaleCode([fn(a, b) for a, b in zip(self.parts, other.parts, strict=True)])

    def copy(self) -> "MultiscaleCode":
        return self.map(np.copy)

    def __add__(self, other):
        return self.zip(other, np.add)

    def __sub__(self, other):
        return self.zip(other, np.subtract)

    def __mul__(self, scalar):
        s = float(scalar)
        return self.map(lambda p: p * s)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(np.negative)

    def dot(self, other: "MultiscaleCode") -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self.parts, other.parts, strict=True)))

    def norm(self) -> float:
        return self.dot(self) ** 0.5

    def count_nonzero(self, eps: float = 1e-8) -> int:
        return int(sum(np.count_nonzero(np.abs(p) > eps) for p in self.parts))

    def size(self) -> int:
        return int(sum(p.size for p in self.parts))

    def to_vec(self) -> np.ndarray:
        """Flatten a single (non-batched) code: scales in order, C order within."""
        if self.batched:
            raise ValueError("to_vec expects a single code, not a batch")
        return np.concatenate([p.ravel() for p in self.parts])

    @classmethod
    def from_vec(cls, spec: ScaleSpec, vec: np.ndarray) -> "MultiscaleCode":
        vec = np.asarray(vec)
        if vec.ndim != 1 or vec.size != spec.code_dim():
            raise ValueError(f"expected flat vector of length {spec.code_dim()}")
        parts = []
        ofs = 0
        for shape in spec.code_shapes():
            n = shape[0] * shape[1] * shape[2]
            parts.append(vec[ofs : ofs + n].reshape(shape).astype(precision.active_dtype()))
            ofs += n
        return cls(parts)


def check_code(spec: ScaleSpec, code: MultiscaleCode, name: str = "code") -> None:
    shapes = spec.code_shapes()
    if len(code.parts) != len(shapes):
        raise ValueError(f"{name}: expected {len(shapes)} scales, got {len(code.parts)}")
    batched = code.batched
    lead = code.parts[0].shape[:1] if batched else ()
    for i, (part, shape) in enumerate(zip(code.parts, shapes)):
        if part.shape != lead + shape:
            raise ValueError(f"{name}: scale {i} has shape {part.shape}, expected {lead + shape}")


def _kernel_shapes(spec: ScaleSpec) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if spec.bottom_conv:
        c0 = spec.channels
        shapes.append(("bottom", (c0, c0, 3, 3)))
    for i in range(1, spec.scales + 1):
        ci = spec.channels_at(i)
        shapes.append((f"tconv{i}", (ci, spec.channels_at(i - 1), 2, 2)))
        shapes.append((f"conv{i}", (ci, 2 * ci, 3, 3)))
    shapes.append(("head", (spec.out_channels, spec.channels_at(spec.scales), 1, 1)))
    return shapes


@dataclass
class DictionaryParams:
    """Kernels of one multiscale dictionary.

    tconvs[i-1] lifts scale i-1 features to scale i (2x2, stride 2);
    convs[i-1] mixes the concatenated [code_i ; lifted] stack (3x3);
    head is the final 1x1 map to image channels. bottom is the optional
    3x3 convolution applied to the coarsest code before the first block.
    """

    spec: ScaleSpec
    bottom: np.ndarray | None
    tconvs: list[np.ndarray]
    convs: list[np.ndarray]
    head: np.ndarray

    def __post_init__(self):
        expected = dict(_kernel_shapes(self.spec))
        for name, arr in self.named_kernels():
            if arr.shape != expected[name]:
                raise ValueError(f"kernel {name}: shape {arr.shape}, expected {expected[name]}")

    def named_kernels(self) -> Iterator[tuple[str, np.ndarray]]:
        if self.spec.bottom_conv:
            yield "bottom", self.bottom
        for i in range(1, self.spec.scales + 1):
            yield f"tconv{i}", self.tconvs[i - 1]
            yield f"conv{i}", self.convs[i - 1]
        yield "head", self.head

    @classmethod
    def from_named(cls, spec: ScaleSpec, kernels_map: dict) -> "DictionaryParams":
        missing = {n for n, _ in _kernel_shapes(spec)} - set(kernels_map)
        if missing:
            raise ValueError(f"missing kernels: {sorted(missing)}")
        return cls(
            spec=spec,
            bottom=kernels_map["bottom"] if spec.bottom_conv else None,
            tconvs=[kernels_map[f"tconv{i}"] for i in range(1, spec.scales + 1)],
            convs=[kernels_map[f"conv{i}"] for i in range(1, spec.scales + 1)],
            head=kernels_map["head"],
        )

    @classmethod
    def kernel_shapes(cls, spec: ScaleSpec) -> list[tuple[str, tuple[int, ...]]]:
        return _kernel_shapes(spec)


# ---------------------------------------------------------------------------
# single-channel reference operators


def conv_siso(image, kernel) -> np.ndarray:
    """3x3 correlation with zero padding, same-size output."""
    x = precision.asarray(image)
    w = precision.asarray(kernel)
    if x.ndim != 2 or w.shape != (3, 3):
        raise ValueError(f"expected 2-D image and (3, 3) kernel, got {x.shape}, {w.shape}")
    return kernels.conv3x3(x[None, None], w[None, None])[0, 0]


def tconv_siso(image, kernel) -> np.ndarray:
    """2x upsampling transposed convolution as a Kronecker product.

    Equivalent to placing the input on the odd grid positions of a doubled
    canvas (bed of nails) and correlating with the 2x2 kernel; the Kronecker
    form with the flipped kernel is the closed-form shortcut.
    """
    x = precision.asarray(image)
    v = precision.asarray(kernel)
    if x.ndim != 2 or v.shape != (2, 2):
        raise ValueError(f"expected 2-D image and (2, 2) kernel, got {x.shape}, {v.shape}")
    return np.kron(x, v[::-1, ::-1])


def tconv_siso_direct(image, kernel) -> np.ndarray:
    """Direct form of :func:`tconv_siso`: bed-of-nails then 2x2 correlation.

    Kept as the independent oracle path; tests assert it matches the
    Kronecker form everywhere.
    """
    x = precision.asarray(image)
    v = precision.asarray(kernel)
    h, w = x.shape
    up = np.zeros((2 * h, 2 * w), dtype=x.dtype)
    up[1::2, 1::2] = x  # sample sits at the bottom-right of each 2x2 cell
    padded = np.zeros((2 * h + 1, 2 * w + 1), dtype=x.dtype)
    padded[: 2 * h, : 2 * w] = up
    out = np.zeros_like(up)
    for p in range(2):
        for q in range(2):
            out += v[p, q] * padded[p : p + 2 * h, q : q + 2 * w]
    return out


def conv_mimo(x, w) -> np.ndarray:
    """Multichannel 3x3 correlation: (C, H, W), (M, C, 3, 3) -> (M, H, W)."""
    x = precision.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected rank-3 input, got shape {x.shape}")
    return kernels.conv3x3(x[None], precision.asarray(w))[0]


def tconv_mimo(x, v) -> np.ndarray:
    """Multichannel 2x2 transposed convolution: (C, H, W), (M, C, 2, 2) -> (M, 2H, 2W)."""
    x = precision.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected rank-3 input, got shape {x.shape}")
    return kernels.tconv2x2(x[None], precision.asarray(v))[0]


def up_block(skip, x, w, v) -> np.ndarray:
    """One expanding block: concat([skip ; tconv(x, v)]) then 3x3 conv with w."""
    skip = precision.asarray(skip)
    lifted = tconv_mimo(x, v)
    if skip.shape != lifted.shape:
        raise ValueError(f"skip {skip.shape} does not match lifted {lifted.shape}")
    return conv_mimo(np.concatenate([skip, lifted], axis=0), w)


# ---------------------------------------------------------------------------
# full dictionary


class DictTape(NamedTuple):
    """Forward activations needed for kernel gradients of one apply."""

    alpha0: np.ndarray  # input to the bottom conv (batched)
    feats: list[np.ndarray]  # feature maps per scale 0..S (inputs to tconv/head)
    concats: list[np.ndarray]  # concatenated conv inputs per block 1..S


def _flip_transpose3(w: np.ndarray) -> np.ndarray:
    """Kernel of the adjoint 3x3 correlation: swap in/out, flip spatially."""
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def _as_batched(code: MultiscaleCode) -> tuple[list[np.ndarray], bool]:
    if code.batched:
        return code.parts, True
    return [p[None] for p in code.parts], False


def dict_apply_with_tape(params: DictionaryParams, code: MultiscaleCode):
    """Apply the dictionary and keep the activations for backprop."""
    spec = params.spec
    check_code(spec, code)
    parts, batched = _as_batched(code)
    cur = kernels.conv3x3(parts[0], params.bottom) if spec.bottom_conv else parts[0]
    feats = [cur]
    concats = []
    for i in range(1, spec.scales + 1):
        lifted = kernels.tconv2x2(cur, params.tconvs[i - 1])
        cat = np.concatenate([parts[i], lifted], axis=1)
        concats.append(cat)
        cur = kernels.conv3x3(cat, params.convs[i - 1])
        feats.append(cur)
    img = kernels.conv1x1(cur, params.head)
    tape = DictTape(alpha0=parts[0], feats=feats, concats=concats)
    return (img if batched else img[0]), tape


def dict_apply(params: DictionaryParams, code: MultiscaleCode) -> np.ndarray:
    """Synthesize an image from a code; accepts single or batched codes."""
    return dict_apply_with_tape(params, code)[0]


def _adjoint_sweep(params: DictionaryParams, upstream: np.ndarray, tape: DictTape | None):
    """Backward traversal shared by dict_adjoint and the kernel VJP.

    Returns (code_grad, kernel_grads); kernel_grads is None without a tape.
    The code gradient of <upstream, apply(code)> is exactly the adjoint
    applied to upstream, so this one sweep serves both purposes.
    """
    spec = params.spec
    y = upstream if upstream.ndim == 4 else upstream[None]
    batched = upstream.ndim == 4
    grads: dict[str, np.ndarray] | None = {} if tape is not None else None
    cur = kernels.conv1x1_adjoint(y, params.head)
    if tape is not None:
        grads["head"] = kernels.conv1x1_grad_kernel(tape.feats[spec.scales], y)
    rev_parts: list[np.ndarray] = []
    for i in range(spec.scales, 0, -1):
        ci = spec.channels_at(i)
        if tape is not None:
            grads[f"conv{i}"] = kernels.conv3x3_grad_kernel(tape.concats[i - 1], cur)
        dcat = kernels.conv3x3(cur, _flip_transpose3(params.convs[i - 1]))
        rev_parts.append(dcat[:, :ci])
        dlift = np.ascontiguousarray(dcat[:, ci:])
        if tape is not None:
            grads[f"tconv{i}"] = kernels.tconv2x2_grad_kernel(tape.feats[i - 1], dlift)
        cur = kernels.tconv2x2_adjoint(dlift, params.tconvs[i - 1])
    if spec.bottom_conv:
        if tape is not None:
            grads["bottom"] = kernels.conv3x3_grad_kernel(tape.alpha0, cur)
        cur = kernels.conv3x3(cur, _flip_transpose3(params.bottom))
    rev_parts.append(cur)
    parts = rev_parts[::-1]
    if not batched:
        parts = [p[0] for p in parts]
    return MultiscaleCode(parts), grads


def dict_adjoint(params: DictionaryParams, image: np.ndarray) -> MultiscaleCode:
    """Exact adjoint of :func:`dict_apply`; accepts single or batched images."""
    image = np.asarray(image)
    if image.ndim not in (3, 4):
        raise ValueError(f"expected rank-3 image or rank-4 batch, got {image.shape}")
    c, h, w = params.spec.image_shape()
    if image.shape[-3:] != (c, h, w):
        raise ValueError(f"image shape {image.shape} does not match {(c, h, w)}")
    return _adjoint_sweep(params, image, None)[0]


def dict_apply_vjp(params: DictionaryParams, tape: DictTape, upstream: np.ndarray):
    """Gradients of <upstream, dict_apply(params, code)>.

    Returns (code_grad, kernel_grads) where kernel_grads maps kernel names to
    arrays shaped like the kernels. ``tape`` must come from
    :func:`dict_apply_with_tape` on the matching code.
    """
    return _adjoint_sweep(params, upstream, tape)


def materialize(params: DictionaryParams, cap: int = MATERIALIZE_CAP) -> np.ndarray:
    """Dense (image_dim, code_dim) matrix of the dictionary.

    Columns follow MultiscaleCode.to_vec ordering. Refuses code dimensions
    above ``cap``; this is a verification tool, not a production path.
    """
    spec = params.spec
    n = spec.code_dim()
    if n > cap:
        raise ValueError(f"code dim {n} exceeds materialization cap {cap}")
    dt = precision.active_dtype()
    parts = [np.zeros((n, c, h, w), dtype=dt) for c, h, w in spec.code_shapes()]
    ofs = 0
    for part in parts:
        m = part[0].size
        flat = part.reshape(n, m)
        flat[np.arange(ofs, ofs + m), np.arange(m)] = 1
        ofs += m
    img = dict_apply(params, MultiscaleCode(parts))
    return np.ascontiguousarray(img.reshape(n, spec.image_dim()).T)
