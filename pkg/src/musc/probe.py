"""Dictionary probing: effective atoms and code sparsity.

An atom is the image response of a single unit code entry. Because every
operator in the synthesis chain is linear, the atom of (scale, channel,
row, col) is one column of the materialized dictionary; probing it with an
indicator code is the cheap way to look at it. Finest-scale atoms pass only
through the head after one 3x3 mix, so their support stays within 3x3;
every step toward the coarser end can only widen the footprint.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import tensor
from .linops import DictionaryParams, MultiscaleCode, ScaleSpec, dict_apply
from .model import ModelParams, forward

DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class IndicatorCode:
    """Address of a single code entry."""

    scale: int
    channel: int
    row: int
    col: int

    def validate(self, spec: ScaleSpec) -> None:
        if not 0 <= self.scale <= spec.scales:
            raise ValueError(f"scale {self.scale} outside 0..{spec.scales}")
        c = spec.channels_at(self.scale)
        h, w = spec.spatial_at(self.scale)
        if not (0 <= self.channel < c and 0 <= self.row < h and 0 <= self.col < w):
            raise ValueError(f"{self} outside code shape ({c}, {h}, {w})")

    def build(self, spec: ScaleSpec) -> MultiscaleCode:
        self.validate(spec)
        code = MultiscaleCode.zeros(spec)
        code.parts[self.scale][self.channel, self.row, self.col] = 1
        return code


def support_bbox(img: np.ndarray, eps: float = DEFAULT_EPS):
    """Tight bounding box of |img| > eps over the trailing 2 axes, or None."""
    mask = np.abs(img) > eps
    if img.ndim == 3:
        mask = mask.any(axis=0)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def extract_atom(params: DictionaryParams, entry: IndicatorCode, eps: float = DEFAULT_EPS):
    """Atom image cropped to its support.

    Returns (atom, support) where support is the larger side of the
    bounding box; a numerically zero atom gives (None, 0). Single-channel
    dictionaries yield rank-2 crops.
    """
    img = dict_apply(params, entry.build(params.spec))
    box = support_bbox(img, eps)
    if box is None:
        return None, 0
    r0, r1, c0, c1 = box
    crop = img[:, r0 : r1 + 1, c0 : c1 + 1]
    if crop.shape[0] == 1:
        crop = crop[0]
    return crop, max(r1 - r0 + 1, c1 - c0 + 1)


def center_indicator(spec: ScaleSpec, scale: int, channel: int) -> IndicatorCode:
    h, w = spec.spatial_at(scale)
    return IndicatorCode(scale, channel, h // 2, w // 2)


def atom_grid(params: DictionaryParams, scale: int, count: int, out_dir) -> list[dict]:
    """Export the ``count`` strongest center-position atoms of one scale.

    Atoms are ranked by their L2 norm (descending), normalized to [-1, 1]
    and written as atom_s{scale}_c{channel}.pgm. Returns one record per
    exported atom: channel, norm, support, path.
    """
    spec = params.spec
    if not 0 <= scale <= spec.scales:
        raise ValueError(f"scale {scale} outside 0..{spec.scales}")
    if not 0 <= count <= spec.channels_at(scale):
        raise ValueError(f"count {count} outside 0..{spec.channels_at(scale)} channels")
    ranked = []
    for ch in range(spec.channels_at(scale)):
        atom, support = extract_atom(params, center_indicator(spec, scale, ch))
        if atom is None:
            continue
        ranked.append((float(np.linalg.norm(atom)), ch, atom, support))
    ranked.sort(key=lambda r: (-r[0], r[1]))
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for nrm, ch, atom, support in ranked[:count]:
        peak = float(np.max(np.abs(atom)))
        normed = atom / peak
        path = os.path.join(out_dir, f"atom_s{scale}_c{ch}.pgm")
        tensor.export_pgm(normed if normed.ndim == 2 else normed[0], path)
        records.append({"channel": ch, "norm": nrm, "support": support, "path": path})
    return records


@dataclass
class SparsityReport:
    """Fraction of active (|a| > eps) code entries per scale and overall."""

    per_scale: list[float]
    overall: float
    eps: float

    def to_tsv(self) -> str:
        lines = ["scale\tdensity"]
        lines += [f"{i}\t{d:.6f}" for i, d in enumerate(self.per_scale)]
        lines.append(f"overall\t{self.overall:.6f}")
        return "\n".join(lines) + "\n"


def sparsity_profile(m: ModelParams, images: np.ndarray, eps: float = DEFAULT_EPS, batch_size: int = 16) -> SparsityReport:
    """Code density of a model over a stack of (N, C, H, W) images."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"expected a (N, C, H, W) stack, got {images.shape}")
    active = np.zeros(m.spec.scales + 1, dtype=np.int64)
    total = np.zeros(m.spec.scales + 1, dtype=np.int64)
    for lo in range(0, images.shape[0], batch_size):
        code = forward(m, images[lo : lo + batch_size]).code
        for i, part in enumerate(code.parts):
            active[i] += int(np.count_nonzero(np.abs(part) > eps))
            total[i] += part.size
    return SparsityReport(
        per_scale=[a / t for a, t in zip(active, total)],
        overall=float(active.sum() / total.sum()),
        eps=eps,
    )
