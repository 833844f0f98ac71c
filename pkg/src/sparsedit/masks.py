"""Edit-mask generation.

Two latent trajectories (one per prompt) are reduced to a per-pixel
difference map, thresholded with Otsu's between-class variance criterion,
optionally dilated, and expanded into an OR-pooled resolution pyramid that
tracks the feature-map sizes inside the denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .tensors import require_tensor4

OTSU_CANDIDATES = 256


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Immutable per-pixel edit indicator."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.ascontiguousarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ContractViolation(f"mask must be 2-D, got shape {b.shape}")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @classmethod
    def full(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.ones((h, w), dtype=bool))

    @classmethod
    def empty(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.zeros((h, w), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def h(self) -> int:
        return self.bits.shape[0]

    @property
    def w(self) -> int:
        return self.bits.shape[1]

    @property
    def active_count(self) -> int:
        return int(self.bits.sum())

    @property
    def sparsity(self) -> float:
        return self.active_count / self.bits.size

    def all_active(self) -> bool:
        return bool(self.bits.all())

    def is_empty(self) -> bool:
        return not bool(self.bits.any())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class DiffMap:
    """Accumulated latent difference, min-max normalized to [0, 1].

    degenerate is set when the raw accumulation was constant; in that case the
    values are all zero and thresholding reports a no-edit status instead of a
    mask.
    """

    values: np.ndarray
    degenerate: bool

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.dtype != np.float32:
            raise ContractViolation(f"diff map must be 2-D float32, got {v.dtype} {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ContractViolation("diff map values must lie in [0, 1]")
        if self.degenerate and v.any():
            raise ContractViolation("degenerate diff map must be all zero")


@dataclass(frozen=True)
class OtsuResult:
    epsilon: float
    objective: float
    mask: BinaryMask
    no_edit: bool


@dataclass(frozen=True)
class MaskPyramid:
    """Level 0 at latent resolution; each level OR-pools 2x2 footprints."""

    levels: tuple[BinaryMask, ...]

    def level_for_shape(self, h: int, w: int) -> int:
        for i, m in enumerate(self.levels):
            if m.shape == (h, w):
                return i
        raise ContractViolation(f"no pyramid level with shape ({h}, {w})")


def accumulate_diff(x_steps, y_steps, t1: int = 5, t2: int = 10) -> DiffMap:
    """Sum per-step, channel-mean absolute differences over steps t1..t2.

    Step lists are 1-based: element i holds the latent after step i + 1, so
    both must cover at least t2 entries. The accumulated map is min-max
    normalized to [0, 1]; a constant accumulation yields a degenerate map.
    """
    if not (1 <= t1 <= t2 <= 10):
        raise ContractViolation(f"window must satisfy 1 <= t1 <= t2 <= 10, got ({t1}, {t2})")
    if len(x_steps) < t2 or len(y_steps) < t2:
        raise ContractViolation(
            f"step lists must cover steps 1..{t2}, got lengths {len(x_steps)}, {len(y_steps)}"
        )
    acc = None
    for t in range(t1 - 1, t2):
        x = require_tensor4(x_steps[t], f"x_steps[{t}]")
        y = require_tensor4(y_steps[t], f"y_steps[{t}]")
        if x.shape != y.shape:
            raise ContractViolation(f"step {t + 1} shape mismatch: {x.shape} vs {y.shape}")
        d = np.abs(x.astype(np.float64) - y.astype(np.float64)).mean(axis=(0, 1))
        acc = d if acc is None else acc + d
    lo, hi = float(acc.min()), float(acc.max())
    if hi == lo:
        return DiffMap(np.zeros(acc.shape, dtype=np.float32), degenerate=True)
    norm = ((acc - lo) / (hi - lo)).astype(np.float32)
    # float32 rounding can nudge past 1.0
    np.clip(norm, 0.0, 1.0, out=norm)
    return DiffMap(norm, degenerate=False)


def otsu_threshold(diff: DiffMap) -> OtsuResult:
    """Pick the threshold maximizing between-class variance.

    Evaluates n1*n2/(n1+n2)^2 * (mean_below - mean_at_or_above)^2 at 256
    uniformly spaced candidates in (0, 1) (bin midpoints (i + 0.5) / 256),
    skipping candidates that leave either class empty. Ties break toward the
    smaller threshold, i.e. the larger mask. A degenerate map returns an empty
    mask with epsilon 1 and the no-edit status.
    """
    h, w = diff.values.shape
    if diff.degenerate:
        return OtsuResult(1.0, 0.0, BinaryMask.empty(h, w), no_edit=True)
    v = diff.values.ravel().astype(np.float64)
    total = v.size
    cand = (np.arange(OTSU_CANDIDATES, dtype=np.float64) + 0.5) / OTSU_CANDIDATES
    ge = v[None, :] >= cand[:, None]
    n2 = ge.sum(axis=1)
    n1 = total - n2
    valid = (n1 > 0) & (n2 > 0)
    if not valid.any():
        return OtsuResult(1.0, 0.0, BinaryMask.empty(h, w), no_edit=True)
    s2 = (v[None, :] * ge).sum(axis=1)
    s1 = (v[None, :] * ~ge).sum(axis=1)
    obj = np.full(cand.shape, -np.inf)
    mean1 = np.divide(s1, n1, out=np.zeros_like(s1), where=valid)
    mean2 = np.divide(s2, n2, out=np.zeros_like(s2), where=valid)
    obj[valid] = (n1[valid] * n2[valid]) / float(total) ** 2 * (mean1[valid] - mean2[valid]) ** 2
    best = int(np.argmax(obj))
    epsilon = float(cand[best])
    mask = BinaryMask(diff.values >= epsilon)
    return OtsuResult(epsilon, float(obj[best]), mask, no_edit=False)


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    """Morphological dilation with a square element of side 2*radius + 1."""
    if radius < 0:
        raise ContractViolation(f"dilation radius must be >= 0, got {radius}")
    if radius == 0:
        return mask
    h, w = mask.shape
    padded = np.pad(mask.bits, radius)
    out = np.zeros((h, w), dtype=bool)
    for di in range(2 * radius + 1):
        for dj in range(2 * radius + 1):
            out |= padded[di : di + h, dj : dj + w]
    return BinaryMask(out)


def build_pyramid(mask: BinaryMask, levels: int) -> MaskPyramid:
    """OR-pool the mask down through `levels` resolutions (level 0 = input)."""
    if levels < 1:
        raise ContractViolation(f"pyramid needs at least one level, got {levels}")
    factor = 2 ** (levels - 1)
    if mask.h % factor != 0 or mask.w % factor != 0:
        raise ContractViolation(
            f"mask dims {mask.shape} not divisible by 2^(levels-1) = {factor}"
        )
    out = [mask]
    bits = mask.bits
    for _ in range(levels - 1):
        h, w = bits.shape
        bits = bits.reshape(h // 2, 2, w // 2, 2).any(axis=(1, 3))
        out.append(BinaryMask(bits))
    return MaskPyramid(tuple(out))


def centered_square_mask(h: int, w: int, fraction: float) -> BinaryMask:
    """Contiguous square mask of roughly the requested area fraction."""
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation(f"mask fraction must be in (0, 1], got {fraction}")
    side = int(round((fraction * h * w) ** 0.5))
    side = max(1, min(side, h, w))
    top, left = (h - side) // 2, (w - side) // 2
    bits = np.zeros((h, w), dtype=bool)
    bits[top : top + side, left : left + side] = True
    return BinaryMask(bits)


def mask_to_tensor(mask: BinaryMask) -> np.ndarray:
    """Masks travel through the fixture format as 1x1xHxW {0, 1} tensors."""
    return mask.bits.astype(np.float32)[None, None]


def mask_from_tensor(arr: np.ndarray) -> BinaryMask:
    require_tensor4(arr, "mask tensor")
    if arr.shape[0] != 1 or arr.shape[1] != 1:
        raise ContractViolation(f"mask tensor must be 1x1xHxW, got {arr.shape}")
    return BinaryMask(arr[0, 0] >= 0.5)


def save_mask_pgm(path, mask: BinaryMask) -> None:
    """Binary PGM export for eyeballing masks (active pixels are white)."""
    header = f"P5\n{mask.w} {mask.h}\n255\n".encode("ascii")
    payload = np.where(mask.bits, 255, 0).astype(np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
