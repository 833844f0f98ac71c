"""Dense reference kernels, MAC accounting, and the binary tensor fixture format.

These kernels are the ground truth that the sparse execution path is checked
against, so they are written for determinism first: convolution and attention
accumulate in float64 and round to float32 exactly once on output, and the
convolution summation order is fixed (kernel row, then kernel column, then
input channel). Calling a kernel twice with identical inputs yields
bit-identical results.

Feature maps are plain float32 numpy arrays of rank 4 in
(batch, channels, height, width) layout.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

FIXTURE_MAGIC = b"FT4\x00"


def _ensure_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ContractViolation(f"{name} produced non-finite values")


def require_tensor4(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(arr, np.ndarray) or arr.ndim != 4:
        raise ContractViolation(f"{name} must be a rank-4 ndarray, got {getattr(arr, 'shape', type(arr))}")
    if arr.dtype != np.float32:
        raise ContractViolation(f"{name} must be float32, got {arr.dtype}")
    return arr


@dataclass(frozen=True)
class ConvWeights:
    """Stride-1 convolution weights with symmetric zero padding.

    weight has shape (c_out, c_in, h_k, w_k); kernel sides must be odd so that
    padding = (k - 1) / 2 keeps the spatial size unchanged.
    """

    weight: np.ndarray
    bias: np.ndarray
    padding: int

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ContractViolation(f"conv weight must be rank 4, got shape {self.weight.shape}")
        c_out, _, h_k, w_k = self.weight.shape
        if h_k % 2 == 0 or w_k % 2 == 0:
            raise ContractViolation(f"kernel sides must be odd, got ({h_k}, {w_k})")
        if self.bias.shape != (c_out,):
            raise ContractViolation(f"bias must have shape ({c_out},), got {self.bias.shape}")
        if self.padding < 0:
            raise ContractViolation("padding must be non-negative")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def _conv_accumulate(x64: np.ndarray, weights: ConvWeights) -> np.ndarray:
    """Core valid-mode convolution on an already padded float64 input.

    Accumulates per kernel row, then kernel column; the channel reduction
    happens inside a single matmul per tap.
    """
    n, c_in, hp, wp = x64.shape
    h_k, w_k = weights.kernel
    oh, ow = hp - h_k + 1, wp - w_k + 1
    w64 = weights.weight.astype(np.float64)
    acc = np.zeros((n, weights.c_out, oh * ow), dtype=np.float64)
    for ki in range(h_k):
        for kj in range(w_k):
            patch = x64[:, :, ki : ki + oh, kj : kj + ow].reshape(n, c_in, oh * ow)
            acc += w64[:, :, ki, kj] @ patch
    acc += weights.bias.astype(np.float64)[None, :, None]
    out = acc.reshape(n, weights.c_out, oh, ow).astype(np.float32)
    _ensure_finite("conv2d", out)
    return out


def conv2d(x: np.ndarray, weights: ConvWeights) -> np.ndarray:
    """Same-size cross-correlation with bias over a rank-4 feature map."""
    require_tensor4(x, "conv2d input")
    if x.shape[1] != weights.c_in:
        raise ContractViolation(
            f"conv2d channel mismatch: input {x.shape} vs weight {weights.weight.shape}"
        )
    h_k, w_k = weights.kernel
    if weights.padding != (h_k - 1) // 2 or weights.padding != (w_k - 1) // 2:
        raise ContractViolation(
            f"padding {weights.padding} does not preserve spatial size for kernel ({h_k}, {w_k})"
        )
    p = weights.padding
    n, c, h, w = x.shape
    x64 = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    x64[:, :, p : p + h, p : p + w] = x
    return _conv_accumulate(x64, weights)


def conv2d_valid(blocks: np.ndarray, weights: ConvWeights) -> np.ndarray:
    """Valid-mode convolution over a stack of pre-padded gathered blocks."""
    require_tensor4(blocks, "conv2d_valid input")
    if blocks.shape[1] != weights.c_in:
        raise ContractViolation(
            f"conv2d_valid channel mismatch: input {blocks.shape} vs weight {weights.weight.shape}"
        )
    h_k, w_k = weights.kernel
    if blocks.shape[2] < h_k or blocks.shape[3] < w_k:
        raise ContractViolation(f"block {blocks.shape} smaller than kernel ({h_k}, {w_k})")
    return _conv_accumulate(blocks.astype(np.float64), weights)


def group_norm(
    x: np.ndarray, groups: int, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group normalization over (channel-group, height, width).

    Returns (output, mean, var), with the per-(sample, group) statistics
    rounded to float32 so a caller can cache them and later reproduce this
    output bit-for-bit via normalize_with_group_stats.
    """
    require_tensor4(x, "group_norm input")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ContractViolation(f"channels {c} not divisible by groups {groups}")
    xg = x.reshape(n, groups, c // groups, h, w).astype(np.float64)
    mean = xg.mean(axis=(2, 3, 4)).astype(np.float32)
    var = xg.var(axis=(2, 3, 4)).astype(np.float32)
    y = normalize_with_group_stats(x, mean, var, gamma, beta, eps)
    return y, mean, var


def normalize_with_group_stats(
    x: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Apply y = gamma * (x - mean) / sqrt(var + eps) + beta with given stats.

    Shared by the dense path and the cached-statistics sparse path; both must
    go through this exact function so that identical inputs and stats give
    bit-identical outputs.
    """
    require_tensor4(x, "normalize input")
    n, c, h, w = x.shape
    if mean.shape != var.shape or mean.ndim != 2 or mean.shape[0] != n:
        raise ContractViolation(f"stats shape {mean.shape} invalid for input {x.shape}")
    groups = mean.shape[1]
    if c % groups != 0:
        raise ContractViolation(f"channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractViolation(f"gamma/beta must have shape ({c},)")
    xg = x.reshape(n, groups, c // groups, h, w).astype(np.float64)
    m = mean.astype(np.float64)[:, :, None, None, None]
    v = var.astype(np.float64)[:, :, None, None, None]
    yg = (xg - m) / np.sqrt(v + float(eps))
    y = yg.reshape(n, c, h, w)
    y = y * gamma.astype(np.float64)[None, :, None, None] + beta.astype(np.float64)[None, :, None, None]
    out = y.astype(np.float32)
    _ensure_finite("group_norm", out)
    return out


def attention_scores(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """Row-stable softmax(q @ k.T * scale) as a float32 weight matrix."""
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ContractViolation(f"attention dim mismatch: q {q.shape} vs k {k.shape}")
    s = q.astype(np.float64) @ k.astype(np.float64).T
    s *= float(scale)
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s.astype(np.float32)


def apply_attention(weights: np.ndarray, v: np.ndarray) -> np.ndarray:
    if weights.shape[1] != v.shape[0]:
        raise ContractViolation(f"attention apply mismatch: weights {weights.shape} vs v {v.shape}")
    out = (weights.astype(np.float64) @ v.astype(np.float64)).astype(np.float32)
    _ensure_finite("attention", out)
    return out


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """softmax(q @ k.T * scale) @ v with a numerically stable softmax."""
    if k.shape[0] != v.shape[0]:
        raise ContractViolation(f"k rows {k.shape[0]} != v rows {v.shape[0]}")
    return apply_attention(attention_scores(q, k, scale), v)


def macs_conv(weights: ConvWeights, active_output_pixels: int) -> int:
    """Multiply-accumulates for a stride-1 conv over the given output pixels."""
    if active_output_pixels < 0:
        raise ContractViolation("active_output_pixels must be >= 0")
    h_k, w_k = weights.kernel
    return active_output_pixels * weights.c_out * weights.c_in * h_k * w_k


def macs_attention(q_tokens: int, kv_tokens: int, dim: int) -> int:
    """Score matmul plus weighted sum: 2 * q * kv * dim."""
    return 2 * q_tokens * kv_tokens * dim


def macs_linear(tokens: int, d_in: int, d_out: int) -> int:
    return tokens * d_in * d_out


@dataclass
class LayerMacs:
    layer_id: int
    kind: str
    dense_macs: int
    sparse_macs: int

    def __post_init__(self):
        if self.sparse_macs > self.dense_macs:
            raise ContractViolation(
                f"layer {self.layer_id}: sparse MACs {self.sparse_macs} exceed dense {self.dense_macs}"
            )


@dataclass
class MacsReport:
    """Per-layer dense-vs-sparse multiply-accumulate accounting."""

    layers: list[LayerMacs] = field(default_factory=list)

    @property
    def dense_total(self) -> int:
        return sum(l.dense_macs for l in self.layers)

    @property
    def sparse_total(self) -> int:
        return sum(l.sparse_macs for l in self.layers)

    @property
    def ratio(self) -> float:
        sparse = self.sparse_total
        if sparse == 0:
            return math.inf
        return self.dense_total / sparse

    def to_json(self) -> dict:
        return {
            "layers": [
                {
                    "layer_id": l.layer_id,
                    "kind": l.kind,
                    "dense_macs": l.dense_macs,
                    "sparse_macs": l.sparse_macs,
                }
                for l in self.layers
            ],
            "dense_total": self.dense_total,
            "sparse_total": self.sparse_total,
            "ratio": None if math.isinf(self.ratio) else self.ratio,
        }


def save_tensor(path, arr: np.ndarray) -> None:
    """Write a rank-4 float32 tensor in the fixture format.

    Layout: magic "FT4\\0", four little-endian uint64 dims, then the float32
    payload in row-major order.
    """
    require_tensor4(arr, "save_tensor input")
    with open(path, "wb") as f:
        f.write(FIXTURE_MAGIC)
        f.write(struct.pack("<4Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FIXTURE_MAGIC:
            raise ContractViolation(f"bad fixture magic in {path}: {magic!r}")
        dims = struct.unpack("<4Q", f.read(32))
        count = int(np.prod(dims))
        buf = f.read(count * 4)
        if len(buf) != count * 4:
            raise ContractViolation(f"truncated fixture payload in {path}")
        arr = np.frombuffer(buf, dtype="<f4").reshape(dims)
    return arr.astype(np.float32)
