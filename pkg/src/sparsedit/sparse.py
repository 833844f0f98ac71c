"""Mask-restricted execution of convolution, normalization, and attention.

Each operation here computes fresh values only where the edit mask is set and
copies everything else from the previous generation's cached layer output.
That split is the engine's core contract: outside the mask the result is
bit-identical to the cache, inside the mask convolution and cross-attention
agree with their dense counterparts up to float reassociation, and the
gathered self-attention variant is an accepted approximation (queries, keys
and values are all restricted to the gathered token set).

Sparse convolution runs on rectangular blocks: the mask's output plane is
partitioned into a regular grid of tiles, the tiles touching the mask are
gathered together with their kernel halo, convolved as one stack, and
scattered back pixel-wise. The block size is chosen per mask by minimizing
f(h, w) = output-tile area * number of active tiles over a candidate set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CacheMissError, ConfigError, ContractViolation
from .masks import BinaryMask
from .tensors import (
    apply_attention,
    attention,
    attention_scores,
    conv2d_valid,
    ConvWeights,
    normalize_with_group_stats,
    require_tensor4,
)

BLOCK_CANDIDATES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class GatherPlan:
    """Result of block-size selection for one mask and kernel.

    block is the gathered input block size (tile plus halo); tile is the
    output region each block produces; origins are the top-left output
    coordinates of the active tiles on a regular grid of stride = tile size;
    cost is tile area times active tile count, which is also the number of
    output pixels the sparse convolution computes.
    """

    block: tuple[int, int]
    tile: tuple[int, int]
    kernel: tuple[int, int]
    origins: tuple[tuple[int, int], ...]
    cost: int
    image: tuple[int, int]

    def to_json(self) -> dict:
        return {
            "block": list(self.block),
            "tile": list(self.tile),
            "kernel": list(self.kernel),
            "active_tiles": len(self.origins),
            "cost": self.cost,
            "origins": [list(o) for o in self.origins],
        }


@dataclass
class SparseLayerContext:
    """Cached state one layer needs to run sparsely at one step."""

    step: int
    layer_id: int
    cached_output: np.ndarray | None = None
    cached_mean: np.ndarray | None = None
    cached_var: np.ndarray | None = None
    mask_level: int = 0
    resolution_gate: bool = True


def _tile_grid(mask_bits: np.ndarray, tile_h: int, tile_w: int) -> np.ndarray:
    """Boolean grid of which stride-aligned tiles contain an active pixel."""
    h, w = mask_bits.shape
    ny = -(-h // tile_h)
    nx = -(-w // tile_w)
    padded = np.zeros((ny * tile_h, nx * tile_w), dtype=bool)
    padded[:h, :w] = mask_bits
    return padded.reshape(ny, tile_h, nx, tile_w).any(axis=(1, 3))


def select_gather_plan(
    mask: BinaryMask,
    kernel: tuple[int, int],
    candidates: tuple[int, ...] = BLOCK_CANDIDATES,
) -> GatherPlan:
    """Choose the gather block size minimizing tile_area * active_tiles.

    Every (h, w) pair from the candidate set with h >= h_k and w >= w_k is
    scored; ties break toward the smaller block area (then height, then
    width). An empty mask returns a plan with no origins and cost 0.
    """
    h_k, w_k = kernel
    pairs = [
        (bh, bw)
        for bh in sorted(candidates)
        for bw in sorted(candidates)
        if bh >= h_k and bw >= w_k
    ]
    if not pairs:
        raise ConfigError(f"no block candidate in {candidates} fits kernel {kernel}")
    if mask.is_empty():
        bh, bw = min(pairs, key=lambda p: (p[0] * p[1], p[0], p[1]))
        return GatherPlan(
            block=(bh, bw),
            tile=(bh - h_k + 1, bw - w_k + 1),
            kernel=kernel,
            origins=(),
            cost=0,
            image=mask.shape,
        )
    best = None
    for bh, bw in pairs:
        th, tw = bh - h_k + 1, bw - w_k + 1
        grid = _tile_grid(mask.bits, th, tw)
        n_active = int(grid.sum())
        f = th * tw * n_active
        key = (f, bh * bw, bh, bw)
        if best is None or key < best[0]:
            best = (key, (bh, bw), (th, tw), grid)
    _, block, tile, grid = best
    th, tw = tile
    origins = tuple((int(iy) * th, int(ix) * tw) for iy, ix in np.argwhere(grid))
    return GatherPlan(
        block=block,
        tile=tile,
        kernel=kernel,
        origins=origins,
        cost=tile[0] * tile[1] * len(origins),
        image=mask.shape,
    )


def gather_blocks(x: np.ndarray, plan: GatherPlan, pool=None) -> np.ndarray:
    """Copy each active tile plus its kernel halo into a stacked batch.

    Halo reads outside the image are zero, matching the dense same-padding
    semantics, so a valid-mode convolution of a gathered block reproduces the
    dense output on its tile exactly.
    """
    require_tensor4(x, "gather input")
    n, c, h, w = x.shape
    if n != 1:
        raise ContractViolation(f"sparse path handles single-sample maps, got batch {n}")
    if (h, w) != plan.image:
        raise ContractViolation(f"plan built for {plan.image}, input is {(h, w)}")
    bh, bw = plan.block
    pad_h = (plan.kernel[0] - 1) // 2
    pad_w = (plan.kernel[1] - 1) // 2
    extent_y = max((oy + bh for oy, _ in plan.origins), default=0)
    extent_x = max((ox + bw for _, ox in plan.origins), default=0)
    pad_bottom = pad_h + max(0, extent_y - (h + 2 * pad_h))
    pad_right = pad_w + max(0, extent_x - (w + 2 * pad_w))
    padded = np.pad(x[0], ((0, 0), (pad_h, pad_bottom), (pad_w, pad_right)))
    count = len(plan.origins)
    if pool is not None:
        out = pool.acquire((count, c, bh, bw))
    else:
        out = np.zeros((count, c, bh, bw), dtype=np.float32)
    for i, (oy, ox) in enumerate(plan.origins):
        out[i] = padded[:, oy : oy + bh, ox : ox + bw]
    return out


def _require_cached_output(ctx: SparseLayerContext, shape) -> np.ndarray:
    if ctx.cached_output is None:
        raise CacheMissError(ctx.step, ctx.layer_id, "layer_output")
    if ctx.cached_output.shape != tuple(shape):
        raise ContractViolation(
            f"cached output shape {ctx.cached_output.shape} != expected {tuple(shape)}"
        )
    return ctx.cached_output


def sparse_conv(
    x: np.ndarray,
    weights: ConvWeights,
    plan: GatherPlan,
    ctx: SparseLayerContext,
    mask: BinaryMask,
    pool=None,
) -> np.ndarray:
    """Convolution recomputed only at mask-active pixels.

    Starts from a copy of the cached layer output, convolves the gathered
    blocks, and scatters individual output pixels whose mask bit is set.
    Pixels outside the mask are never written, which keeps them bit-identical
    to the cache.
    """
    require_tensor4(x, "sparse_conv input")
    n, _, h, w = x.shape
    if mask.shape != (h, w) or plan.image != (h, w):
        raise ContractViolation(
            f"mask {mask.shape} / plan {plan.image} inconsistent with input {(h, w)}"
        )
    out_shape = (n, weights.c_out, h, w)
    if not plan.origins:
        return _require_cached_output(ctx, out_shape).copy()
    if ctx.cached_output is not None:
        base = _require_cached_output(ctx, out_shape).copy()
    elif mask.all_active():
        base = np.zeros(out_shape, dtype=np.float32)
    else:
        raise CacheMissError(ctx.step, ctx.layer_id, "layer_output")
    blocks = gather_blocks(x, plan, pool=pool)
    tiles = conv2d_valid(blocks, weights)
    th, tw = plan.tile
    for i, (oy, ox) in enumerate(plan.origins):
        ye, xe = min(oy + th, h), min(ox + tw, w)
        sub = mask.bits[oy:ye, ox:xe]
        base[:, :, oy:ye, ox:xe][:, :, sub] = tiles[i][:, : ye - oy, : xe - ox][:, sub]
    if pool is not None:
        pool.release(blocks)
    return base


def sparse_group_norm(
    x: np.ndarray,
    ctx: SparseLayerContext,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float,
    mask: BinaryMask,
) -> np.ndarray:
    """Group norm using the previous generation's statistics inside the mask.

    No reduction over the current input happens: active pixels are normalized
    with the cached mean/variance, inactive pixels are copied from the cached
    layer output.
    """
    require_tensor4(x, "sparse_group_norm input")
    if ctx.cached_mean is None or ctx.cached_var is None:
        raise CacheMissError(ctx.step, ctx.layer_id, "norm_mean/norm_var")
    if mask.shape != x.shape[2:]:
        raise ContractViolation(f"mask {mask.shape} inconsistent with input {x.shape}")
    y = normalize_with_group_stats(x, ctx.cached_mean, ctx.cached_var, gamma, beta, eps)
    if mask.all_active():
        return y
    out = _require_cached_output(ctx, x.shape).copy()
    bits = mask.bits
    out[:, :, bits] = y[:, :, bits]
    return out


def _to_tokens(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if n != 1:
        raise ContractViolation(f"sparse attention handles single-sample maps, got batch {n}")
    return x[0].reshape(c, h * w).T


def _project(tokens: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (tokens.astype(np.float64) @ w.astype(np.float64)).astype(np.float32)


def sparse_self_attention(
    x: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    scale: float,
    ctx: SparseLayerContext,
    mask: BinaryMask,
) -> np.ndarray:
    """Self-attention over the gathered mask-active tokens only.

    Keys and values are restricted to the gathered set, so active outputs
    deviate from dense attention by design; inactive positions come from the
    cached output unchanged. Only allowed at layers passing the resolution
    gate.
    """
    if not ctx.resolution_gate:
        raise ContractViolation(
            f"layer {ctx.layer_id} does not pass the resolution gate; run dense attention"
        )
    require_tensor4(x, "sparse_self_attention input")
    n, c, h, w = x.shape
    if mask.shape != (h, w):
        raise ContractViolation(f"mask {mask.shape} inconsistent with input {x.shape}")
    active = np.flatnonzero(mask.bits.ravel())
    if active.size == 0:
        return _require_cached_output(ctx, x.shape).copy()
    tokens = _to_tokens(x)
    g = tokens[active]
    out_tokens = attention(_project(g, wq), _project(g, wk), _project(g, wv), scale)
    if mask.all_active():
        out = np.empty_like(x)
    else:
        out = _require_cached_output(ctx, x.shape).copy()
    out[0].reshape(c, h * w)[:, active] = out_tokens.T
    return out


def sparse_cross_attention(
    x: np.ndarray,
    text_k: np.ndarray,
    text_v: np.ndarray,
    wq: np.ndarray,
    scale: float,
    ctx: SparseLayerContext,
    mask: BinaryMask,
) -> np.ndarray:
    """Cross-attention for mask-active image tokens against all text tokens.

    Each active row sees the full text key/value set, so active outputs match
    dense cross-attention; inactive positions come from the cached output.
    """
    if not ctx.resolution_gate:
        raise ContractViolation(
            f"layer {ctx.layer_id} does not pass the resolution gate; run dense attention"
        )
    require_tensor4(x, "sparse_cross_attention input")
    n, c, h, w = x.shape
    if mask.shape != (h, w):
        raise ContractViolation(f"mask {mask.shape} inconsistent with input {x.shape}")
    if text_k.shape[0] != text_v.shape[0]:
        raise ContractViolation(f"text k rows {text_k.shape} != text v rows {text_v.shape}")
    active = np.flatnonzero(mask.bits.ravel())
    if active.size == 0:
        return _require_cached_output(ctx, x.shape).copy()
    tokens = _to_tokens(x)
    q = _project(tokens[active], wq)
    out_tokens = apply_attention(attention_scores(q, text_k, scale), text_v)
    if mask.all_active():
        out = np.empty_like(x)
    else:
        out = _require_cached_output(ctx, x.shape).copy()
    out[0].reshape(c, h * w)[:, active] = out_tokens.T
    return out


def dense_self_attention(
    x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, scale: float
) -> np.ndarray:
    """Full-token self-attention, the dense counterpart of the sparse op."""
    require_tensor4(x, "dense_self_attention input")
    n, c, h, w = x.shape
    tokens = _to_tokens(x)
    out_tokens = attention(_project(tokens, wq), _project(tokens, wk), _project(tokens, wv), scale)
    return out_tokens.T.reshape(1, c, h, w)


def dense_cross_attention(
    x: np.ndarray, text_k: np.ndarray, text_v: np.ndarray, wq: np.ndarray, scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Full-token cross-attention; also returns the attention map for caching."""
    require_tensor4(x, "dense_cross_attention input")
    n, c, h, w = x.shape
    q = _project(_to_tokens(x), wq)
    scores = attention_scores(q, text_k, scale)
    out_tokens = apply_attention(scores, text_v)
    return out_tokens.T.reshape(1, c, h, w), scores
