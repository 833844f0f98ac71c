"""Sparse incremental inference engine for iterative latent editing.

The pipeline detects the latent region affected by a small prompt change,
then recomputes only that region through pixel-wise sparse convolution,
cached-statistics normalization and gathered sparse attention, reusing a
tiered activation cache for everything else.
"""

from .cache import BufferPool, CacheKey, CacheStats, CacheStore, CompactTensor, Role
from .errors import CacheMissError, ConfigError, ContractViolation
from .masks import (
    BinaryMask,
    DiffMap,
    MaskPyramid,
    OtsuResult,
    accumulate_diff,
    build_pyramid,
    centered_square_mask,
    dilate,
    mask_from_tensor,
    mask_to_tensor,
    otsu_threshold,
    save_mask_pgm,
)
from .sparse import (
    GatherPlan,
    SparseLayerContext,
    gather_blocks,
    select_gather_plan,
    sparse_conv,
    sparse_cross_attention,
    sparse_group_norm,
    sparse_self_attention,
)
from .tensors import (
    ConvWeights,
    LayerMacs,
    MacsReport,
    attention,
    conv2d,
    group_norm,
    load_tensor,
    macs_attention,
    macs_conv,
    normalize_with_group_stats,
    save_tensor,
)
from .unet import (
    EditResult,
    EditSession,
    PromptTokens,
    SharedTokenMap,
    UNet,
    UNetConfig,
    detect_mask,
    edit,
    embed_tokens,
    generate_dense,
    initial_latent,
)

__version__ = "0.1.0"
