#!/usr/bin/env python3
"""
Multimodal Condition Fusion and Cross-View Object Alignment
===========================================================

MCFuse lets the text condition embedding attend over the visual condition
tokens and blends the attended result back into the visual tokens:

    Q = E_txt·W_Q (replicated over N rows), K = E_vis·W_K, V = E_vis·W_V
    CA_fuse = softmax(Q·Kᵀ / √D)·V
    E_con = k·E_vis + (1 - k)·CA_fuse,   k = sigmoid(alpha)

Fusion variants (ablation rows): learnable_residual, fixed_k, ca_plain,
ca_no_params, add.

XObjAlign is the training-only consistency loss between the query-view and
target-view visual embeddings: mean row-wise Euclidean distance, or mean
``1 - cosine`` with zero rows contributing 1.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple, Union

from function.compute_tensor.optimizer import ParamStore
from function.compute_tensor.tensor_core import (
    Tensor, broadcast_rows, matmul, mean_all, row_cosine_distance, row_norm, row_softmax, scale,
    sigmoid, sub, transpose,
)
from function.errors import ConfigError, DimensionError

FUSION_VARIANTS = ("learnable_residual", "add", "ca_no_params", "ca_plain", "fixed_k")
PLACEMENTS = ("after_align", "before_align")
ALIGN_METRICS = ("euclidean", "cosine")

# parameters each variant reads; the trainer only updates these
VARIANT_PARAMS = {
    "learnable_residual": ["mcfuse.w_q", "mcfuse.w_k", "mcfuse.w_v", "mcfuse.alpha"],
    "fixed_k": ["mcfuse.w_q", "mcfuse.w_k", "mcfuse.w_v"],
    "ca_plain": ["mcfuse.w_q", "mcfuse.w_k", "mcfuse.w_v"],
    "ca_no_params": [],
    "add": [],
}


@dataclass
class FusionConfig:
    variant: str = "learnable_residual"
    fixed_k_value: float = 0.8
    placement: str = "after_align"

    def __post_init__(self):
        if self.variant not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.variant!r}; expected one of {FUSION_VARIANTS}")
        if not 0.0 <= float(self.fixed_k_value) <= 1.0:
            raise ConfigError(f"fixed_k_value must be in [0, 1], got {self.fixed_k_value}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")

    def label(self) -> str:
        return f"fixed_k({self.fixed_k_value:g})" if self.variant == "fixed_k" else self.variant

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class AlignConfig:
    metric: str = "euclidean"
    lambda_xobj: float = 1.0

    def __post_init__(self):
        if self.metric not in ALIGN_METRICS:
            raise ConfigError(f"unknown alignment metric {self.metric!r}; expected one of {ALIGN_METRICS}")
        if float(self.lambda_xobj) < 0:
            raise ConfigError(f"lambda_xobj must be >= 0, got {self.lambda_xobj}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def cross_attention(e_txt: Tensor, e_vis: Tensor, params: ParamStore) -> Tensor:
    """Text-as-query scaled dot-product attention over the visual tokens (CA_fuse)."""
    n, d = e_vis.rows, e_vis.cols
    q = matmul(broadcast_rows(e_txt, n), params["mcfuse.w_q"])
    k = matmul(e_vis, params["mcfuse.w_k"])
    v = matmul(e_vis, params["mcfuse.w_v"])
    weights = row_softmax(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)))
    return matmul(weights, v)


def k_lea(params: ParamStore) -> Tensor:
    return sigmoid(params["mcfuse.alpha"])


def mcfuse(e_txt: Tensor, e_vis: Tensor, params: ParamStore, cfg: FusionConfig) -> Tuple[Tensor, Tensor]:
    """Return ``(e_cond, ca_fuse)``; ``ca_fuse`` is None for variants without attention."""
    if e_txt.shape != (1, e_vis.cols):
        raise DimensionError(f"e_txt must be 1x{e_vis.cols}, got {e_txt.shape}")

    if cfg.variant == "add":
        return e_vis + e_txt, None
    if cfg.variant == "ca_no_params":
        affinity = matmul(broadcast_rows(e_txt, e_vis.rows), transpose(e_vis))
        return matmul(affinity, e_vis), None

    ca_fuse = cross_attention(e_txt, e_vis, params)
    if cfg.variant == "ca_plain":
        return ca_fuse, ca_fuse
    if cfg.variant == "fixed_k":
        k = float(cfg.fixed_k_value)
        return scale(e_vis, k) + scale(ca_fuse, 1.0 - k), ca_fuse
    if cfg.variant == "learnable_residual":
        k = k_lea(params)
        return k * e_vis + (1.0 - k) * ca_fuse, ca_fuse
    raise ConfigError(f"unknown fusion variant {cfg.variant!r}")


def xobjalign_loss(e_q: Tensor, e_t: Tensor, cfg: AlignConfig) -> Tensor:
    if e_q.shape != e_t.shape:
        raise DimensionError(f"alignment operands differ: {e_q.shape} vs {e_t.shape}")
    if cfg.metric == "euclidean":
        return mean_all(row_norm(sub(e_q, e_t)))
    return mean_all(row_cosine_distance(e_q, e_t))


def total_loss(l_mask: Union[Tensor, float], l_xobj: Union[Tensor, float, None],
               cfg: AlignConfig) -> Union[Tensor, float]:
    """``L = L_mask + lambda·L_xobj`` (``L_xobj`` of None counts as absent)."""
    if l_xobj is None or float(cfg.lambda_xobj) == 0.0:
        return l_mask
    return l_mask + l_xobj * float(cfg.lambda_xobj)


def fusion_params(cfg: FusionConfig) -> List[str]:
    return list(VARIANT_PARAMS[cfg.variant])
