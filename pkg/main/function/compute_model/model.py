#!/usr/bin/env python3
"""
Toy ObjectRelator Network
=========================

A desk-scale cross-view segmentation model built on the tape tensor:

1. Patch encoder: 8x8 patches -> D-dim embeddings (f_patches), plus a
   per-pixel map (f_pixels) refined from each pixel's patch embedding and
   its own colour
2. Mask prompt: mask-weighted pooling of query-view patch embeddings into
   N = 4 quadrant tokens
3. Context block: one single-head self-attention + feed-forward block over
   [f_patches; t_ins; t_txt; t_vis; t_mask]; the same weights serve the
   query-prompt pass and the target-prompt pass
4. MCFuse on (e_txt, e_vis) and XObjAlign between the two passes
5. Mask head: pooled condition vector dotted with every pixel embedding

Parameter groups are addressed by name prefix (``encoder.``, ``decoder.``,
``context.``, ``tokens.``, ``mcfuse.``, ``head.``) so the trainer can freeze
them per stage.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

from function.compute_data.synthgen import PairSample
from function.compute_mask.masks import BinaryMask
from function.compute_model.fusion import (
    AlignConfig, FusionConfig, k_lea, mcfuse, total_loss, xobjalign_loss,
)
from function.compute_tensor.optimizer import ParamStore
from function.compute_tensor.tensor_core import (
    Tensor, add, bce_with_logits, dice_loss, matmul, mean_all, mean_rows, no_grad, row_norm,
    row_softmax, scale, sigmoid, sub, take_rows, tanh, transpose, vstack,
)
from function.errors import ConditionError, ConfigError, DimensionError, StateError

logger = logging.getLogger(__name__)

ENCODER_PREFIX = "encoder."
MCFUSE_PREFIX = "mcfuse."


@dataclass
class ModelConfig:
    dim: int = 32
    num_categories: int = 5
    num_visual_tokens: int = 4
    image_size: int = 64
    patch_size: int = 8
    ffn_mult: int = 2
    init_k: float = 0.8                  # k_lea at initialisation
    init_mask_bias: float = -2.0
    bce_weight: float = 1.0
    dice_weight: float = 1.0

    def __post_init__(self):
        if self.dim < 1 or self.num_categories < 1 or self.ffn_mult < 1:
            raise ConfigError("dim, num_categories and ffn_mult must be positive")
        if self.num_visual_tokens != 4:
            raise ConfigError("visual tokens are pooled per image quadrant, so num_visual_tokens must be 4")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if (self.image_size // self.patch_size) % 2:
            raise ConfigError("the patch grid must split evenly into quadrants")
        if not 0.0 < self.init_k < 1.0:
            raise ConfigError(f"init_k must be in (0, 1), got {self.init_k}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class CondTokens:
    t_ins: Tensor
    t_txt: Optional[Tensor]              # None when the text condition is withheld
    t_vis_query: Tensor
    t_vis_target: Optional[Tensor]
    t_mask: Tensor


@dataclass
class Embeddings:
    e_txt: Optional[Tensor]
    e_vis_query: Tensor
    e_mask: Tensor
    e_vis_target: Optional[Tensor] = None
    e_cond: Optional[Tensor] = None
    ca_fuse: Optional[Tensor] = None


@dataclass
class ForwardResult:
    logits: Tensor
    l_mask: Tensor
    l_xobj: Optional[Tensor]
    total: Tensor
    embeddings: Embeddings


def logits_to_mask(logits: np.ndarray) -> BinaryMask:
    """sigmoid(z) >= 0.5 exactly when z >= 0."""
    return BinaryMask.from_array(np.asarray(logits) >= 0.0)


class ObjectRelatorModel:
    """
    Parameters plus the forward passes of the cross-view relator.

    ``mcfuse_enabled`` and ``fusion`` are part of the model: they decide
    whether and how E_con is built from the text and visual embeddings.
    """

    def __init__(self, config: Optional[ModelConfig] = None, fusion: Optional[FusionConfig] = None,
                 mcfuse_enabled: bool = True, seed: int = 0):
        self.config = config or ModelConfig()
        self.fusion = fusion or FusionConfig()
        self.mcfuse_enabled = bool(mcfuse_enabled)
        self.params = ParamStore()
        self._init_params(seed)

        s, p, g = self.config.image_size, self.config.patch_size, self.config.grid
        ys, xs = np.divmod(np.arange(s * s), s)
        self._pixel_patch = (ys // p) * g + xs // p
        gy, gx = np.divmod(np.arange(g * g), g)
        half = g // 2
        self._patch_quadrant = (gy // half) * 2 + gx // half
        logger.debug(f"ObjectRelatorModel: D={self.config.dim}, K={self.config.num_categories}, "
                     f"{self.parameter_count()} parameters")

    # ------------------------------------------------------------------ params
    def _init_params(self, seed: int) -> None:
        cfg = self.config
        d, k, h = cfg.dim, cfg.num_categories, cfg.dim * cfg.ffn_mult
        rng = np.random.default_rng(int(seed))

        def normal(rows, cols, fan_in):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(rows, cols))

        add_param = self.params.add
        add_param("encoder.patch_w", normal(cfg.patch_dim, d, cfg.patch_dim))
        add_param("encoder.patch_b", np.zeros((1, d)))
        add_param("decoder.refine_w", normal(d, d, d))
        add_param("decoder.color_w", normal(3, d, 3))
        add_param("decoder.refine_b", np.zeros((1, d)))
        for name in ("w_q", "w_k", "w_v", "w_o"):
            add_param(f"context.{name}", normal(d, d, d))
        add_param("context.ff1_w", normal(d, h, d))
        add_param("context.ff1_b", np.zeros((1, h)))
        add_param("context.ff2_w", normal(h, d, h) * 0.5)
        add_param("context.ff2_b", np.zeros((1, d)))
        add_param("tokens.text_table", normal(k, d, 1.0))
        add_param("tokens.t_ins", normal(1, d, 1.0))
        add_param("tokens.t_mask", normal(1, d, 1.0))
        for name in ("w_q", "w_k", "w_v"):
            add_param(f"mcfuse.{name}", normal(d, d, d))
        add_param("mcfuse.alpha", np.array([[math.log(cfg.init_k / (1.0 - cfg.init_k))]]))
        add_param("head.w_out", normal(d, d, d))
        add_param("head.b_out", np.zeros((1, d)))
        add_param("head.bias", np.array([[cfg.init_mask_bias]]))

    def parameter_count(self) -> int:
        return self.params.parameter_count()

    def k_lea(self) -> float:
        return k_lea(self.params).item()

    # ----------------------------------------------------------------- encoder
    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        s = self.config.image_size
        if image.shape != (s, s, 3):
            raise DimensionError(f"image must be {s}x{s}x3, got {image.shape}")
        if not np.all(np.isfinite(image)):
            raise ValueError("image contains non-finite values")
        return image

    def patchify(self, image: np.ndarray) -> np.ndarray:
        """Row-major grid of flattened patches, shape (num_patches, patch_dim)."""
        image = self._check_image(image)
        g, p = self.config.grid, self.config.patch_size
        return image.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)

    def embed_patches(self, image: np.ndarray) -> Tensor:
        return add(matmul(Tensor(self.patchify(image)), self.params["encoder.patch_w"]),
                   self.params["encoder.patch_b"])

    def pixel_features(self, image: np.ndarray, f_patches: Tensor) -> Tensor:
        """f_pixels[p] = f_patches[patch(p)]·W_refine + rgb(p)·W_color + b."""
        colors = Tensor(self._check_image(image).reshape(-1, 3))
        refined = take_rows(matmul(f_patches, self.params["decoder.refine_w"]), self._pixel_patch)
        return add(add(refined, matmul(colors, self.params["decoder.color_w"])),
                   self.params["decoder.refine_b"])

    def encode_image(self, image: np.ndarray) -> Tuple[Tensor, Tensor]:
        f_patches = self.embed_patches(image)
        return f_patches, self.pixel_features(image, f_patches)

    # ------------------------------------------------------------ mask prompt
    def pooling_weights(self, mask: BinaryMask) -> np.ndarray:
        """Constant N x num_patches matrix turning patch embeddings into quadrant tokens."""
        s, p, g = self.config.image_size, self.config.patch_size, self.config.grid
        if mask.shape != (s, s):
            raise DimensionError(f"mask must be {s}x{s}, got {mask.shape}")
        if mask.is_empty():
            raise ConditionError("cannot pool visual tokens from an empty mask")
        overlap = mask.bits.reshape(g, p, g, p).sum(axis=(1, 3)).reshape(-1) / float(p * p)
        whole = overlap / overlap.sum()
        weights = np.zeros((self.config.num_visual_tokens, g * g))
        for i in range(self.config.num_visual_tokens):
            in_quadrant = np.where(self._patch_quadrant == i, overlap, 0.0)
            total = in_quadrant.sum()
            weights[i] = in_quadrant / total if total > 0 else whole
        return weights

    def pool_visual_tokens(self, f_patches: Tensor, mask: BinaryMask) -> Tensor:
        if f_patches.rows != self.config.num_patches:
            raise DimensionError(f"expected {self.config.num_patches} patch rows, got {f_patches.rows}")
        return matmul(Tensor(self.pooling_weights(mask)), f_patches)

    def condition_tokens(self, sample: PairSample, use_text: bool = True,
                         include_target: bool = False, query_patches: Optional[Tensor] = None,
                         target_patches: Optional[Tensor] = None) -> CondTokens:
        if not 0 <= sample.text_category < self.config.num_categories:
            raise ConfigError(f"text category {sample.text_category} outside the model's "
                              f"{self.config.num_categories} classes")
        q_patches = query_patches if query_patches is not None else self.embed_patches(sample.query_image)
        t_vis_target = None
        if include_target:
            t_patches = target_patches if target_patches is not None else self.embed_patches(sample.target_image)
            t_vis_target = self.pool_visual_tokens(t_patches, sample.target_mask)
        return CondTokens(
            t_ins=self.params["tokens.t_ins"],
            t_txt=take_rows(self.params["tokens.text_table"], [sample.text_category]) if use_text else None,
            t_vis_query=self.pool_visual_tokens(q_patches, sample.query_mask),
            t_vis_target=t_vis_target,
            t_mask=self.params["tokens.t_mask"],
        )

    # ---------------------------------------------------------- context block
    def _context_block(self, x: Tensor) -> Tensor:
        p = self.params
        q = matmul(x, p["context.w_q"])
        k = matmul(x, p["context.w_k"])
        v = matmul(x, p["context.w_v"])
        attn = row_softmax(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(self.config.dim)))
        h = add(x, matmul(matmul(attn, v), p["context.w_o"]))
        hidden = tanh(add(matmul(h, p["context.ff1_w"]), p["context.ff1_b"]))
        return add(h, add(matmul(hidden, p["context.ff2_w"]), p["context.ff2_b"]))

    def context_forward(self, f_patches: Tensor, tokens: CondTokens, use_target_vis: bool = False) -> Embeddings:
        """One pass of the shared block; returns e_txt, e_vis (query or target slot) and e_mask."""
        if use_target_vis and tokens.t_vis_target is None:
            raise StateError("target pass requested without target visual tokens")
        t_vis = tokens.t_vis_target if use_target_vis else tokens.t_vis_query
        parts = [f_patches, tokens.t_ins]
        if tokens.t_txt is not None:
            parts.append(tokens.t_txt)
        parts.extend([t_vis, tokens.t_mask])
        out = self._context_block(vstack(parts))

        pos = f_patches.rows + 1
        e_txt = None
        if tokens.t_txt is not None:
            e_txt = take_rows(out, [pos])
            pos += 1
        n = t_vis.rows
        e_vis = take_rows(out, np.arange(pos, pos + n))
        e_mask = take_rows(out, [pos + n])
        if use_target_vis:
            return Embeddings(e_txt=e_txt, e_vis_query=None, e_mask=e_mask, e_vis_target=e_vis)
        return Embeddings(e_txt=e_txt, e_vis_query=e_vis, e_mask=e_mask)

    def fuse(self, e_txt: Optional[Tensor], e_vis: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        if not self.mcfuse_enabled or e_txt is None:
            return e_vis, None
        return mcfuse(e_txt, e_vis, self.params, self.fusion)

    # -------------------------------------------------------------- mask head
    def mask_head(self, f_pixels: Tensor, e_cond: Tensor, e_mask: Tensor,
                  gt: Optional[BinaryMask] = None) -> Tuple[Tensor, Optional[Tensor]]:
        p = self.params
        c = add(matmul(add(mean_rows(e_cond), e_mask), p["head.w_out"]), p["head.b_out"])
        logits = add(matmul(f_pixels, transpose(c)), p["head.bias"])
        if gt is None:
            return logits, None
        return logits, self.mask_loss(logits, gt)

    def mask_loss(self, logits: Tensor, gt: BinaryMask) -> Tensor:
        s = self.config.image_size
        if gt.shape != (s, s) or logits.rows != s * s:
            raise DimensionError(f"gt mask {gt.shape} does not match {logits.rows} logits")
        target = gt.bits.reshape(-1, 1).astype(np.float64)
        bce = bce_with_logits(logits, target)
        dice = dice_loss(sigmoid(logits), target)
        return add(scale(bce, self.config.bce_weight), scale(dice, self.config.dice_weight))

    # ----------------------------------------------------------------- passes
    def forward(self, sample: PairSample, align: Optional[AlignConfig] = None,
                use_alignment: bool = False) -> ForwardResult:
        """
        Training forward pass.

        With ``use_alignment`` and a visible target, the target-prompt pass is
        run as well and the XObjAlign term enters the total loss.
        """
        align = align or AlignConfig()
        if not sample.visible_query:
            raise ConditionError("sample has no visible query object")
        target_pass = use_alignment and sample.visible_target

        f_patches, f_pixels = self.encode_image(sample.target_image)
        tokens = self.condition_tokens(sample, include_target=target_pass, target_patches=f_patches)
        emb = self.context_forward(f_patches, tokens, use_target_vis=False)
        emb.e_cond, emb.ca_fuse = self.fuse(emb.e_txt, emb.e_vis_query)

        l_xobj = None
        if target_pass:
            emb.e_vis_target = self.context_forward(f_patches, tokens, use_target_vis=True).e_vis_target
            if self.fusion.placement == "before_align" and self.mcfuse_enabled:
                fused_target, _ = self.fuse(emb.e_txt, emb.e_vis_target)
                l_xobj = xobjalign_loss(emb.e_cond, fused_target, align)
            else:
                l_xobj = xobjalign_loss(emb.e_vis_query, emb.e_vis_target, align)

        logits, l_mask = self.mask_head(f_pixels, emb.e_cond, emb.e_mask, gt=sample.target_mask)
        return ForwardResult(logits=logits, l_mask=l_mask, l_xobj=l_xobj,
                             total=total_loss(l_mask, l_xobj, align), embeddings=emb)

    def predict_logits(self, sample: PairSample, use_text: bool = True) -> np.ndarray:
        """
        Inference: (S, S) logits for the target view.

        Reads only the two images, the query mask and the text category; with
        ``use_text`` off the text token is left out and E_con = E_vis*.
        """
        with no_grad():
            f_patches, f_pixels = self.encode_image(sample.target_image)
            tokens = self.condition_tokens(sample, use_text=use_text)
            emb = self.context_forward(f_patches, tokens)
            e_cond, _ = self.fuse(emb.e_txt, emb.e_vis_query)
            logits, _ = self.mask_head(f_pixels, e_cond, emb.e_mask)
        s = self.config.image_size
        return logits.data.reshape(s, s).copy()

    def predict(self, sample: PairSample, use_text: bool = True) -> BinaryMask:
        return logits_to_mask(self.predict_logits(sample, use_text))

    def embedding_gap(self, samples: Iterable[PairSample]) -> float:
        """Mean row-wise Euclidean distance between E_vis* and E_vis over samples visible in both views."""
        gaps: List[float] = []
        with no_grad():
            for sample in samples:
                if not (sample.visible_query and sample.visible_target):
                    continue
                f_patches = self.embed_patches(sample.target_image)
                tokens = self.condition_tokens(sample, include_target=True, target_patches=f_patches)
                e_q = self.context_forward(f_patches, tokens).e_vis_query
                e_t = self.context_forward(f_patches, tokens, use_target_vis=True).e_vis_target
                gaps.append(mean_all(row_norm(sub(e_q, e_t))).item())
        if not gaps:
            logger.warning("embedding_gap: no sample visible in both views")
            return float("nan")
        return float(np.mean(gaps))
