"""Masked-autoencoder pre-training on image-like CSI with contrastive and uniformity terms.

The total objective per batch is

    mask_mse + lambda_cl * info_nce(adjacent frames) + lambda_unif * uniformity(e)

where the batch holds exactly one pair of adjacent frames from one sequence
and B - 2 other samples that serve as negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .csi_data import PatchEmbed, check_patch_dims, sinusoidal_table, unpatchify
from .errors import ConfigError, DataError
from .masking import MaskSpec, MaskStrategy, check_ratio


@dataclass
class EncoderConfig:
    d: int = 64
    heads: int = 4
    ffn_dim: int = 256
    depth: int = 4
    decoder_depth: int = 2
    decoder_d: int = 64
    decoder_heads: int = 4
    patch_height: int = 4
    patch_width: int = 4
    proj_dim: int | None = None

    def validate(self) -> None:
        for name in ("d", "heads", "ffn_dim", "depth", "decoder_depth", "decoder_d", "decoder_heads",
                     "patch_height", "patch_width"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ConfigError(f"model.d={self.d} is not divisible by model.heads={self.heads}")
        if self.decoder_d % self.decoder_heads:
            raise ConfigError(
                f"model.decoder_d={self.decoder_d} is not divisible by model.decoder_heads={self.decoder_heads}"
            )
        if self.d % 2 or self.decoder_d % 2:
            raise ConfigError("model.d and model.decoder_d must be even for sinusoidal positions")


@dataclass
class LossConfig:
    tau: float = 0.1
    lambda_cl: float = 1.0
    lambda_unif: float = 0.5
    recon_scope: str = "all"  # or "masked_only"
    mask_strategy: str = "unstructured"
    mask_ratio: float = 0.8

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"loss.tau must be > 0, got {self.tau}")
        if self.lambda_cl < 0 or self.lambda_unif < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.recon_scope not in ("all", "masked_only"):
            raise ConfigError(f"loss.recon_scope must be 'all' or 'masked_only', got {self.recon_scope!r}")
        MaskStrategy.parse(self.mask_strategy)
        check_ratio(self.mask_ratio)


# ---------------------------------------------------------------------------
# transformer


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x):
        *lead, n, d = x.shape
        q, k, v = self.qkv(x).reshape(*lead, n, 3, self.heads, d // self.heads).unbind(-3)
        q, k, v = (t.transpose(-2, -3) for t in (q, k, v))  # (..., h, n, dh)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        y = (attn @ v).transpose(-2, -3).reshape(*lead, n, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, d: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, d))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def encode(tokens: torch.Tensor, blocks: Sequence[nn.Module], norm: nn.Module | None = None) -> torch.Tensor:
    if tokens.shape[-2] < 1:
        raise DataError("encoder needs at least one visible token")
    for blk in blocks:
        tokens = blk(tokens)
    return norm(tokens) if norm is not None else tokens


# ---------------------------------------------------------------------------
# losses


def pixel_mask(masked_idx, grid_rows: int, grid_cols: int, channels: int, patch_height: int,
               patch_width: int) -> np.ndarray:
    """Image-shaped 0/1 array marking the pixels of the masked patches."""
    masked_idx = np.atleast_2d(masked_idx)
    m = np.zeros((masked_idx.shape[0], grid_rows * grid_cols, channels * patch_height * patch_width))
    for b, idx in enumerate(masked_idx):
        m[b, idx] = 1.0
    return unpatchify(m, grid_rows, grid_cols, patch_height, patch_width)


def loss_mask(x_rec: torch.Tensor, x_orig: torch.Tensor, scope: str = "all",
              pixels: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared reconstruction error.

    With ``scope="masked_only"`` the mean runs over the pixels where ``pixels``
    is nonzero.
    """
    if x_rec.shape != x_orig.shape:
        raise DataError(f"reconstruction shape {tuple(x_rec.shape)} != input shape {tuple(x_orig.shape)}")
    sq = (x_rec - x_orig) ** 2
    if scope == "all":
        return sq.mean()
    if scope != "masked_only":
        raise ConfigError(f"unknown reconstruction scope {scope!r}")
    if pixels is None or pixels.shape != sq.shape:
        raise DataError("masked_only scope needs a pixel mask of the image shape")
    count = pixels.sum()
    if count == 0:
        return sq.sum() * 0.0
    return (sq * pixels).sum() / count


def loss_infonce(s_t: torch.Tensor, s_next: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE with anchor ``s_t``, positive ``s_next`` and rows of ``negatives``."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    negatives = negatives.reshape(-1, s_t.shape[-1])
    if negatives.shape[0] < 1:
        raise DataError("InfoNCE needs at least one negative (batch size >= 3)")
    vecs = torch.cat([s_t[None], s_next[None], negatives])
    norms = vecs.norm(dim=-1)
    if bool((norms == 0).any()):
        raise DataError("cosine similarity undefined for a zero-norm vector")
    unit = vecs / norms[:, None]
    logits = (unit[1:] @ unit[0]) / tau  # positive first
    # -log(e^l0 / sum_k e^lk) = log(1 + sum_{k>0} e^(lk - l0)); softplus keeps the
    # tiny positive value when the positive dominates instead of cancelling to 0
    return F.softplus(torch.logsumexp(logits[1:] - logits[0], dim=0))


def loss_uniformity(e: torch.Tensor, anchor: int | None = None) -> torch.Tensor:
    """(1/B) sum_{j != i} (e_i . e_j)^2 for ``anchor`` i, or its mean over all anchors."""
    B = e.shape[0]
    if B < 2:
        raise DataError("uniformity needs at least two embeddings")
    gram = (e @ e.T) ** 2
    off = gram - torch.diag(torch.diagonal(gram))
    per_anchor = off.sum(dim=1) / B
    return per_anchor.mean() if anchor is None else per_anchor[anchor]


def loss_total(l_mask, l_cl, l_unif, lambda_cl: float, lambda_unif: float):
    if lambda_cl < 0 or lambda_unif < 0:
        raise ConfigError("loss weights must be >= 0")
    return l_mask + lambda_cl * l_cl + lambda_unif * l_unif


# ---------------------------------------------------------------------------
# contrastive batches


@dataclass
class ContrastiveBatch:
    indices: np.ndarray  # (B,) dataset rows; rows p and q form the positive pair
    p: int = 0
    q: int = 1

    @property
    def B(self) -> int:
        return len(self.indices)


def adjacent_pairs(sequence_ids: np.ndarray, frame_index: np.ndarray) -> np.ndarray:
    """Row indices i such that rows i and i+1 are consecutive frames of one sequence."""
    sequence_ids = np.asarray(sequence_ids)
    frame_index = np.asarray(frame_index)
    ok = (sequence_ids[1:] == sequence_ids[:-1]) & (frame_index[1:] == frame_index[:-1] + 1)
    return np.flatnonzero(ok)


def make_contrastive_batch(dataset, B: int, rng: np.random.Generator) -> ContrastiveBatch:
    """One adjacent pair plus B - 2 other samples, all drawn uniformly.

    ``dataset`` needs ``sequence_ids`` and ``frame_index`` arrays.
    """
    if B < 3:
        raise ConfigError(f"contrastive batch size must be >= 3, got {B}")
    seq = np.asarray(dataset.sequence_ids)
    pairs = adjacent_pairs(seq, dataset.frame_index)
    if pairs.size == 0:
        raise DataError("contrastive batches need a sequence with at least 2 frames")
    if len(seq) - 2 < B - 2:
        raise DataError(f"batch size {B} needs {B - 2} samples besides the pair, dataset has {len(seq) - 2}")
    i = int(pairs[rng.integers(pairs.size)])
    rest = np.delete(np.arange(len(seq)), [i, i + 1])
    others = rng.choice(rest, size=B - 2, replace=False)
    return ContrastiveBatch(np.concatenate([[i, i + 1], others]).astype(np.int64))


# ---------------------------------------------------------------------------
# model


class MaskedCsiAutoencoder(nn.Module):
    def __init__(self, image_shape: tuple[int, int, int], config: EncoderConfig | None = None):
        super().__init__()
        cfg = config or EncoderConfig()
        cfg.validate()
        self.config = cfg
        self.image_shape = tuple(int(v) for v in image_shape)
        A, H, W = self.image_shape
        self.grid = check_patch_dims(H, W, cfg.patch_height, cfg.patch_width)
        n = self.grid[0] * self.grid[1]
        self.n = n

        self.patch_embed = PatchEmbed(A, cfg.patch_height, cfg.patch_width, cfg.d)
        self.register_buffer("pos_embed", torch.as_tensor(sinusoidal_table(n, cfg.d), dtype=torch.float32),
                             persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, cfg.ffn_dim) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.d)

        self.decoder_embed = nn.Linear(cfg.d, cfg.decoder_d)
        self.mask_token = nn.Parameter(torch.zeros(cfg.decoder_d))
        self.register_buffer("decoder_pos_embed",
                             torch.as_tensor(sinusoidal_table(n, cfg.decoder_d), dtype=torch.float32),
                             persistent=False)
        self.decoder_blocks = nn.ModuleList(
            Block(cfg.decoder_d, cfg.decoder_heads, 4 * cfg.decoder_d) for _ in range(cfg.decoder_depth)
        )
        self.decoder_norm = nn.LayerNorm(cfg.decoder_d)
        self.decoder_pred = nn.Linear(cfg.decoder_d, A * cfg.patch_height * cfg.patch_width)

        proj = cfg.proj_dim or cfg.d
        self.projector = nn.Sequential(nn.Linear(cfg.d, proj), nn.GELU(), nn.Linear(proj, proj))
        self._init_weights()

    def _init_weights(self):
        nn.init.normal_(self.mask_token, std=0.02)
        w = self.patch_embed.proj.weight
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def encoder_parameters(self):
        """Parameters of the patch embedding and encoder stack (what the pose stage freezes)."""
        for name, p in self.named_parameters():
            if name.startswith(("patch_embed.", "blocks.", "norm.")):
                yield name, p

    # -- stages ----------------------------------------------------------

    def embed(self, img: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(img) + self.pos_embed

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        return encode(tokens, self.blocks, self.norm)

    def decode(self, latents: torch.Tensor, visible_idx: torch.Tensor, masked_idx: torch.Tensor) -> torch.Tensor:
        """Fill masked slots with the mask token and reconstruct the full image."""
        B, V, _ = latents.shape
        if visible_idx.shape != (B, V) or masked_idx.shape[0] != B:
            raise DataError("visible/masked index arrays do not match the latent batch")
        if V + masked_idx.shape[1] != self.n:
            raise DataError(f"{V} visible + {masked_idx.shape[1]} masked != {self.n} patches")
        order = torch.cat([visible_idx, masked_idx], dim=1)
        restore = torch.argsort(order, dim=1)
        if not torch.equal(torch.sort(order, dim=1).values,
                           torch.arange(self.n).expand(B, -1)):
            raise DataError("visible and masked indices do not partition the patch grid")
        x = self.decoder_embed(latents)
        x = torch.cat([x, self.mask_token.expand(B, masked_idx.shape[1], -1)], dim=1)
        x = torch.gather(x, 1, restore[..., None].expand(-1, -1, x.shape[-1]))
        x = x + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        patches = self.decoder_pred(self.decoder_norm(x))
        cfg = self.config
        return unpatchify(patches, self.grid[0], self.grid[1], cfg.patch_height, cfg.patch_width)

    def pool_project(self, latents: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        e = latents.mean(dim=-2)
        return e, self.projector(e)

    @torch.no_grad()
    def embed_full(self, img: torch.Tensor) -> torch.Tensor:
        """Encoder latents of every patch, no masking: (B, n, d)."""
        return self.encode(self.embed(img))

    # -- training objective ------------------------------------------------

    def losses(self, img: torch.Tensor, masks: Sequence[MaskSpec], loss_cfg: LossConfig) -> dict:
        """All pre-training terms for a contrastive batch (rows 0 and 1 are the pair)."""
        B = img.shape[0]
        if len(masks) != B:
            raise DataError(f"{len(masks)} masks for a batch of {B}")
        vis = torch.as_tensor(np.stack([m.visible for m in masks]), dtype=torch.long)
        msk = torch.as_tensor(np.stack([m.masked for m in masks]), dtype=torch.long)
        tokens = self.embed(img)
        visible = torch.gather(tokens, 1, vis[..., None].expand(-1, -1, tokens.shape[-1]))
        latents = self.encode(visible)
        recon = self.decode(latents, vis, msk)

        pixels = None
        if loss_cfg.recon_scope == "masked_only":
            cfg = self.config
            pixels = torch.as_tensor(
                pixel_mask(msk.numpy(), *self.grid, self.image_shape[0], cfg.patch_height, cfg.patch_width),
                dtype=img.dtype,
            )
        l_mask = loss_mask(recon, img, loss_cfg.recon_scope, pixels)

        e, s = self.pool_project(latents)
        l_cl = loss_infonce(s[0], s[1], s[2:], loss_cfg.tau) if B >= 3 else img.new_zeros(())
        l_unif = loss_uniformity(F.normalize(e, dim=-1))
        total = loss_total(l_mask, l_cl, l_unif, loss_cfg.lambda_cl, loss_cfg.lambda_unif)
        return {"l_mask": l_mask, "l_cl": l_cl, "l_unif": l_unif, "total": total, "recon": recon, "e": e}
