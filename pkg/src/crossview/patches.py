"""Patchification and random masking of token sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, take, take_along
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class PatchSequence:
    """Flattened non-overlapping patches of one image, in row-major grid order."""

    tokens: Tensor  # (N, P*P*C)
    grid: tuple[int, int]
    patch_size: int
    channels: int

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class MaskPlan:
    """Partition of patch indices into visible and masked sets."""

    visible_idx: np.ndarray  # sorted int64
    masked_idx: np.ndarray  # sorted int64
    ratio: float
    seed: int

    @property
    def num_tokens(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)


def visible_count(n: int, ratio: float) -> int:
    """Visible tokens kept at a masking ratio: max(1, floor(n * (1 - ratio)))."""
    return max(1, math.floor(n * (1.0 - ratio)))


def patchify(image: Tensor, patch_size: int) -> PatchSequence:
    if image.ndim != 3:
        raise ShapeError(f"patchify: expected HxWxC image, got shape {image.shape}")
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patchify: image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    arr = image.data.reshape(rows, p, cols, p, c)
    tokens = np.transpose(arr, (0, 2, 1, 3, 4)).reshape(rows * cols, p * p * c)
    return PatchSequence(Tensor(tokens), (rows, cols), p, c)


def unpatchify(seq: PatchSequence) -> Tensor:
    rows, cols = seq.grid
    p, c = seq.patch_size, seq.channels
    arr = seq.tokens.data.reshape(rows, cols, p, p, c)
    image = np.transpose(arr, (0, 2, 1, 3, 4)).reshape(rows * p, cols * p, c)
    return Tensor(image)


def sample_mask(n: int, ratio: float, rng: np.random.Generator, seed: int = 0) -> MaskPlan:
    """Uniformly random mask plan keeping max(1, floor(n*(1-ratio))) tokens."""
    if n < 1:
        raise ContractError(f"sample_mask: need at least one token, got {n}")
    if not 0.0 <= ratio < 1.0:
        raise ContractError(f"sample_mask: ratio must be in [0, 1), got {ratio}")
    keep = visible_count(n, ratio)
    perm = rng.permutation(n)
    visible = np.sort(perm[:keep]).astype(np.int64)
    masked = np.sort(perm[keep:]).astype(np.int64)
    return MaskPlan(visible, masked, ratio, seed)


def apply_mask(seq: PatchSequence, plan: MaskPlan) -> tuple[Tensor, Tensor]:
    """Split tokens into (visible, masked-targets), each gathered in index order."""
    if plan.num_tokens != seq.num_tokens:
        raise ContractError(
            f"apply_mask: plan covers {plan.num_tokens} tokens, sequence has {seq.num_tokens}"
        )
    visible = take(seq.tokens, plan.visible_idx, axis=0)
    masked = take(seq.tokens, plan.masked_idx, axis=0)
    return visible, masked


def scatter_restore(visible_out: Tensor, mask_token: Tensor, plan: MaskPlan) -> Tensor:
    """Rebuild the full-length sequence: encoder outputs at their original
    positions, the learned mask token everywhere else.

    Supports a leading batch dimension on visible_out when plan index arrays
    are stacked to shape (B, n_visible) alongside a (B, N) restore map built
    by `restore_map`.
    """
    n_vis = len(plan.visible_idx)
    if visible_out.shape[-2] != n_vis:
        raise ContractError(
            f"scatter_restore: got {visible_out.shape[-2]} rows for {n_vis} visible tokens"
        )
    idx_map = restore_map(plan)
    if visible_out.ndim == 2:
        pool = concat([visible_out, mask_token], axis=0)
        return take(pool, idx_map, axis=0)
    raise ContractError("scatter_restore: expected a 2-d (tokens x dim) tensor")


def restore_map(plan: MaskPlan) -> np.ndarray:
    """Index map m with m[i] = rank of i among visible tokens, or n_visible
    (the mask-token slot) when i is masked."""
    n = plan.num_tokens
    n_vis = len(plan.visible_idx)
    idx_map = np.full(n, n_vis, dtype=np.int64)
    idx_map[plan.visible_idx] = np.arange(n_vis, dtype=np.int64)
    return idx_map


def batched_gather(tokens: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows per batch element: tokens (B, N, D), idx (B, K) -> (B, K, D)."""
    if tokens.ndim != 3 or idx.ndim != 2:
        raise ContractError("batched_gather: expected (B,N,D) tokens and (B,K) indices")
    expanded = idx[:, :, None] * np.ones((1, 1, tokens.shape[-1]), dtype=np.int64)
    return take_along(tokens, expanded, axis=1)
