"""Fixed 2D sinusoidal position tables for encoder and decoder inputs."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    if dim % 2:
        raise ContractError(f"sincos_1d: dim must be even, got {dim}")
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000.0**omega
    angles = np.outer(positions.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(dim: int, rows: int, cols: int, with_cls: bool = True) -> np.ndarray:
    """(rows*cols [+1], dim) table; the class-token row (index 0) is zeros."""
    if dim % 4:
        raise ContractError(f"sincos_2d: dim must be divisible by 4, got {dim}")
    grid_r, grid_c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    emb = np.concatenate(
        [sincos_1d(dim // 2, grid_r), sincos_1d(dim // 2, grid_c)], axis=1
    )
    if with_cls:
        emb = np.concatenate([np.zeros((1, dim)), emb], axis=0)
    return emb.astype(np.float32)
