"""Average pooling of per-class bag embeddings and their Kronecker-product fusion.

Fused bags have one row per class: ``F[n] = pool(z_he[n]) (x) pool(z_ihc[n])``.
With 512-dim embeddings pooled to 32 that is a 4 x 1024 matrix, the same width
as the raw patch features, so the second stage reuses the branch unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .branch import BagEmbeddings
from .errors import PairingError, ShapeError, ValidationError
from .features import FeatureBag, Modality
from .numerics import DTYPE


@dataclass(frozen=True)
class PoolingSpec:
    in_dim: int = 512
    out_dim: int = 32

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or self.in_dim % self.out_dim:
            raise ValidationError(f"in_dim {self.in_dim} must be a positive multiple of out_dim {self.out_dim}")

    @property
    def window(self) -> int:
        return self.in_dim // self.out_dim

    @property
    def fused_dim(self) -> int:
        return self.out_dim * self.out_dim


@dataclass
class FusedBag:
    slide_id: str
    label: int
    features: np.ndarray  # N x out_dim**2

    def as_feature_bag(self) -> FeatureBag:
        return FeatureBag(self.slide_id, Modality.FUSED, self.features)


def average_pool(z, spec: PoolingSpec = PoolingSpec()) -> np.ndarray:
    """Mean over contiguous, non-overlapping windows of the last axis."""
    z = np.asarray(z, dtype=DTYPE)
    if z.shape[-1] != spec.in_dim:
        raise ShapeError(f"expected last dimension {spec.in_dim}, got {z.shape[-1]}")
    return z.reshape(*z.shape[:-1], spec.out_dim, spec.window).mean(axis=-1)


def kronecker(a, b) -> np.ndarray:
    """Vector Kronecker product: ``out[i * len(b) + j] = a[i] * b[j]``."""
    a = np.asarray(a, dtype=DTYPE).reshape(-1)
    b = np.asarray(b, dtype=DTYPE).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ShapeError("kronecker product of an empty vector")
    return np.outer(a, b).reshape(-1)


def build_fused_bag(z_he: BagEmbeddings, z_ihc: BagEmbeddings, label: int,
                    spec: PoolingSpec = PoolingSpec(), l2_normalize: bool = False) -> FusedBag:
    if z_he.slide_id != z_ihc.slide_id:
        raise PairingError(f"cannot fuse embeddings of different slides: {z_he.slide_id!r} vs {z_ihc.slide_id!r}")
    if z_he.Z.shape != z_ihc.Z.shape:
        raise ShapeError(f"embedding shapes differ: {z_he.Z.shape} vs {z_ihc.Z.shape}")
    ph, pi = average_pool(z_he.Z, spec), average_pool(z_ihc.Z, spec)
    fused = np.einsum("ni,nj->nij", ph, pi).reshape(ph.shape[0], -1)
    if l2_normalize:
        norms = np.linalg.norm(fused, axis=1, keepdims=True)
        fused = fused / np.where(norms > 0, norms, 1.0)
    return FusedBag(z_he.slide_id, int(label), fused)
