"""Similarity head: global prototype cosine plus task-aware local-descriptor similarity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, clamp, kth_largest, matmul, norm, sigmoid, where

COS_EPS = 1e-8
ATTENTION_MODES = ("smooth", "hard", "uniform")
NORMALIZATIONS = ("task", "class")


@dataclass
class SimilarityBundle:
    """Per-query matrices (Q, HW, N*HW) and per-class scores (Q, N)."""

    M: Tensor
    M_phi: Tensor | None
    M_A: Tensor | None
    S_g: Tensor
    S_l: Tensor | None
    S_total: Tensor


def cosine(u: Tensor, v: Tensor) -> Tensor:
    u, v = _t(u), _t(v)
    num = (u * v).sum()
    return clamp(num / (norm(u, axis=None) * norm(v, axis=None) + COS_EPS), -1.0, 1.0)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine between rows: a (..., P, C), b (..., R, C) -> (..., P, R), clamped to [-1, 1]."""
    a, b = _t(a), _t(b)
    dots = matmul(a, b.transpose(*range(b.ndim - 2), b.ndim - 1, b.ndim - 2))
    na = norm(a, axis=-1, keepdims=True)
    nb = norm(b, axis=-1, keepdims=True)
    denom = matmul(na, nb.transpose(*range(nb.ndim - 2), nb.ndim - 1, nb.ndim - 2)) + COS_EPS
    return clamp(dots / denom, -1.0, 1.0)


def prototypes(support: Tensor, labels: np.ndarray, n_way: int) -> Tensor:
    """Per-class mean of support feature maps, class order 0..n_way-1."""
    labels = np.asarray(labels)
    avg = np.zeros((n_way, len(labels)))
    for n in range(n_way):
        members = labels == n
        if not members.any():
            raise ValueError(f"class {n} has no support examples")
        avg[n, members] = 1.0 / members.sum()
    flat = support.reshape(len(labels), -1)
    return matmul(Tensor(avg, dtype=support.dtype), flat).reshape((n_way,) + support.shape[1:])


def global_similarity(proto_maps: Tensor, query_maps: Tensor) -> Tensor:
    """Cosine between flattened (already h_conv-transformed) query and prototype maps -> (Q, N)."""
    q = query_maps.reshape(query_maps.shape[0], -1)
    p = proto_maps.reshape(proto_maps.shape[0], -1)
    return cosine_matrix(q, p)


def descriptors(features: Tensor) -> Tensor:
    """(B,H,W,C) -> (B, HW, C); descriptor order is row-major over space."""
    B, H, W, C = features.shape
    return features.reshape(B, H * W, C)


def support_descriptors(proto_maps: Tensor) -> Tensor:
    """All prototype descriptors, class blocks in class order -> (N*HW, C)."""
    N, H, W, C = proto_maps.shape
    return proto_maps.reshape(N * H * W, C)


def build_similarity_matrix(query_desc: Tensor, support_desc: Tensor) -> Tensor:
    """M[q, i, j] = cos(query descriptor i, support descriptor j)."""
    if query_desc.shape[-1] != support_desc.shape[-1]:
        raise ValueError(f"descriptor dims differ: {query_desc.shape[-1]} vs {support_desc.shape[-1]}")
    return cosine_matrix(query_desc, support_desc)


def build_relation_matrix(transform, query_features: Tensor, proto_features: Tensor) -> Tensor:
    """Same construction as M, on features passed through ``transform`` (a 1x1 conv by default)."""
    q = descriptors(transform(query_features))
    s = support_descriptors(transform(proto_features))
    return build_similarity_matrix(q, s)


def _row_threshold(m_phi: Tensor, k: int, detach: bool) -> Tensor:
    beta = kth_largest(m_phi, k, axis=-1)
    return Tensor(beta.data, dtype=m_phi.dtype) if detach else beta


def task_attention(m_phi: Tensor, k: int = 3, t: float = 20.0, mode: str = "smooth",
                   n_classes: int | None = None, normalize: str = "task",
                   detach_threshold: bool = True, beta: np.ndarray | None = None) -> Tensor:
    """Top-k thresholded, row-normalised attention over the relation matrix.

    The threshold for each row is its k-th largest entry. Hard mode keeps entries
    strictly above it; smooth mode weights x by sigmoid(t (x - threshold)). Rows whose
    retained mass is zero fall back to uniform weights over the normalisation scope.
    ``beta`` overrides the computed thresholds (used to hold them fixed).
    """
    if mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    if normalize not in NORMALIZATIONS:
        raise ValueError(f"unknown normalisation {normalize!r}")
    cols = m_phi.shape[-1]
    if normalize == "class":
        if not n_classes or cols % n_classes:
            raise ValueError("per-class normalisation needs n_classes dividing the column count")
        block = cols // n_classes
    else:
        block = cols
    lead = m_phi.shape[:-1]
    if mode == "uniform":
        return Tensor(np.full(m_phi.shape, 1.0 / block), dtype=m_phi.dtype)
    if not 1 <= k <= cols:
        raise ValueError(f"k={k} must lie in [1, {cols}]")
    if beta is not None:
        thr = Tensor(beta, dtype=m_phi.dtype)
    else:
        thr = _row_threshold(m_phi, k, detach_threshold or mode == "hard")
    if mode == "hard":
        kept = m_phi * (m_phi.data > thr.data)
    else:
        kept = m_phi * sigmoid((m_phi - thr) * t)
    grouped = kept.reshape(lead + (cols // block, block))
    denom = grouped.sum(axis=-1, keepdims=True)
    if mode == "hard":
        survivors = (m_phi.data > thr.data).reshape(grouped.shape).any(axis=-1, keepdims=True)
        empty = ~survivors | (denom.data == 0)
    else:
        empty = np.abs(denom.data) <= np.finfo(m_phi.dtype).tiny
    safe = where(empty, Tensor(1.0, dtype=m_phi.dtype), denom)
    weights = where(np.broadcast_to(empty, grouped.shape), Tensor(1.0 / block, dtype=m_phi.dtype), grouped / safe)
    return weights.reshape(m_phi.shape)


def local_similarity(M: Tensor, M_A: Tensor, n_classes: int) -> Tensor:
    """S_l[q, n] = (1/HW) * sum_i sum_{j in block n} (M_A * M)[q, i, j]."""
    if M.shape != M_A.shape:
        raise ValueError(f"shape mismatch {M.shape} vs {M_A.shape}")
    Q, hw, cols = M.shape
    if cols % n_classes:
        raise ValueError(f"{cols} columns do not split into {n_classes} class blocks")
    weighted = (M_A * M).reshape(Q, hw, n_classes, cols // n_classes)
    return weighted.sum(axis=(1, 3)) * (1.0 / hw)


def fuse(S_g: Tensor, S_l: Tensor) -> Tensor:
    if S_g.shape != S_l.shape:
        raise ValueError(f"score shapes differ: {S_g.shape} vs {S_l.shape}")
    return (S_g + S_l) * 0.5


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
