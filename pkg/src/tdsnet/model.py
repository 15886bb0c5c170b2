"""The full network: backbone, h_conv, relation transform, attention generator, and the
episode forward pass that produces branch scores and the LFE distributions."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import lfe, metric
from .config import RunConfig
from .nn import Backbone, BatchNorm2d, Conv2d, HConv, Module
from .tensor import Tensor, concat, get_default_dtype


@dataclass
class EpisodeOutput:
    bundle: metric.SimilarityBundle
    p_g: np.ndarray | Tensor | None = None  # teacher distribution
    p_a: Tensor | None = None          # part-based distribution
    attention: Tensor | None = None    # (Q, H, W, m) query attention maps


@contextlib.contextmanager
def frozen_running_stats(module: Module):
    """Batch statistics still normalise, but running estimates are left untouched."""
    bns = []

    def walk(mod):
        if isinstance(mod, BatchNorm2d):
            bns.append((mod, {k: v.copy() for k, v in mod.buffers.items()}, mod.initialized))
        for child in mod.children.values():
            walk(child)

    walk(module)
    try:
        yield
    finally:
        for bn, saved, init in bns:
            for k, v in saved.items():
                bn.buffers[k][...] = v
            bn.initialized = init


class TDSNet(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        c = cfg.backbone_widths[-1]
        self.add("backbone", Backbone(3, cfg.backbone_widths, cfg.backbone_pools, rng))
        self.add("hconv", HConv(c, cfg.hconv, rng))
        if cfg.use_local and not cfg.share_relation:
            rel = self.add("relation", Conv2d(c, c, kernel=1, padding=0, bias=True, rng=rng))
            if cfg.relation_init == "identity":
                rel.params["weight"].data = np.eye(c, dtype=get_default_dtype()).reshape(1, 1, c, c)
                rel.params["bias"].data = np.zeros(c, dtype=get_default_dtype())
        if cfg.use_lfe:
            self.add("lfe", lfe.AttentionGenerator(c, cfg.m, rng))

    def relation_transform(self, x: Tensor) -> Tensor:
        if self.cfg.share_relation:
            return self.children["hconv"](x)
        return self.children["relation"](x)

    def extract_features(self, images: Tensor) -> Tensor:
        size = self.cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (size, size, 3):
            raise ValueError(f"expected images of shape (B,{size},{size},3), got {images.shape}")
        return self.children["backbone"](images)

    def forward(self, support: Tensor, support_labels: np.ndarray, query: Tensor,
                stop_grad_cache: dict | None = None) -> EpisodeOutput:
        """Score every query against the episode's classes.

        In training mode batch norm sees support and query images as one batch. When
        ``stop_grad_cache`` is given, gradient-stopped quantities (attention thresholds,
        teacher distribution) are stored on first use and reused afterwards, which lets a
        finite-difference check perturb parameters with those quantities held fixed.
        """
        cfg = self.cfg
        n_way = int(np.max(support_labels)) + 1
        ns = support.shape[0]
        feats = self.extract_features(concat([support, query], axis=0))
        s_feat, q_feat = feats[:ns], feats[ns:]
        protos = metric.prototypes(s_feat, support_labels, n_way)
        nq = q_feat.shape[0]

        h = self.children["hconv"](concat([protos, q_feat], axis=0))
        h_proto, h_query = h[:n_way], h[n_way:]
        S_g = metric.global_similarity(h_proto, h_query)

        M = M_phi = M_A = S_l = None
        if cfg.use_local:
            M = metric.build_similarity_matrix(metric.descriptors(q_feat), metric.support_descriptors(protos))
            mode = cfg.attention_mode if self.training else cfg.eval_attention_mode
            if cfg.attention == "uniform":
                M_A = metric.task_attention(M, mode="uniform", n_classes=n_way, normalize=cfg.attention_norm)
            else:
                rel = self.relation_transform(concat([protos, q_feat], axis=0))
                M_phi = metric.build_relation_matrix(lambda x: x, rel[n_way:], rel[:n_way])
                beta = _cached(stop_grad_cache, "beta",
                               lambda: metric.kth_largest(M_phi, cfg.topk).data) if cfg.detach_threshold else None
                M_A = metric.task_attention(M_phi, cfg.topk, cfg.t, mode, n_way, cfg.attention_norm,
                                            cfg.detach_threshold, beta=beta)
            S_l = metric.local_similarity(M, M_A, n_way)
            S_total = metric.fuse(S_g, S_l)
        else:
            S_total = S_g
        bundle = metric.SimilarityBundle(M, M_phi, M_A, S_g, S_l, S_total)
        out = EpisodeOutput(bundle)

        if cfg.use_lfe and self.training:
            att = self.children["lfe"](q_feat)
            pooled = lfe.attention_pooled_map(q_feat, att)
            with frozen_running_stats(self.children["hconv"]):
                h_parts = self.children["hconv"](concat([protos, pooled], axis=0))
            S_a = metric.global_similarity(h_parts[:n_way], h_parts[n_way:])
            if cfg.detach_teacher:
                out.p_g = _cached(stop_grad_cache, "p_g", lambda: lfe.distributions(S_g).data)
            else:
                out.p_g = lfe.distributions(S_g)
            out.p_a = lfe.distributions(S_a)
            out.attention = att
        assert S_total.shape == (nq, n_way)
        return out


def _cached(cache: dict | None, key: str, compute):
    if cache is None:
        return compute()
    if key not in cache:
        cache[key] = compute()
    return cache[key]
