"""Finite-difference check of the full joint objective on a tiny problem."""

from __future__ import annotations

import numpy as np

from .augment import TransformParams, labels_from_annotation, map_boundaries, transform_video
from .autograd import Tensor, concat, default_dtype, grad_check
from .config import RunConfig
from .data import SegmentAnnotation
from .losses import consistency_priors, grounding_labels, grounding_loss, overall_loss, sscl_batch
from .model import ModelConfig, SelfRefineConfig, co_attention_fuse, encode_query, encode_video, grounding_head, init_params, pad_tokens

TOY_DIMS = {"T": 6, "N": 4, "D": 8, "H": 4}


def toy_objective(cfg=None, seed=0):
    """Build ``(loss_fn, params)`` for the joint loss at T=6, N=4, D=8, H=4 in 64-bit.

    The batch holds two pairs with different query lengths so padding masks
    are exercised too.
    """
    cfg = cfg or RunConfig()
    T, N, D, H = TOY_DIMS["T"], TOY_DIMS["N"], TOY_DIMS["D"], TOY_DIMS["H"]
    rng = np.random.default_rng(seed)
    mcfg = ModelConfig(D=D, H=H, vocab_size=12,
                       refine=SelfRefineConfig(cfg.sigma_refine, cfg.refine_iterations, cfg.row_normalize))
    params = init_params(mcfg, seed, np.float64)
    anns = [SegmentAnnotation(1, 3), SegmentAnnotation(2, 4)]
    ratios = [TransformParams(1.6, 1.4, 0.6, cfg.alpha), TransformParams(0.7, 1.2, 1.5, cfg.alpha)]
    orig, aug, priors, tgt_o, tgt_a = [], [], [], [], []
    cons_cfg = cfg.consistency()
    for ann, tp in zip(anns, ratios):
        frames = rng.standard_normal((T, D))
        a_frames, tmap = transform_video(frames, ann, tp)
        a_ann = map_boundaries(tmap)
        orig.append(frames)
        aug.append(a_frames)
        priors.append(consistency_priors(tmap, labels_from_annotation(ann, T), cons_cfg))
        tgt_o.append(grounding_labels(ann, T))
        tgt_a.append(grounding_labels(a_ann, T))
    tokens, lengths = pad_tokens([tuple(rng.integers(0, 12, size=N)), tuple(rng.integers(0, 12, size=N - 1))])
    frames = np.concatenate([np.stack(aug), np.stack(orig)])
    stacked = tuple(np.stack([p[k] for p in priors]) for k in range(4))
    ts_a, te_a = np.stack([t[0] for t in tgt_a]), np.stack([t[1] for t in tgt_a])
    ts_o, te_o = np.stack([t[0] for t in tgt_o]), np.stack([t[1] for t in tgt_o])
    mask = np.arange(tokens.shape[1])[None, :] < lengths[:, None]

    def loss_fn():
        video = encode_video(Tensor(frames), params, mcfg)
        query = encode_query(tokens, params, lengths)
        fused = co_attention_fuse(video, concat([query, query], axis=0), params,
                                  np.concatenate([mask, mask]))
        c_s, c_e = grounding_head(fused, params)
        l1 = grounding_loss(c_s[:2], c_e[:2], ts_a, te_a)
        l2 = grounding_loss(c_s[2:], c_e[2:], ts_o, te_o)
        l_cons = sscl_batch(fused[:2], fused[2:], stacked, cons_cfg)
        total, _ = overall_loss(l1, l2, l_cons, cfg.lam)
        return total

    return loss_fn, params


def check_full_objective(cfg=None, tol=1e-4, seed=0):
    with default_dtype(np.float64):
        loss_fn, params = toy_objective(cfg, seed)
        return grad_check(loss_fn, params, tol=tol)
