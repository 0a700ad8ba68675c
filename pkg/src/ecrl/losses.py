"""Consistency loss with a timestamp prior, boundary cross-entropy and the joint objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import SubLabel, labels_from_annotation
from .autograd import Tensor, cosine_matrix, log_softmax, sigmoid, log
from .autograd.tensor import clamp_min


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class ConsistencyConfig:
    sigma_prior: float = 5.0
    cross_subvideo_downweight: float = 0.5
    aug_to_orig: bool = True
    orig_to_aug: bool = True
    prior: str = "gaussian"  # or "onehot": all mass on the nearest timestamp(s)
    anchor_subvideos: tuple = (SubLabel.LEFT, SubLabel.SEG, SubLabel.RIGHT)

    def validate(self):
        if self.sigma_prior <= 0:
            raise ValueError("sigma_prior must be > 0")
        if not 0 < self.cross_subvideo_downweight <= 1:
            raise ValueError("cross_subvideo_downweight must lie in (0, 1]")
        if self.prior not in ("gaussian", "onehot"):
            raise ValueError(f"unknown prior {self.prior!r}")
        return self


def gaussian_prior_weights(i_prime, sub_i, labels, cfg=None, positions=None):
    """Normalized prior over candidate frames ``j`` for an anchor at original time ``i_prime``.

    ``g_j = exp(-(i_prime - pos_j)^2 / 2 sigma^2)``, multiplied by the
    down-weight when ``labels[j] != sub_i`` (PAD candidates always are), then
    normalized. ``positions`` defaults to ``0..T-1``.
    """
    cfg = cfg or ConsistencyConfig()
    labels = np.asarray(labels)
    pos = np.arange(len(labels)) if positions is None else np.asarray(positions, dtype=np.float64)
    dist = i_prime - pos
    other = (labels != sub_i) | (labels == SubLabel.PAD)
    factor = np.where(other, cfg.cross_subvideo_downweight, 1.0)
    if cfg.prior == "onehot":
        # sigma -> 0 limit: mass on the nearest candidates, ratios set by the down-weight
        g = np.where(np.abs(dist) == np.abs(dist).min(), factor, 0.0)
    else:
        g = np.exp(-(dist * dist) / (2.0 * cfg.sigma_prior ** 2)) * factor
    return g / g.sum()


def consistency_priors(tmap, orig_labels, cfg=None):
    """Prior matrices for both directions.

    Returns ``(w_aug, anchors_aug, w_orig, anchors_orig)``: ``w_aug[i]`` is
    the prior of augmented frame ``i`` over original frames, ``w_orig[i]`` the
    prior of original frame ``i`` over augmented frames positioned at their raw
    timestamps.
    """
    cfg = cfg or ConsistencyConfig()
    T_aug, T_orig = len(tmap.map), len(orig_labels)
    allowed = np.isin(np.asarray(tmap.sub_label), [int(s) for s in cfg.anchor_subvideos])
    w_aug = np.zeros((T_aug, T_orig))
    for i in range(T_aug):
        if tmap.sub_label[i] != SubLabel.PAD:
            w_aug[i] = gaussian_prior_weights(tmap.map[i], tmap.sub_label[i], orig_labels, cfg)
    anchors_aug = allowed & (np.asarray(tmap.sub_label) != SubLabel.PAD)
    w_orig = np.zeros((T_orig, T_aug))
    for i in range(T_orig):
        w_orig[i] = gaussian_prior_weights(i, orig_labels[i], tmap.sub_label, cfg, positions=tmap.map)
    anchors_orig = np.isin(np.asarray(orig_labels), [int(s) for s in cfg.anchor_subvideos])
    return w_aug, anchors_aug, w_orig, anchors_orig


def entropy(w):
    w = np.asarray(w, dtype=np.float64)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


def sscl_frame_loss(anchor, other, w):
    """Cross-entropy between the prior ``w`` and the softmax of cosine similarities."""
    anchor = anchor if isinstance(anchor, Tensor) else Tensor(anchor)
    other = other if isinstance(other, Tensor) else Tensor(other)
    logits = cosine_matrix(anchor.reshape(1, -1), other).reshape(-1)
    w = Tensor(np.asarray(w), dtype=logits.dtype.type)
    return -(w * log_softmax(logits, axis=-1)).sum()


def _directional(logits, w, anchors):
    """Mean over anchor rows of ``-sum_j w_ij log softmax_j(logits_i)``; batched on axis 0."""
    per_frame = -(Tensor(w, dtype=logits.dtype.type) * log_softmax(logits, axis=-1)).sum(axis=-1)
    anchors = np.asarray(anchors, dtype=np.float64)
    count = np.maximum(anchors.sum(axis=-1, keepdims=True), 1.0)
    return (per_frame * Tensor(anchors / count, dtype=logits.dtype.type)).sum(axis=-1)


def sscl_batch(fused_aug, fused_orig, priors, cfg=None):
    """Per-sample consistency loss averaged over the batch.

    ``priors`` holds stacked outputs of :func:`consistency_priors`.
    """
    cfg = cfg or ConsistencyConfig()
    w_aug, a_aug, w_orig, a_orig = priors
    total = None
    if cfg.aug_to_orig or cfg.orig_to_aug:
        cos = cosine_matrix(fused_aug, fused_orig)
    if cfg.aug_to_orig:
        total = _directional(cos, w_aug, a_aug)
    if cfg.orig_to_aug:
        term = _directional(cos.transpose(), w_orig, a_orig)
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0, dtype=fused_aug.dtype.type)
    return total.mean()


def sscl_total(fused_aug, fused_orig, tmap, orig_labels, cfg=None):
    """Consistency loss for one pair of ``(T, D)`` streams."""
    fused_aug = fused_aug if isinstance(fused_aug, Tensor) else Tensor(fused_aug)
    fused_orig = fused_orig if isinstance(fused_orig, Tensor) else Tensor(fused_orig)
    priors = consistency_priors(tmap, orig_labels, cfg)
    return sscl_batch(fused_aug, fused_orig, priors, cfg)


def grounding_labels(ann, T, smoothing=False):
    """Categorical targets over time for the start and end frames."""
    def target(k):
        y = np.zeros(T)
        if smoothing:
            # mass falling off either end is folded back onto the boundary frame
            for off, mass in ((-1, 0.1), (0, 0.8), (1, 0.1)):
                y[k + off if 0 <= k + off < T else k] += mass
        else:
            y[k] = 1.0
        return y

    return target(ann.tau_s), target(ann.tau_e)


def _categorical_ce(scores, target):
    return -(Tensor(target, dtype=scores.dtype.type) * log_softmax(scores, axis=-1)).sum(axis=-1)


def _binary_ce(scores, target):
    # literal per-frame form: mean over t of BCE(sigmoid(C_t), y_t)
    y = Tensor(target, dtype=scores.dtype.type)
    p = clamp_min(sigmoid(scores), 1e-12)
    q = clamp_min(1.0 - sigmoid(scores), 1e-12)
    return -(y * log(p) + (1.0 - y) * log(q)).mean(axis=-1)


def grounding_loss(start, end, start_target, end_target, mode="categorical"):
    """Half the sum of the start and end cross-entropies, averaged over any batch axis."""
    if mode not in ("categorical", "binary"):
        raise ValueError(f"unknown grounding loss mode {mode!r}")
    ce = _categorical_ce if mode == "categorical" else _binary_ce
    per = (ce(start, start_target) + ce(end, end_target)) * 0.5
    return per.mean()


@dataclass
class LossBreakdown:
    l_tsg_aug: float
    l_tsg_orig: float
    l_cons: float
    l_overall: float
    lam: float = field(default=5.0)

    def check(self):
        expect = self.l_tsg_aug + self.l_tsg_orig + self.lam * self.l_cons
        if abs(expect - self.l_overall) > 1e-9 * max(1.0, abs(expect)):
            raise AssertionError(f"loss breakdown inconsistent: {self}")
        return self


def overall_loss(l1, l2, l_cons, lam=5.0):
    """``l1 + l2 + lam * l_cons``; returns ``(total, LossBreakdown)``.

    Works on scalar tensors (for backprop) or floats.
    """
    vals = [float(v.item() if isinstance(v, Tensor) else v) for v in (l1, l2, l_cons)]
    if not all(math.isfinite(v) for v in vals):
        raise NonFiniteLossError(f"non-finite loss term(s): l_tsg_aug={vals[0]}, l_tsg_orig={vals[1]}, l_cons={vals[2]}")
    total = l1 + l2 + l_cons * lam if lam else l1 + l2
    overall = vals[0] + vals[1] + lam * vals[2]
    return total, LossBreakdown(vals[0], vals[1], vals[2], overall, lam).check()


def orig_labels_for(ann, T):
    return labels_from_annotation(ann, T)
