"""Spatio-temporal augmentation with equivariant boundary labels.

A video is split at its annotated segment into left background, segment and
right background. Each piece is resampled by its own ratio using
nearest-lower-index sampling, the pieces are concatenated and the result is
sampled back to the original length. Every augmented frame is therefore an
exact copy of one original frame (or a zero PAD frame), and the bookkeeping
map from augmented to original index is exact.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import FeatureSequence, SegmentAnnotation

PAD_FRAMES = 2
MAX_TRIES = 8


class SubLabel(enum.IntEnum):
    LEFT = 0
    SEG = 1
    RIGHT = 2
    PAD = 3


class DegenerateSampleError(ValueError):
    """No segment frame survived the temporal transformation."""


class AugmentationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransformParams:
    r_left: float
    r_seg: float
    r_right: float
    alpha: float
    spatial_noise_scale: float = 0.0
    spatial_channel_drop: float = 0.0

    @property
    def ratios(self):
        return self.r_left, self.r_seg, self.r_right


@dataclass
class TimestampMap:
    map: np.ndarray
    sub_label: np.ndarray

    def __len__(self):
        return len(self.map)

    @property
    def pad_mask(self):
        return self.sub_label == SubLabel.PAD


@dataclass
class SubVideo:
    """A piece of a video: frames plus the original index and sub-label of each row."""

    frames: np.ndarray
    index: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.index)


@dataclass
class AugmentedSample:
    features: FeatureSequence
    annotation: SegmentAnnotation
    tmap: TimestampMap
    params: TransformParams
    source_annotation: SegmentAnnotation


def ratio_range(alpha, literal=False):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if literal:
        return 1.0 - alpha, alpha
    return 1.0 - alpha, 1.0 + alpha


def sample_transform_params(alpha, rng, literal_range=False, spatial_noise_scale=0.0,
                            spatial_channel_drop=0.0, ranges=None):
    """Draw the three sub-video ratios independently.

    ``ranges`` optionally overrides the interval(s) the ratios come from: a
    list of ``(lo, hi)`` pairs, picked with probability proportional to width.
    """
    if ranges is None:
        lo, hi = ratio_range(alpha, literal_range)
        r = rng.uniform(lo, hi, size=3)
    else:
        ranges = np.asarray(ranges, dtype=float).reshape(-1, 2)
        widths = ranges[:, 1] - ranges[:, 0]
        which = rng.choice(len(ranges), size=3, p=widths / widths.sum())
        r = rng.uniform(ranges[which, 0], ranges[which, 1])
    return TransformParams(float(r[0]), float(r[1]), float(r[2]), alpha,
                           spatial_noise_scale, spatial_channel_drop)


def labels_from_annotation(ann, T):
    labels = np.full(T, SubLabel.LEFT, dtype=np.int8)
    labels[ann.tau_s:ann.tau_e + 1] = SubLabel.SEG
    labels[ann.tau_e + 1:] = SubLabel.RIGHT
    return labels


def split_video(fs, ann):
    """Cut into frames ``[0, tau_s)``, ``[tau_s, tau_e]`` and ``(tau_e, T)``."""
    frames = fs.frames if isinstance(fs, FeatureSequence) else np.asarray(fs)
    T = frames.shape[0]
    ann.validate(T)
    labels = labels_from_annotation(ann, T)
    cuts = [(0, ann.tau_s), (ann.tau_s, ann.tau_e + 1), (ann.tau_e + 1, T)]
    parts = []
    for lo, hi in cuts:
        idx = np.arange(lo, hi)
        parts.append(SubVideo(frames[lo:hi], idx, labels[lo:hi]))
    return tuple(parts)


def resampled_length(n_in, r):
    return max(1, int(np.floor(r * n_in + 0.5)))


def resample_indices(n_in, n_out):
    """Source row for each output row: ``floor(j * n_in / n_out)``."""
    return (np.arange(n_out) * n_in) // n_out


def resample_subvideo(sub, r, pad_position=0):
    """Change the length of a sub-video by ratio ``r``.

    An empty piece is first padded with ``PAD_FRAMES`` zero frames labelled
    PAD whose map entry is ``pad_position``.
    """
    if r <= 0:
        raise ValueError(f"sampling ratio must be positive, got {r}")
    if len(sub) == 0:
        dim = sub.frames.shape[1]
        sub = SubVideo(np.zeros((PAD_FRAMES, dim), dtype=sub.frames.dtype),
                       np.full(PAD_FRAMES, pad_position, dtype=np.int64),
                       np.full(PAD_FRAMES, SubLabel.PAD, dtype=np.int8))
    n_in = len(sub)
    src = resample_indices(n_in, resampled_length(n_in, r))
    return SubVideo(sub.frames[src], sub.index[src], sub.labels[src])


def compose_and_fit(left, seg, right, T):
    """Concatenate the resampled pieces and sample the result to ``T`` rows."""
    index = np.concatenate([left.index, seg.index, right.index])
    labels = np.concatenate([left.labels, seg.labels, right.labels])
    frames = np.concatenate([left.frames, seg.frames, right.frames])
    n = len(index)
    if n < 1:
        raise ValueError("composed video is empty")
    pick = resample_indices(n, T)
    return frames[pick], TimestampMap(index[pick].astype(np.int64), labels[pick].astype(np.int8))


def map_boundaries(tmap):
    seg = np.flatnonzero(tmap.sub_label == SubLabel.SEG)
    if seg.size == 0:
        raise DegenerateSampleError("no segment frame survived the temporal transformation")
    return SegmentAnnotation(int(seg[0]), int(seg[-1]))


def spatial_perturb(frames, params, rng, pad_mask=None):
    """Feature-space appearance jitter: additive Gaussian noise and channel dropout."""
    out = np.array(frames, dtype=np.float64, copy=True)
    if params.spatial_noise_scale > 0:
        out += params.spatial_noise_scale * rng.standard_normal(out.shape)
    if params.spatial_channel_drop > 0:
        keep = rng.random(out.shape[1]) >= params.spatial_channel_drop
        out *= keep
    if pad_mask is not None:
        out[pad_mask] = 0.0
    return out


def transform_video(fs, ann, params, T=None):
    """Apply fixed ratios; returns ``(frames, tmap)`` before spatial jitter."""
    frames = fs.frames if isinstance(fs, FeatureSequence) else np.asarray(fs)
    T_orig = frames.shape[0]
    T = T_orig if T is None else T
    left, seg, right = split_video(frames, ann)
    left = resample_subvideo(left, params.r_left, pad_position=ann.tau_s)
    seg = resample_subvideo(seg, params.r_seg)
    right = resample_subvideo(right, params.r_right, pad_position=ann.tau_e)
    return compose_and_fit(left, seg, right, T)


def augment(fs, ann, alpha, rng, spatial_noise_scale=0.0, spatial_channel_drop=0.0,
            literal_range=False, ranges=None, max_tries=MAX_TRIES):
    """Full pipeline: draw ratios, transform, derive boundaries, jitter.

    Degenerate draws (segment erased) are rejected and redrawn up to
    ``max_tries`` times.
    """
    for _ in range(max_tries):
        params = sample_transform_params(alpha, rng, literal_range, spatial_noise_scale,
                                         spatial_channel_drop, ranges)
        frames, tmap = transform_video(fs, ann, params)
        try:
            new_ann = map_boundaries(tmap)
        except DegenerateSampleError:
            continue
        frames = spatial_perturb(frames, params, rng, tmap.pad_mask)
        return AugmentedSample(FeatureSequence(frames), new_ann, tmap, params, ann)
    raise AugmentationError(f"segment ({ann.tau_s}, {ann.tau_e}) erased in {max_tries} consecutive draws")


def identity_params(alpha=0.8):
    return TransformParams(1.0, 1.0, 1.0, alpha)
