"""Paired original/augmented training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import augment, labels_from_annotation
from .autograd import Adam, Tape, Tensor, concat, default_dtype
from .checkpoint import CheckpointRecord, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SegmentAnnotation
from .evaluation import evaluate
from .losses import (
    LossBreakdown,
    NonFiniteLossError,
    consistency_priors,
    grounding_labels,
    grounding_loss,
    overall_loss,
    sscl_batch,
)
from .model import co_attention_fuse, encode_query, encode_video, grounding_head, init_params, pad_tokens, predict_topn

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "l_tsg_aug", "l_tsg_orig", "l_cons", "l_overall", "val_r1_05")


class TrainingAborted(RuntimeError):
    def __init__(self, message, batch_id=None, dump=None):
        self.batch_id = batch_id
        self.dump = dump
        super().__init__(message)


@dataclass
class Sample:
    sample_id: str
    frames: np.ndarray
    tokens: tuple
    annotation: SegmentAnnotation


def load_samples(manifest):
    return [Sample(r.sample_id, manifest.load(r).frames, tuple(r.tokens), r.annotation) for r in manifest]


def _dtype(cfg):
    return np.float32 if cfg.dtype == "float32" else np.float64


class Network:
    """Parameters plus config; the forward passes used for training and inference."""

    def __init__(self, cfg, params=None):
        self.cfg = cfg
        self.model_cfg = cfg.model()
        dtype = _dtype(cfg)
        self.params = params if params is not None else init_params(self.model_cfg, cfg.seed, dtype)

    @property
    def dtype(self):
        return _dtype(self.cfg)

    def fuse(self, frames, tokens, lengths, repeat=1):
        """Fused features for ``frames`` (B*repeat, T, D); the query batch is tiled ``repeat`` times."""
        video = encode_video(Tensor(frames, dtype=self.dtype), self.params, self.model_cfg)
        query = encode_query(tokens, self.params, lengths)
        mask = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
        if repeat > 1:
            query = concat([query] * repeat, axis=0)
            mask = np.concatenate([mask] * repeat, axis=0)
        return co_attention_fuse(video, query, self.params, mask)

    def scores(self, samples, batch_size=64):
        out = []
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            for group in _group_by_length(chunk):
                frames = np.stack([s.frames for s in group])
                tokens, lengths = pad_tokens([s.tokens for s in group])
                with default_dtype(self.dtype):
                    fused = self.fuse(frames, tokens, lengths)
                    c_s, c_e = grounding_head(fused, self.params)
                for s, a, b in zip(group, c_s.data, c_e.data):
                    out.append((s.sample_id, a, b))
        by_id = {sid: (a, b) for sid, a, b in out}
        return [by_id[s.sample_id] for s in samples]

    def rank_spans(self, samples, n):
        return [predict_topn(a, b, n) for a, b in self.scores(samples)]


def _group_by_length(samples):
    groups = {}
    for s in samples:
        groups.setdefault(s.frames.shape[0], []).append(s)
    return list(groups.values())


def _batches(order, samples, batch_size):
    """Consecutive batches from ``order``, never mixing video lengths."""
    pending = {}
    for idx in order:
        T = samples[idx].frames.shape[0]
        queue = pending.setdefault(T, [])
        queue.append(idx)
        if len(queue) == batch_size:
            yield queue
            pending[T] = []
    for queue in pending.values():
        if queue:
            yield queue


def epoch_rng(cfg, epoch):
    return np.random.default_rng([cfg.seed, 2, epoch])


@dataclass
class TrainState:
    net: Network
    optimizer: Adam
    epoch: int = 0
    history: list = field(default_factory=list)
    best_score: float = -1.0
    best_epoch: int = 0
    best_params: dict = None


class Trainer:
    def __init__(self, cfg, train_samples, val_samples=None, log_path=None, checkpoint_path=None):
        self.cfg = cfg.validate()
        self.samples = train_samples
        self.val = val_samples
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.cons_cfg = cfg.consistency()
        self._fixed_aug = {}
        net = Network(cfg)
        self.state = TrainState(net, Adam(net.params, lr=cfg.lr))

    # augmentation

    def _augmented(self, idx, rng):
        cfg = self.cfg
        smp = self.samples[idx]
        if not cfg.fresh_augmentation:
            if idx not in self._fixed_aug:
                fixed = np.random.default_rng([cfg.seed, 3, idx])
                self._fixed_aug[idx] = self._draw(smp, fixed)
            return self._fixed_aug[idx]
        return self._draw(smp, rng)

    def _draw(self, smp, rng):
        cfg = self.cfg
        return augment(smp.frames, smp.annotation, cfg.alpha, rng, cfg.spatial_noise_scale,
                       cfg.spatial_channel_drop, cfg.literal_ratio_range)

    # one optimisation step

    def batch_loss(self, idxs, rng):
        cfg = self.cfg
        net = self.state.net
        smps = [self.samples[i] for i in idxs]
        T = smps[0].frames.shape[0]
        tokens, lengths = pad_tokens([s.tokens for s in smps])
        orig = np.stack([s.frames for s in smps])
        tgt_orig = [grounding_labels(s.annotation, T, cfg.label_smoothing) for s in smps]
        if not cfg.augment:
            fused = net.fuse(orig, tokens, lengths)
            c_s, c_e = grounding_head(fused, net.params)
            l2 = grounding_loss(c_s, c_e, np.stack([t[0] for t in tgt_orig]),
                                np.stack([t[1] for t in tgt_orig]), cfg.grounding_loss)
            zero = Tensor(0.0, dtype=net.dtype)
            return overall_loss(zero, l2, zero, 0.0)
        augs = [self._augmented(i, rng) for i in idxs]
        aug = np.stack([a.features.frames for a in augs])
        fused = net.fuse(np.concatenate([aug, orig]), tokens, lengths, repeat=2)
        c_s, c_e = grounding_head(fused, net.params)
        B = len(idxs)
        tgt_aug = [grounding_labels(a.annotation, T, cfg.label_smoothing) for a in augs]
        zero = Tensor(0.0, dtype=net.dtype)
        l1 = zero
        if cfg.tsg_aug:
            l1 = grounding_loss(c_s[:B], c_e[:B], np.stack([t[0] for t in tgt_aug]),
                                np.stack([t[1] for t in tgt_aug]), cfg.grounding_loss)
        l2 = zero
        if cfg.tsg_orig:
            l2 = grounding_loss(c_s[B:], c_e[B:], np.stack([t[0] for t in tgt_orig]),
                                np.stack([t[1] for t in tgt_orig]), cfg.grounding_loss)
        l_cons = zero
        if cfg.lam > 0:
            priors = [consistency_priors(a.tmap, labels_from_annotation(s.annotation, T), self.cons_cfg)
                      for a, s in zip(augs, smps)]
            stacked = tuple(np.stack([p[k] for p in priors]) for k in range(4))
            l_cons = sscl_batch(fused[:B], fused[B:], stacked, self.cons_cfg)
        return overall_loss(l1, l2, l_cons, cfg.lam)

    def run_epoch(self):
        st = self.state
        cfg = self.cfg
        rng = epoch_rng(cfg, st.epoch)
        order = rng.permutation(len(self.samples))
        totals = np.zeros(4)
        count = 0
        with default_dtype(st.net.dtype):
            for b, idxs in enumerate(_batches(order, self.samples, cfg.batch_size)):
                batch_id = f"epoch{st.epoch + 1}/batch{b}"
                st.optimizer.zero_grad()
                with Tape() as tape:
                    try:
                        total, parts = self.batch_loss(idxs, rng)
                    except NonFiniteLossError as exc:
                        ids = [self.samples[i].sample_id for i in idxs]
                        raise TrainingAborted(f"{exc} in {batch_id}", batch_id, {"sample_ids": ids}) from exc
                    tape.backward(total, st.net.params.values())
                for name, p in st.net.params.items():
                    if not np.all(np.isfinite(p.grad)):
                        raise TrainingAborted(f"non-finite gradient for {name} in {batch_id}", batch_id,
                                              {"sample_ids": [self.samples[i].sample_id for i in idxs]})
                st.optimizer.step()
                totals += len(idxs) * np.array([parts.l_tsg_aug, parts.l_tsg_orig, parts.l_cons, parts.l_overall])
                count += len(idxs)
        st.epoch += 1
        mean = totals / max(count, 1)
        return LossBreakdown(*mean, lam=cfg.lam)

    def validate(self):
        if not self.val:
            return float("nan")
        report = evaluate(self.state.net, self.val, n_list=(1,), m_list=(0.5,))
        return report[(1, 0.5)]

    def fit(self, epochs=None, on_epoch=None):
        st = self.state
        cfg = self.cfg
        end = cfg.epochs if epochs is None else st.epoch + epochs
        while st.epoch < end:
            parts = self.run_epoch()
            val = float("nan")
            if self.val and (st.epoch % cfg.eval_every == 0 or st.epoch == end):
                val = self.validate()
            row = {"epoch": st.epoch, "l_tsg_aug": parts.l_tsg_aug, "l_tsg_orig": parts.l_tsg_orig,
                   "l_cons": parts.l_cons, "l_overall": parts.l_overall, "val_r1_05": val}
            st.history.append(row)
            self._append_log(row)
            score = val if np.isfinite(val) else -parts.l_overall
            if score > st.best_score or st.best_params is None:
                st.best_score = score
                st.best_epoch = st.epoch
                st.best_params = {k: v.data.copy() for k, v in st.net.params.items()}
                if self.checkpoint_path:
                    save_checkpoint(self.checkpoint_path, self.record(best=True))
            log.info("epoch %d loss %.4f val R@1,0.5 %.3f", st.epoch, parts.l_overall, val)
            if on_epoch is not None:
                on_epoch(st, row)
        return st

    def _append_log(self, row):
        if not self.log_path:
            return
        new = not self.log_path.exists() or row["epoch"] == 1
        with open(self.log_path, "w" if new else "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(LOG_FIELDS)
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])

    def record(self, best=False):
        st = self.state
        params = st.best_params if best and st.best_params is not None else {k: v.data for k, v in st.net.params.items()}
        opt = st.optimizer.state
        return CheckpointRecord(
            epoch=st.best_epoch if best else st.epoch,
            params={k: np.array(v) for k, v in params.items()},
            adam_m={k: v.copy() for k, v in opt.m.items()},
            adam_v={k: v.copy() for k, v in opt.v.items()},
            adam_step=opt.step,
            rng_state={"seed": self.cfg.seed, "next_epoch": st.epoch, "scheme": "per-epoch-derived"},
            config_text=self.cfg.to_text(),
            config_hash=self.cfg.config_hash(),
            extra={"best_score": st.best_score, "best_epoch": st.best_epoch, "resume_epoch": st.epoch},
        )

    @classmethod
    def resume(cls, rec, train_samples, val_samples=None, **kw):
        cfg = RunConfig.load(overrides=[line for line in rec.config_text.splitlines() if line])
        tr = cls(cfg, train_samples, val_samples, **kw)
        for k, p in tr.state.net.params.items():
            p.data = np.array(rec.params[k], dtype=p.data.dtype)
        opt = tr.state.optimizer.state
        opt.m = {k: np.array(v) for k, v in rec.adam_m.items()}
        opt.v = {k: np.array(v) for k, v in rec.adam_v.items()}
        opt.step = rec.adam_step
        tr.state.epoch = rec.extra.get("resume_epoch", rec.epoch)
        tr.state.best_score = rec.extra.get("best_score", -1.0)
        tr.state.best_epoch = rec.extra.get("best_epoch", 0)
        return tr


def network_from_checkpoint(rec):
    cfg = RunConfig.load(overrides=[line for line in rec.config_text.splitlines() if line])
    net = Network(cfg)
    for k, p in net.params.items():
        if k not in rec.params:
            raise KeyError(f"checkpoint lacks parameter {k}")
        p.data = np.array(rec.params[k], dtype=p.data.dtype)
    return net


def train(cfg, manifest, val_manifest=None, out_dir=None):
    """Train on a manifest; writes ``train_log.csv`` and ``best.ckpt`` under ``out_dir``.

    Returns ``(CheckpointRecord of the best epoch, history rows)``.
    """
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    tr = Trainer(cfg, load_samples(manifest), load_samples(val_manifest) if val_manifest else None,
                 log_path=out / "train_log.csv" if out else None,
                 checkpoint_path=out / "best.ckpt" if out else None)
    tr.fit()
    return tr.record(best=True), tr.state.history


def load_network(path):
    return network_from_checkpoint(load_checkpoint(path))
