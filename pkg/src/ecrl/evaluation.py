"""Temporal IoU and the R@n, IoU=m recall harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EvalError(ValueError):
    pass


def temporal_iou(a, b):
    """IoU of two inclusive frame intervals ``(s, e)``."""
    a_s, a_e = (a.tau_s, a.tau_e) if hasattr(a, "tau_s") else a
    b_s, b_e = (b.tau_s, b.tau_e) if hasattr(b, "tau_s") else b
    inter = max(0, min(a_e, b_e) - max(a_s, b_s) + 1)
    union = (a_e - a_s + 1) + (b_e - b_s + 1) - inter
    return inter / union


@dataclass
class SampleResult:
    sample_id: str
    spans: list
    ground_truth: tuple
    ious: list

    @property
    def best_iou(self):
        return max(self.ious) if self.ious else 0.0


@dataclass
class EvalReport:
    recall: dict = field(default_factory=dict)  # (n, m) -> fraction
    records: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.recall[key]

    def check_monotone(self):
        ns = sorted({n for n, _ in self.recall})
        ms = sorted({m for _, m in self.recall})
        for n in ns:
            vals = [self.recall[(n, m)] for m in ms]
            if any(x < y for x, y in zip(vals, vals[1:])):
                raise AssertionError(f"recall increases with m at n={n}: {vals}")
        for m in ms:
            vals = [self.recall[(n, m)] for n in ns]
            if any(x > y for x, y in zip(vals, vals[1:])):
                raise AssertionError(f"recall decreases with n at m={m}: {vals}")
        return True

    def write(self, path, detail_path=None):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "m", "recall"])
            for (n, m), r in sorted(self.recall.items()):
                w.writerow([n, f"{m:g}", f"{r:.6f}"])
        if detail_path is not None:
            with open(detail_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["id", "gt_s", "gt_e", "spans", "best_iou"])
                for rec in self.records:
                    spans = " ".join(f"{s}-{e}" for s, e, _ in rec.spans)
                    w.writerow([rec.sample_id, *rec.ground_truth, spans, f"{rec.best_iou:.6f}"])


def recall_table(results, n_list, m_list):
    recall = {}
    for n in n_list:
        for m in m_list:
            hits = sum(any(iou > m for iou in r.ious[:n]) for r in results)
            recall[(n, m)] = hits / len(results)
    return recall


def evaluate(model, samples, n_list=(1, 5), m_list=(0.3, 0.5, 0.7)):
    """R@n, IoU=m over ``samples``.

    ``model.rank_spans(samples, n)`` must return, per sample, its top-``n``
    ``(s, e, confidence)`` spans.
    """
    if len(samples) == 0:
        raise EvalError("cannot evaluate on an empty sample set")
    n_max = max(n_list)
    ranked = model.rank_spans(samples, n_max)
    results = []
    for smp, spans in zip(samples, ranked):
        gt = (smp.annotation.tau_s, smp.annotation.tau_e)
        ious = [temporal_iou((s, e), gt) for s, e, _ in spans]
        results.append(SampleResult(smp.sample_id, list(spans), gt, ious))
    report = EvalReport(recall_table(results, n_list, m_list), results)
    report.check_monotone()
    return report


class OracleModel:
    """Returns the ground-truth span first; used to validate the harness."""

    def rank_spans(self, samples, n):
        out = []
        for smp in samples:
            a = smp.annotation
            spans = [(a.tau_s, a.tau_e, 1.0)]
            T = smp.frames.shape[0]
            k = 0
            while len(spans) < min(n, T * (T + 1) // 2):
                cand = (k % T, k % T, 0.0)
                if cand[:2] != (a.tau_s, a.tau_e):
                    spans.append(cand)
                k += 1
            out.append(spans)
        return out


class RandomScoreModel:
    """Scores drawn i.i.d. from a normal distribution; the chance baseline."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def rank_spans(self, samples, n):
        from .model import predict_topn

        out = []
        for smp in samples:
            T = smp.frames.shape[0]
            out.append(predict_topn(self.rng.standard_normal(T), self.rng.standard_normal(T), n))
        return out
