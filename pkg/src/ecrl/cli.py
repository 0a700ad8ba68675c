"""Command-line entry point.

Exit codes: 0 success, 2 config/input, 3 I/O, 4 training abort, 5 checkpoint,
6 gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ABORT, EXIT_CHECKPOINT, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


def _load_config(args):
    from .config import ConfigError, RunConfig

    try:
        return RunConfig.load(getattr(args, "config", None), getattr(args, "set", None) or ())
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from None


def _manifest_path(data, split):
    data = Path(data)
    return data if data.is_file() else data / f"{split}.tsv"


def _read_manifest(data, split):
    from .data import FeatureFormatError, ManifestError, read_manifest

    path = _manifest_path(data, split)
    if not path.is_file():
        raise CliError(EXIT_IO, f"manifest not found: {path}")
    try:
        return read_manifest(path)
    except (ManifestError, FeatureFormatError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None


def _load_samples(manifest):
    from .data import FeatureFormatError
    from .training import load_samples

    try:
        return load_samples(manifest)
    except FeatureFormatError as exc:
        raise CliError(EXIT_CONFIG, f"feature file error: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None


def cmd_gen_data(args):
    from .data import SPLITS, generate_dataset

    cfg = _load_config(args)
    fracs = tuple(float(x) for x in args.split.split(","))
    try:
        manifests = generate_dataset(cfg.synthetic(), args.n, args.out, fracs)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    Path(args.out, "config.txt").write_text(cfg.to_text())
    counts = ", ".join(f"{s}={len(manifests[s])}" for s in SPLITS)
    print(f"wrote {args.n} samples to {args.out}: {counts}")


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .evaluation import evaluate
    from .training import Trainer, TrainingAborted

    cfg = _load_config(args)
    train_m = _read_manifest(args.data, "train")
    val_path = _manifest_path(args.data, "val")
    val_m = _read_manifest(args.data, "val") if Path(args.data).is_dir() and val_path.is_file() else None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    (out / "config.txt").write_text(cfg.to_text())
    val = _load_samples(val_m) if val_m is not None and len(val_m) else None
    log_path = out / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    tr = Trainer(cfg, _load_samples(train_m), val, log_path=log_path, checkpoint_path=out / "best.ckpt")
    start = time.perf_counter()
    try:
        tr.fit()
    except TrainingAborted as exc:
        (out / "abort_dump.txt").write_text(f"{exc}\nbatch={exc.batch_id}\n{exc.dump}\n")
        raise CliError(EXIT_ABORT, f"training aborted: {exc}") from None
    save_checkpoint(out / "last.ckpt", tr.record())
    print(f"trained {cfg.epochs} epochs in {time.perf_counter() - start:.1f}s; "
          f"config hash {cfg.config_hash():016x}; best epoch {tr.state.best_epoch}")
    if val:
        from .training import network_from_checkpoint
        from .checkpoint import load_checkpoint

        net = network_from_checkpoint(load_checkpoint(out / "best.ckpt"))
        report = evaluate(net, val)
        report.write(out / "val_report.csv", out / "val_report_detail.csv")
        for (n, m), r in sorted(report.recall.items()):
            print(f"val R@{n},IoU={m:g} = {r:.4f}")


def cmd_eval(args):
    from .checkpoint import CheckpointError, load_checkpoint
    from .evaluation import evaluate
    from .training import network_from_checkpoint

    try:
        net = network_from_checkpoint(load_checkpoint(args.checkpoint))
    except (CheckpointError, KeyError, OSError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint error: {exc}") from None
    manifest = _read_manifest(args.data, args.split)
    samples = _load_samples(manifest)
    if not samples:
        raise CliError(EXIT_CONFIG, "manifest has no samples")
    m_list = tuple(float(m) for m in args.m.split(","))
    n_list = tuple(int(n) for n in args.n.split(","))
    report = evaluate(net, samples, n_list, m_list)
    report_path = Path(args.report)
    detail = report_path.with_name(report_path.stem + "_detail.csv")
    try:
        report.write(report_path, detail)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    for (n, m), r in sorted(report.recall.items()):
        print(f"R@{n},IoU={m:g} = {r:.4f}")


def cmd_augment_preview(args):
    from .augment import SubLabel, identity_params, map_boundaries, transform_video, augment

    cfg = _load_config(args)
    manifest = _read_manifest(args.data, args.split)
    try:
        rec = manifest.by_id(args.id)
    except KeyError:
        raise CliError(EXIT_CONFIG, f"unknown sample id {args.id!r}") from None
    fs = manifest.load(rec)
    if args.identity:
        params = identity_params(cfg.alpha)
        _, tmap = transform_video(fs, rec.annotation, params)
        ann = map_boundaries(tmap)
    else:
        rng = np.random.default_rng(args.seed)
        smp = augment(fs, rec.annotation, cfg.alpha, rng, cfg.spatial_noise_scale,
                      cfg.spatial_channel_drop, cfg.literal_ratio_range)
        params, tmap, ann = smp.params, smp.tmap, smp.annotation
    print(f"# sample {rec.sample_id}  original=({rec.tau_s}, {rec.tau_e})  "
          f"ratios: r_left={params.r_left:.4f} r_seg={params.r_seg:.4f} r_right={params.r_right:.4f}")
    print(f"# tau_s'={ann.tau_s} tau_e'={ann.tau_e}")
    print("t\ti'\tsub_label")
    for t, (src, lab) in enumerate(zip(tmap.map, tmap.sub_label)):
        print(f"{t}\t{src}\t{SubLabel(lab).name}")


def cmd_grad_check(args):
    from .autograd import corrupt_gradient
    from .gradcheck import TOY_DIMS, check_full_objective

    cfg = _load_config(args)
    start = time.perf_counter()
    if args.corrupt:
        with corrupt_gradient("lstm_sequence"):
            report = check_full_objective(cfg, tol=args.tol)
    else:
        report = check_full_objective(cfg, tol=args.tol)
    dims = ", ".join(f"{k}={v}" for k, v in TOY_DIMS.items())
    print(f"# gradient check of the joint objective at {dims}, float64, tol={args.tol:g}")
    for line in report.lines():
        print(line)
    print(f"# {len(report.errors)} parameters, {len(report.failures)} failures, "
          f"{time.perf_counter() - start:.1f}s")
    if not report.passed:
        raise CliError(EXIT_GRADCHECK, "gradient check failed: " + ", ".join(report.failures))


def read_log(path):
    from .training import LOG_FIELDS

    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    lines = text.splitlines()
    if not lines:
        raise CliError(EXIT_CONFIG, f"{path}:1: empty log")
    header = lines[0].split(",")
    if tuple(header) != LOG_FIELDS:
        raise CliError(EXIT_CONFIG, f"{path}:1: unexpected header {lines[0]!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split(",")
        try:
            if len(parts) != len(LOG_FIELDS):
                raise ValueError(f"expected {len(LOG_FIELDS)} fields")
            rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in zip(LOG_FIELDS, parts)})
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"{path}:{lineno}: malformed row ({exc})") from None
    if not rows:
        raise CliError(EXIT_CONFIG, f"{path}:2: log has no epochs")
    return rows


def cmd_report(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_log(args.log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ep = [r["epoch"] for r in rows]

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("l_tsg_aug", "l_tsg_orig", "l_cons", "l_overall"):
        ax.plot(ep, [r[key] for r in rows], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curve.png", dpi=100)
    plt.close(fig)

    val = np.array([r["val_r1_05"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ep, val, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("val R@1, IoU=0.5")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out / "recall_curve.png", dpi=100)
    plt.close(fig)

    finite = np.isfinite(val)
    lines = [f"epochs: {len(rows)}",
             f"final l_overall: {rows[-1]['l_overall']:.6f}",
             f"min l_overall: {min(r['l_overall'] for r in rows):.6f}"]
    if finite.any():
        best = int(np.nanargmax(np.where(finite, val, -np.inf)))
        lines += [f"best epoch: {ep[best]}", f"best val R@1,IoU=0.5: {val[best]:.6f}",
                  f"final val R@1,IoU=0.5: {val[-1]:.6f}"]
    else:
        lines.append("best epoch: n/a (no validation recall logged)")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def build_parser():
    p = argparse.ArgumentParser(prog="ecrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test fractions")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train on a dataset directory")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="R@n, IoU=m of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--n", default="1,5")
    sp.add_argument("--m", default="0.3,0.5,0.7")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("augment-preview", help="print the timestamp map of one augmentation")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--id", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--split", default="train")
    sp.add_argument("--identity", action="store_true", help="use ratios (1, 1, 1)")
    sp.set_defaults(func=cmd_augment_preview)

    sp = sub.add_parser("grad-check", help="finite-difference check of the joint objective")
    with_config(sp)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--corrupt", action="store_true", help="break the LSTM backward rule (negative control)")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("report", help="plots and summary from a training log")
    sp.add_argument("--log", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
