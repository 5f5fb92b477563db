"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, build_config
from .data import (
    DataError,
    build_patches,
    load_annotations,
    load_image,
    split_indices,
    synth_fixture,
)
from .model import MODES, MODE_LABELS, ModelConfig, init_model, probe_features
from .train import TrainingError, load_model, predict_images, save_model, train

log = logging.getLogger("biatten")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4

FLAG_KEYS = {
    "seed": "run.seed",
    "threads": "run.threads",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "mode": "model.mode",
    "channels": "model.channels",
    "depth": "model.depth",
    "hidden": "model.hidden",
    "stride": "patch.stride",
    "split": "split.mode",
    "train_fraction": "split.train_fraction",
}


# ---------------------------------------------------------------------------
# helpers


def _run_config(args) -> RunConfig:
    text = None
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "deterministic", False):
        overrides["run.deterministic"] = "true"
    if getattr(args, "shared_branches", False):
        overrides["model.shared_branches"] = "true"
    return build_config(text, overrides)


def _threads(run: RunConfig):
    """Cap BLAS threads; deterministic runs always use one."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(1 if run.deterministic else run.threads)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _records(path):
    if not Path(path).is_file():
        raise DataError(f"dataset CSV not found: {path}")
    records = load_annotations(path)
    if not records:
        raise DataError(f"dataset CSV {path} has no records")
    return records


def _split(records, run: RunConfig) -> tuple:
    if run.train_fraction >= 1.0:
        return list(range(len(records))), []
    return split_indices(records, run.split)


def _train_one(records, train_idx, run: RunConfig, model_cfg: ModelConfig):
    patches = build_patches(
        [records[i] for i in train_idx],
        size=run.patch_size,
        stride=run.patch_stride,
        indices=train_idx,
        threads=1 if run.deterministic else run.threads,
    )
    model = init_model(model_cfg, seed=run.seed)
    model, tlog = train(
        model, patches, run.train, on_epoch=lambda e, loss: log.info("epoch %d mean L1 %.5f", e, loss)
    )
    return model, tlog


def _evaluate(model, records, indices, run: RunConfig, batch_size: int):
    preds = predict_images(
        model,
        [records[i] for i in indices],
        size=run.patch_size,
        stride=run.patch_stride,
        indices=indices,
        batch_size=batch_size,
    )
    rows = [(idx, score, records[idx].mos) for idx, score in preds]
    ok = [(s, m) for _, s, m in rows if math.isfinite(s)]
    if len(ok) < 5:
        raise DataError(f"need at least 5 scored images to evaluate, got {len(ok)}")
    report = metrics.evaluate([s for s, _ in ok], [m for _, m in ok])
    return rows, report


# ---------------------------------------------------------------------------
# commands


def cmd_fixture(args) -> int:
    fx = synth_fixture(args.seed, args.contents, args.per_content, size=args.size)
    csv_path = fx.write(args.out)
    print(csv_path)
    return EXIT_OK


def cmd_train(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    (out / "config.ini").write_text(run.snapshot(), encoding="utf-8")
    records = _records(args.data)
    train_idx, test_idx = _split(records, run)
    with _threads(run):
        model, tlog = _train_one(records, train_idx, run, run.model)
    ckpt = out / "model.biat"
    save_model(
        ckpt,
        model,
        run.train,
        extra={"patch": {"size": run.patch_size, "stride": run.patch_stride}, "split": _split_meta(run, train_idx, test_idx)},
    )
    tlog.checkpoint_path = str(ckpt)
    _write_csv(out / "train_log.csv", ["epoch", "mean_l1", "seconds"], tlog.rows())
    print(f"checkpoint: {ckpt}")
    if tlog.losses:
        print(f"final mean L1: {tlog.losses[-1]:.6f}")
    return EXIT_OK


def _split_meta(run: RunConfig, train_idx, test_idx) -> dict:
    return {
        "seed": run.seed,
        "mode": run.split_mode,
        "train_fraction": run.train_fraction,
        "train": list(map(int, train_idx)),
        "test": list(map(int, test_idx)),
    }


def cmd_eval(args) -> int:
    run = _run_config(args)
    model, meta = load_model(args.checkpoint)
    if args.config and run.model.to_dict() != meta["model"]:
        raise CheckpointError("model section of --config does not match the checkpoint")
    run.model = model.config
    patch = meta.get("patch", {})
    run.patch_size = int(patch.get("size", run.patch_size))
    if args.stride is None:
        run.patch_stride = int(patch.get("stride", run.patch_stride))
    out = _out_dir(args)
    (out / "config.ini").write_text(run.snapshot(), encoding="utf-8")
    records = _records(args.data)
    if args.subset == "all":
        indices = list(range(len(records)))
    else:
        split = meta.get("split")
        if not split:
            raise CheckpointError("checkpoint carries no split; use --subset all")
        indices = split[args.subset]
        if max(indices, default=-1) >= len(records):
            raise DataError("checkpoint split refers to more records than the dataset has")
    with _threads(run):
        rows, report = _evaluate(model, records, indices, run, run.eval_batch_size)
    _write_csv(out / "predictions.csv", ["image_index", "pred", "mos"], [[i, repr(s), repr(m)] for i, s, m in rows])
    _write_csv(out / "report.csv", metrics.EvalReport.CSV_HEADER, [report.csv_row(Path(args.data).stem, model.mode)])
    print(f"SRCC {report.srcc:.4f}  KRCC {report.krcc:.4f}  PLCC {report.plcc:.4f}  RMSE {report.rmse:.4f}  (n={report.n})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    (out / "config.ini").write_text(run.snapshot(), encoding="utf-8")
    records = _records(args.data)
    train_idx, test_idx = _split(records, run)
    if not test_idx:
        raise ConfigError("ablation needs a test split (train_fraction < 1)")
    rows = []
    with _threads(run):
        for mode in MODES:
            cfg = ModelConfig(**{**run.model.to_dict(), "mode": mode})
            model, tlog = _train_one(records, train_idx, run, cfg)
            sub = out / mode
            sub.mkdir(exist_ok=True)
            save_model(
                sub / "model.biat",
                model,
                run.train,
                extra={"patch": {"size": run.patch_size, "stride": run.patch_stride}, "split": _split_meta(run, train_idx, test_idx)},
            )
            _write_csv(sub / "train_log.csv", ["epoch", "mean_l1", "seconds"], tlog.rows())
            _, report = _evaluate(model, records, test_idx, run, run.eval_batch_size)
            rows.append(report.csv_row(Path(args.data).stem, MODE_LABELS[mode]))
            print(f"{MODE_LABELS[mode]:>9}: SRCC {report.srcc:.4f}  KRCC {report.krcc:.4f}  PLCC {report.plcc:.4f}  RMSE {report.rmse:.4f}")
    _write_csv(out / "ablation.csv", metrics.EvalReport.CSV_HEADER, rows)
    return EXIT_OK


def _center_patch(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        raise DataError(f"image {h}x{w} is smaller than the {size}px patch")
    r, c = (h - size) // 2, (w - size) // 2
    return img[:, r : r + size, c : c + size]


def _save_gray(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(np.rint(metrics.minmax(arr) * 255).astype(np.uint8)).save(path)


def cmd_probe(args) -> int:
    model, meta = load_model(args.checkpoint)
    hr, sr = load_image(args.hr), load_image(args.sr)
    if hr.shape != sr.shape:
        raise DataError(f"HR {hr.shape[1:]} and SR {sr.shape[1:]} sizes differ")
    size = model.config.patch_size
    dump = probe_features(_center_patch(hr, size)[None], _center_patch(sr, size)[None], model)
    out = _out_dir(args)
    run = _run_config(args)
    (out / "config.ini").write_text(run.snapshot(), encoding="utf-8")
    for (branch, stage), fmap in dump.maps.items():
        _save_gray(out / f"{branch}_{stage}.png", fmap)
    for (branch, tag), amap in dump.attention.items():
        _save_gray(out / f"{branch}_{tag}_attention.png", amap)
    _write_csv(out / "probe.csv", dump.CSV_COLUMNS, dump.csv_rows())
    for row in dump.rows:
        print(f"{row['branch']} {row['stage']:<12} vs input {row['ssim_vs_input']:.4f}  cross-branch {row['ssim_cross_branch']:.4f}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    hr, sr = load_image(args.hr), load_image(args.sr)
    if hr.shape != sr.shape:
        raise DataError(f"HR {hr.shape[1:]} and SR {sr.shape[1:]} sizes differ")
    p = metrics.capped_psnr(metrics.psnr(hr, sr))
    s = metrics.ssim(hr, sr)
    print(f"PSNR {p:.4f} dB")
    print(f"SSIM {s:.6f}")
    row = [str(args.hr), str(args.sr), repr(p), repr(s)]
    if args.out:
        _write_csv(_out_dir(args) / "metrics.csv", ["hr", "sr", "psnr_db", "ssim"], [row])
    else:
        csv.writer(sys.stdout, lineterminator="\n").writerow(row)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="INI config file ([run], [patch], [split], [train], [model])")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log every epoch")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="annotation CSV")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--stride", type=int, help="patch stride")
    p.add_argument("--split", choices=("by-image", "by-content"))
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--shared-branches", action="store_true", help="HR and SR branches share weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biatten", description="Bi-directional attention FR-IQA for SR images")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="write a synthetic dataset (CSV + PNGs)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contents", type=int, default=50)
    p.add_argument("--per-content", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("train", help="train a model on the train split")
    _common(p)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score images with a checkpoint and report SRCC/KRCC/PLCC/RMSE")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", choices=("all", "train", "test"), default="all")
    p.add_argument("--stride", type=int, help="patch stride (default: the training stride)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and test all four attention modes on one split")
    _common(p)
    _training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="dump feature maps around the attention blocks")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hr", required=True)
    p.add_argument("--sr", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("metrics", help="PSNR and SSIM between two images")
    p.add_argument("--hr", required=True)
    p.add_argument("--sr", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
