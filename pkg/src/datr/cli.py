"""``datr`` command line.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import erpgeo, synthdata
from .attention import ConfigError
from .config import RunConfig, load_config_file, resolve
from .metrics import confusion_matrix, iou_per_class
from .model import build_model, predict, variant_config
from .numkit.rng import Rng
from .uda import IGNORE, LOG_COLUMNS, Split, TrainConfig, Trainer, predict_split

PALETTE = np.array([[70, 130, 180], [128, 64, 128], [70, 70, 70], [220, 220, 0],
                    [0, 0, 142], [107, 142, 35], [152, 251, 152], [220, 20, 60]], np.uint8)

# config keys kept out of checkpoints so that the output location does not change the bytes
_PATH_KEYS = ("data_dir", "out_dir")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.9g}"
    return str(v)


# -- gen-data --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = synthdata.DatasetConfig(seed=args.seed, num_classes=args.classes,
                                  pinhole_size=(args.pinhole_size, args.pinhole_size),
                                  erp_size=(args.erp_height, 2 * args.erp_height),
                                  hfov_deg=args.hfov, n_train=args.n_train, n_val=args.n_val)
    if args.n_train < 1 or args.n_val < 0:
        raise ConfigError("--n-train must be >= 1 and --n-val >= 0")
    meta = synthdata.generate(cfg, args.out)
    print(f"wrote {args.out}: classes={','.join(meta['classes'])} "
          f"pinhole={cfg.pinhole_size[0]}x{cfg.pinhole_size[1]} erp={cfg.erp_size[0]}x{cfg.erp_size[1]}")
    for split, counts in meta["splits"].items():
        print(f"  {split}: " + ", ".join(f"{d}={n}" for d, n in counts.items()))
    return 0


# -- train -----------------------------------------------------------------

def _run_config(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in RunConfig.__dataclass_fields__}
    if not getattr(args, "wrap_horizontal", False):
        flags["wrap_horizontal"] = None
    return resolve(file_values, flags)


def _train_config(rc: RunConfig) -> TrainConfig:
    return TrainConfig(rc.epochs_source, rc.epochs_adapt, rc.batch_size, rc.lr, rc.lambda_ss,
                       rc.lambda_f, rc.threshold, seed=rc.seed)


def _dataset_classes(data_dir, expected: int | None) -> int:
    k = len(synthdata.read_meta(data_dir)["classes"])
    if expected is not None and expected != k:
        raise ConfigError(f"--classes {expected} does not match the dataset's {k} classes")
    return k


def _check_labels(labels: np.ndarray, k: int, what: str) -> None:
    bad = (labels >= k) & (labels != IGNORE)
    if bad.any():
        raise ConfigError(f"{what} contains label {int(labels[bad].max())} but the model has {k} classes")


def _save(path, trainer: Trainer, rc: RunConfig, phase: str, best: float) -> None:
    config = {"run": {k: v for k, v in rc.to_dict().items() if k not in _PATH_KEYS},
              "best_miou": None if math.isnan(best) else best}
    ckpt_io.checkpoint_save(path, trainer.model, trainer.bank, config=config, epoch=trainer.epoch,
                            phase=phase, rng_state=trainer.rng.get_state(), step=trainer.step,
                            optim=trainer.optim)


def cmd_train(args) -> int:
    rc = _run_config(args)
    k = _dataset_classes(rc.data_dir, args.classes)
    src_img, src_lab = synthdata.load_split(rc.data_dir, "train", "source", require_labels=True)
    tgt_img, _ = synthdata.load_split(rc.data_dir, "train", "target")
    _check_labels(src_lab, k, "source labels")
    val = None
    if (Path(rc.data_dir) / "val" / "target" / "index.txt").exists():
        val = Split(*synthdata.load_split(rc.data_dir, "val", "target", require_labels=True))
        _check_labels(val.labels, k, "validation labels")

    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(variant_config(rc.variant, k, rc.neighborhood, rc.pe_mode, rc.wrap_horizontal,
                                       rc.structure), Rng(rc.seed).spawn(7))
    trainer = Trainer(model, Split(src_img, src_lab), Split(tgt_img), _train_config(rc), val)
    log_path = out / "train_log.csv"
    rows, best = [], float("nan")

    if args.resume:
        ck = ckpt_io.checkpoint_load(args.resume)
        if ck.header["config"]["model"] != json.loads(json.dumps(model.cfg.to_dict())):
            raise ConfigError(f"{args.resume} was written for a different model configuration")
        model.load_state_dict(ck.group("model"))
        state = {"epoch": ck.header["epoch"], "step": ck.header["step"],
                 "rng_state": ckpt_io.rng_state(ck), "optim_t": ck.header["optim_t"]}
        trainer.load_state(state, ck.tensors, ckpt_io.restore_bank(ck))
        stored = ck.header["config"].get("best_miou")
        best = float("nan") if stored is None else float(stored)
        if log_path.exists():
            with open(log_path, newline="", encoding="utf-8") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= trainer.epoch]
        print(f"resumed from {args.resume} at epoch {trainer.epoch}, step {trainer.step}")

    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r[c] for c in LOG_COLUMNS])
        for row in trainer.run():
            writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            fh.flush()
            rows.append(row)
            improved = not math.isnan(row["miou_val"]) and (math.isnan(best) or row["miou_val"] > best)
            if improved:
                best = row["miou_val"]
            _save(out / "ckpt_last.dtrc", trainer, rc, row["phase"], best)
            if improved or (val is None and trainer.epoch == trainer.cfg.total_epochs):
                _save(out / "ckpt_best.dtrc", trainer, rc, row["phase"], best)
            print(" ".join(f"{c}={_fmt(row[c])}" for c in LOG_COLUMNS), flush=True)
    if not (out / "ckpt_best.dtrc").exists():
        _save(out / "ckpt_best.dtrc", trainer, rc, trainer.phase_of(trainer.epoch), best)
    if args.report:
        from .plotting import plot_training_log

        parsed = [{c: (r[c] if c == "phase" else float(r[c])) for c in LOG_COLUMNS} for r in rows]
        plot_training_log(parsed, out / "train_log.png")
    return 0


# -- eval / infer ----------------------------------------------------------

def cmd_eval(args) -> int:
    model = ckpt_io.restore_model(ckpt_io.checkpoint_load(args.checkpoint))
    k = model.cfg.num_classes
    images, labels = synthdata.load_split(args.data, args.split, args.domain)
    if labels is None:
        raise synthdata.DataError(f"{args.data}/{args.split}/{args.domain} has no labels to evaluate against")
    _check_labels(labels, k, "labels")
    preds = predict_split(model, Split(images, labels), args.batch_size)
    iou = iou_per_class(confusion_matrix(preds, labels, k))
    miou = float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else float("nan")
    try:
        names = synthdata.read_meta(args.data)["classes"]
    except synthdata.DataError:
        names = [f"class{i}" for i in range(k)]

    print(f"{'class':<12} {'IoU':>7}")
    for name, v in zip(names, iou):
        print(f"{name:<12} {'absent' if math.isnan(v) else f'{v:7.4f}':>7}")
    print(f"{'mIoU':<12} {miou:7.4f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "iou"])
            for name, v in zip(names, iou):
                w.writerow([name, _fmt(float(v))])
            w.writerow(["mIoU", _fmt(miou)])
        if not args.no_plot:
            from .plotting import plot_iou

            plot_iou(names, iou, out.with_suffix(".png"))
    return 0


def cmd_infer(args) -> int:
    model = ckpt_io.restore_model(ckpt_io.checkpoint_load(args.checkpoint))
    img = synthdata.read_ppm(args.image).astype(np.float32) / 255.0
    _, labels = predict(img, model)
    labels = labels[0].astype(np.uint8)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    k = model.cfg.num_classes
    palette = PALETTE[np.arange(k) % len(PALETTE)]
    synthdata.write_pgm(prefix.with_suffix(".pgm"), labels)
    synthdata.write_ppm(prefix.parent / f"{prefix.name}_color.ppm", palette[labels])
    (prefix.parent / f"{prefix.name}_palette.json").write_text(
        json.dumps({str(i): palette[i].tolist() for i in range(k)}, indent=1) + "\n", encoding="utf-8")
    print(f"{args.image}: {labels.shape[0]}x{labels.shape[1]} -> {prefix.with_suffix('.pgm')}")
    return 0


# -- reports ---------------------------------------------------------------

def cmd_distortion_report(args) -> int:
    table = erpgeo.distortion_report(args.width, args.n, args.rows, args.n_prime)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    erpgeo.write_report_csv(table, out)
    if not args.no_plot:
        from .plotting import plot_distortion

        plot_distortion(table, args.width, args.n, out.with_suffix(".png"))
    print(f"wrote {len(table)} rows to {out}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import format_report, run_selfcheck

    results = run_selfcheck(args.inject_fault)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_toy_uda(args) -> int:
    from .experiment import ARMS, ToyConfig, run_toy, summarize

    cfg = ToyConfig(seeds=tuple(args.seeds), variant=args.variant)
    cfg = replace(cfg, train=replace(cfg.train, lr=args.lr, epochs_source=args.epochs_source,
                                     epochs_adapt=args.epochs_adapt, batch_size=args.batch_size),
                  data=replace(cfg.data, n_train=args.n_train, n_val=args.n_val))
    results = run_toy(cfg, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "toy_uda.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "seed", "miou"])
        for r in results:
            w.writerow([r.arm, r.seed, _fmt(r.miou)])
    summary = summarize(results)
    (out / "toy_uda_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    from .plotting import plot_iou

    plot_iou(list(ARMS), [summary[f"miou_{a}"] for a in ARMS], out / "toy_uda.png")
    for key, v in summary.items():
        print(f"{key:<18} {v:.4f}")
    return 0


# -- parser ----------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--variant", choices=("M", "T", "S"))
    p.add_argument("--neighborhood", type=int, help="DA window size (odd)")
    p.add_argument("--structure", help="4 chars of o (ESA) / s (DA), e.g. ooos")
    p.add_argument("--pe", dest="pe_mode", choices=("rpe", "ape", "none"))
    p.add_argument("--wrap-horizontal", action="store_true", default=None)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs-source", type=int)
    p.add_argument("--epochs-adapt", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-ss", type=float)
    p.add_argument("--lambda-f", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--classes", type=int, help="expected class count (checked against the dataset)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--report", action="store_true", help="also render train_log.png")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic pinhole/ERP dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=128)
    p.add_argument("--n-val", type=int, default=32)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--pinhole-size", type=int, default=128)
    p.add_argument("--erp-height", type=int, default=128)
    p.add_argument("--hfov", type=float, default=90.0, help="pinhole horizontal FoV in degrees")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="source-only warm-up then adaptation")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class IoU and mIoU of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--domain", default="target", choices=("source", "target"))
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out", help="CSV report (a bar chart is written next to it)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="label map and colour rendering for one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("distortion-report", help="pixel pitch and distortion per latitude row")
    p.add_argument("--width", type=float, default=2 * math.pi, help="ERP width W")
    p.add_argument("--n", type=int, default=8, help="pixels per row")
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--n-prime", type=float, default=1.0, help="pixel separation")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_distortion_report)

    p = sub.add_parser("selfcheck", help="run the built-in oracle suite")
    p.add_argument("--inject-fault", choices=("rpe-shape",), help="corrupt a component on purpose")
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("toy-uda", help="source-only vs self-training vs feature aggregation")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--variant", choices=("M", "T", "S"), default="M")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs-source", type=int, default=5)
    p.add_argument("--epochs-adapt", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--n-train", type=int, default=128)
    p.add_argument("--n-val", type=int, default=32)
    p.set_defaults(func=cmd_toy_uda)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (synthdata.DataError, ckpt_io.CheckpointError, erpgeo.DomainError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
