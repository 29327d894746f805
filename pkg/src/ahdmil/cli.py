"""``ahdmil`` command line.

Subcommands: gen, train-sd, train-ad, infer, eval, sweep. Exit codes are 0 on
success, 1 for usage errors, 2 for data errors and 3 when training aborts on a
non-finite value.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from . import datagen
from . import pipeline as pl
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_targets,
    save_checkpoint,
    save_targets,
)
from .config import RunConfig

log = logging.getLogger("ahdmil")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CALIBRATION_COLUMNS = ("bin_lo", "bin_hi", "mean_conf", "obs_freq", "count")
TIMING_COLUMNS = ("bag_id", "t_lowres", "t_select", "t_feat", "t_model", "kept", "n")
SWEEP_COLUMNS = ("param", "value", "seed", "auc", "acc", "f1", "brier", "retention")
SWEEP_FIELDS = {"p": "p", "K": "degree", "r": "r", "lambda": "lam"}

_num_or_null = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["mode", "split", "n_classes", "metrics"],
    "properties": {
        "mode": {"enum": list(pl.MODES)},
        "split": {"type": "string"},
        "n_classes": {"type": "integer", "minimum": 2},
        "metrics": {
            "type": "object",
            "required": ["n_samples", "acc", "macro_f1", "brier", "auc", "auc_notes", "calibration",
                         "retention_mean", "retention_std", "per_bag_correct", "p_value_vs"],
            "properties": {
                "n_samples": {"type": "integer", "minimum": 1},
                "acc": {"type": "number", "minimum": 0, "maximum": 1},
                "macro_f1": {"type": "number", "minimum": 0, "maximum": 1},
                "brier": {"type": "number", "minimum": 0, "maximum": 2},
                "auc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                "auc_notes": {"type": "array", "items": {"type": "string"}},
                "calibration": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["lo", "hi", "mean_conf", "obs_freq", "count"],
                        "properties": {
                            "lo": {"type": "number"}, "hi": {"type": "number"},
                            "mean_conf": _num_or_null, "obs_freq": _num_or_null,
                            "count": {"type": "integer", "minimum": 0},
                        },
                    },
                },
                "retention_mean": _num_or_null,
                "retention_std": _num_or_null,
                "per_bag_correct": {"type": "array", "items": {"enum": [0, 1]}},
                "p_value_vs": {"type": "object", "additionalProperties": {"type": "number"}},
            },
        },
        "bag_ids": {"type": "array", "items": {"type": "string"}},
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_id() -> str:
    """``git describe``-style identifier of the source tree, or the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        )
        return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


# ---------------------------------------------------------------------------
# config and run directories
# ---------------------------------------------------------------------------

def _config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        cfg = cfg.replace(**json.loads(path.read_text()))
    overrides = {
        "seed": getattr(args, "seed", None),
        "p": getattr(args, "p", None),
        "lam": getattr(args, "lam", None),
        "r": getattr(args, "r", None),
        "degree": getattr(args, "K", None),
        "epochs_sd": getattr(args, "epochs_sd", None),
        "epochs_ad": getattr(args, "epochs_ad", None),
        "lr_sd": getattr(args, "lr_sd", None),
        "lr_ad": getattr(args, "lr_ad", None),
        "lr_lipn": getattr(args, "lr_lipn", None),
    }
    return cfg.replace(**overrides)


def _prepare_run(out: Path, cfg: RunConfig, command: str) -> Path:
    for sub in ("logs", "checkpoints", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    (out / "seed").write_text(f"{cfg.seed}\n")
    (out / "BUILD").write_text(build_id() + "\n")
    with open(out / "logs" / "commands.log", "a") as fh:
        fh.write(command + "\n")
    return out


class _JsonLines:
    def __init__(self, path: Path):
        self.fh = open(path, "w")

    def __call__(self, record: dict):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()
        if "epoch" in record:
            log.info("%s epoch %d: val_auc=%s", record["stage"], record["epoch"], record.get("val_auc"))

    def close(self):
        self.fh.close()


def _load_data(root):
    manifest = datagen.load_manifest(root)
    return manifest, lambda split: datagen.load_split(root, manifest, split)


def _split(manifest, load, name):
    if name not in manifest.splits:
        raise UsageError(f"unknown split {name!r}; have {sorted(manifest.splits)}")
    return load(name)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    cfg = datagen.GenConfig(
        n_classes=args.classes, n_bags=args.bags, n_min=args.n_range[0], n_max=args.n_range[1],
        dim=args.dim, rho=args.rho, signal=args.signal, noise=args.noise, lowres=args.lowres,
        dim_lo=args.dim_lo,
    )
    manifest, bags = datagen.generate_dataset(cfg, args.seed)
    if out.exists() and args.force:
        for p in (out / "bags").glob("*.ahdb"):
            p.unlink()
    datagen.save_dataset(out, manifest, bags)
    print(f"wrote {len(bags)} bags to {out} (digest {datagen.directory_digest(out)[:16]})")
    return EXIT_OK


def cmd_train_sd(args) -> int:
    manifest, load = _load_data(args.data)
    cfg = _config(args)
    out = _prepare_run(Path(args.out), cfg, " ".join(sys.argv))
    logger = _JsonLines(out / "logs" / "train-sd.jsonl")
    try:
        ckpt, targets = pl.train_sd(load("train"), load("val"), cfg, manifest.n_classes, manifest.dim, logger)
    finally:
        logger.close()
    save_checkpoint(ckpt, out / "checkpoints" / "sd.ahck")
    save_targets(targets, out / "checkpoints" / "targets.ahtg")
    print(f"SD checkpoint (epoch {ckpt.epoch}) -> {out / 'checkpoints' / 'sd.ahck'}")
    return EXIT_OK


def cmd_train_ad(args) -> int:
    manifest, load = _load_data(args.data)
    out = Path(args.out)
    ckpt_path = Path(args.ckpt) if args.ckpt else out / "checkpoints" / "sd.ahck"
    targets_path = Path(args.targets) if args.targets else ckpt_path.with_name("targets.ahtg")
    for p in (ckpt_path, targets_path):
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run train-sd first")
    sd = load_checkpoint(ckpt_path)
    cfg = _config(args, base=sd.config)
    _prepare_run(out, cfg, " ".join(sys.argv))
    logger = _JsonLines(out / "logs" / "train-ad.jsonl")
    try:
        ckpt = pl.train_ad(load("train"), load("val"), sd, load_targets(targets_path), cfg, logger)
    finally:
        logger.close()
    save_checkpoint(ckpt, out / "checkpoints" / "ad.ahck")
    print(f"AD checkpoint (epoch {ckpt.epoch}) -> {out / 'checkpoints' / 'ad.ahck'}")
    return EXIT_OK


def report_document(report, mode: str, split: str, n_classes: int, bag_ids) -> dict:
    return {
        "mode": mode, "split": split, "n_classes": n_classes,
        "metrics": report.to_dict(), "bag_ids": list(bag_ids),
    }


def write_report(path: Path, doc: dict, traces) -> dict:
    """Report JSON plus ``<stem>.calibration.csv`` and ``<stem>.timing.csv`` next to it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    stem = path.with_suffix("")
    cal_path = Path(f"{stem}.calibration.csv")
    with open(cal_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CALIBRATION_COLUMNS)
        for b in doc["metrics"]["calibration"]:
            w.writerow([b["lo"], b["hi"], _blank(b["mean_conf"]), _blank(b["obs_freq"]), b["count"]])
    timing_path = Path(f"{stem}.timing.csv")
    with open(timing_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, TIMING_COLUMNS)
        w.writeheader()
        for t in traces:
            w.writerow({"bag_id": t.bag_id, **t.timing_row()})
    return {"report": path, "calibration": cal_path, "timing": timing_path}


def _blank(v):
    return "" if v is None else v


def _evaluate_cmd(args, write_predictions: bool) -> int:
    manifest, load = _load_data(args.data)
    ckpt = load_checkpoint(args.ckpt)
    if args.mode == "student-pruned" and ckpt.lipn is None:
        raise UsageError(f"mode student-pruned needs an AD checkpoint; {args.ckpt} holds stage {ckpt.stage!r}")
    bags = _split(manifest, load, args.split)
    report, traces = pl.evaluate(bags, ckpt.dmin, ckpt.lipn, args.mode)
    if args.compare:
        other_mode = "teacher-full" if args.mode == "student-pruned" else "student-pruned"
        if other_mode == "student-pruned" and ckpt.lipn is None:
            raise UsageError("--compare against student-pruned needs an AD checkpoint")
        other, _ = pl.evaluate(bags, ckpt.dmin, ckpt.lipn, other_mode)
        pl.compare(report, other, other_mode)
    report_path = Path(args.report or Path(args.ckpt).parent.parent / "reports" / f"{args.mode}-{args.split}.json")
    doc = report_document(report, args.mode, args.split, manifest.n_classes, [b.bag_id for b in bags])
    paths = write_report(report_path, doc, traces)
    if write_predictions:
        pred_path = Path(f"{report_path.with_suffix('')}.predictions.csv")
        with open(pred_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bag_id", "label", "pred", "kept", "n", "fallback"]
                       + [f"p{c}" for c in range(manifest.n_classes)])
            for b, t in zip(bags, traces):
                w.writerow([b.bag_id, b.label, t.pred, t.kept, t.n, int(t.fallback)] + list(t.probs))
        paths["predictions"] = pred_path
    auc = "n/a" if report.auc is None else f"{report.auc:.4f}"
    print(f"{args.mode} on {args.split}: AUC {auc}  Acc {report.acc:.4f}  F1 {report.macro_f1:.4f}"
          f"  Brier {report.brier:.4f}  retention {report.retention_mean:.3f}")
    for kind, p in paths.items():
        print(f"  {kind}: {p}")
    return EXIT_OK


def cmd_eval(args) -> int:
    return _evaluate_cmd(args, write_predictions=False)


def cmd_infer(args) -> int:
    return _evaluate_cmd(args, write_predictions=True)


# -- sweep ------------------------------------------------------------------

def _parse_values(text: str, param: str) -> list:
    values = [v for v in (s.strip() for s in text.split(",")) if v]
    if not values:
        raise UsageError("--values needs at least one value")
    cast = int if param == "K" else float
    try:
        return [cast(v) for v in values]
    except ValueError:
        raise UsageError(f"--values for {param} must be numbers: {text!r}") from None


def _existing_keys(path: Path) -> set:
    if not path.exists():
        return set()
    with open(path, newline="") as fh:
        return {(r["param"], r["value"], r["seed"]) for r in csv.DictReader(fh)}


def _sweep_cell(data_root: str, cfg_dict: dict, param: str, value, seed: int) -> dict:
    manifest, load = _load_data(data_root)
    bags = {b.bag_id: b for s in ("train", "val", "test") for b in load(s)}
    cfg = RunConfig.from_dict(cfg_dict).replace(**{SWEEP_FIELDS[param]: value, "seed": seed})
    res = pl.run(manifest, bags, cfg)
    rep = res.student
    return {
        "param": param, "value": str(value), "seed": str(seed),
        "auc": "" if rep.auc is None else repr(rep.auc), "acc": repr(rep.acc),
        "f1": repr(rep.macro_f1), "brier": repr(rep.brier), "retention": repr(rep.retention_mean),
    }


def cmd_sweep(args) -> int:
    values = _parse_values(args.values, args.param)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    datagen.load_manifest(args.data)
    cfg = _config(args)
    out = _prepare_run(Path(args.out), cfg, " ".join(sys.argv))
    csv_path = Path(args.csv) if args.csv else out / "reports" / "sweep.csv"
    done = _existing_keys(csv_path)
    todo = [(v, s) for v in values for s in seeds if (args.param, str(v), str(s)) not in done]
    if not todo:
        print(f"sweep: all {len(values) * len(seeds)} cells already in {csv_path}")
        return EXIT_OK
    new_file = not csv_path.exists()
    cells = [(args.data, cfg.to_dict(), args.param, v, s) for v, s in todo]
    workers = min(pl.worker_count(), len(cells))
    with open(csv_path, "a", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS)
        if new_file:
            w.writeheader()
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = pool.map(_sweep_cell, *zip(*cells))
                for row in rows:
                    w.writerow(row)
                    fh.flush()
        else:
            for cell in cells:
                w.writerow(_sweep_cell(*cell))
                fh.flush()
    print(f"sweep: wrote {len(cells)} rows to {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_training_flags(p):
    p.add_argument("--data", required=True, help="dataset directory (manifest.json + bags/)")
    p.add_argument("--config", help="flat JSON config; flags override it")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--r", type=float, help="target retention ratio")
    p.add_argument("--K", type=int, help="Chebyshev degree")
    p.add_argument("--p", type=float, help="soft-mode probability")
    p.add_argument("--lambda", dest="lam", type=float, help="CBEMA ratio")
    p.add_argument("--epochs-sd", type=int)
    p.add_argument("--epochs-ad", type=int)
    p.add_argument("--lr-sd", type=float)
    p.add_argument("--lr-ad", type=float)
    p.add_argument("--lr-lipn", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ahdmil", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {build_id()}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic paired-resolution dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--bags", type=int, default=200)
    g.add_argument("--n-range", type=int, nargs=2, default=(128, 512), metavar=("MIN", "MAX"))
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--rho", type=float, default=0.1)
    g.add_argument("--signal", type=float, default=3.0)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--lowres", choices=("patch", "vector"), default="patch")
    g.add_argument("--dim-lo", type=int, default=8)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("train-sd", help="self-distillation training of the DMIN")
    _add_training_flags(s)
    s.set_defaults(func=cmd_train_sd)

    a = sub.add_parser("train-ad", help="asymmetric distillation into the pre-screener")
    _add_training_flags(a)
    a.add_argument("--ckpt", help="SD checkpoint (default: <out>/checkpoints/sd.ahck)")
    a.add_argument("--targets", help="frozen targets (default: next to the SD checkpoint)")
    a.set_defaults(func=cmd_train_ad)

    for name, func, text in (("eval", cmd_eval, "metrics report"), ("infer", cmd_infer, "per-bag predictions")):
        e = sub.add_parser(name, help=f"{text} for one split")
        e.add_argument("--data", required=True)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--split", default="test")
        e.add_argument("--mode", choices=pl.MODES, default="student-pruned")
        e.add_argument("--report", help="report JSON path (CSVs are written next to it)")
        e.add_argument("--compare", action="store_true",
                       help="paired t-test of per-bag correctness against the other mode")
        e.set_defaults(func=func)

    w = sub.add_parser("sweep", help="run the pipeline over a grid of one hyperparameter")
    _add_training_flags(w)
    w.add_argument("--param", required=True, choices=tuple(SWEEP_FIELDS))
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--seeds", default="7", help="comma-separated seeds")
    w.add_argument("--csv", help="output CSV (default: <out>/reports/sweep.csv)")
    w.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ahdmil: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pl.NumericError as exc:
        print(f"ahdmil: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, datagen.BagFormatError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"ahdmil: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"ahdmil: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
