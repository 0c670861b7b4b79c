"""Command line entry point: ``siamxd {gen-data,run,ablate,sweep}``.

Every command reads a JSON config (see ``siamxd.config``). Results are
computed in full before anything is written; a single writer then places
each file atomically. If any fold fails, whatever did finish goes to
``<out>/quarantine/<command>/`` and the exit status is 1.
"""
import argparse
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace

from siamxd import reports
from siamxd.config import SMOKE_SIZES, load_config
from siamxd.data import DataError, read_dataset, synth_domain_shift, write_dataset
from siamxd.autodiff import ContractError, DimensionError
from siamxd.model import ConfigError, checkpoint_bytes
from siamxd.training import (BenchmarkData, FoldReport, ProtocolError, TrainingError, ablation_run,
                             k_fold_protocol, mask_name, n_shot_sweep)

log = logging.getLogger("siamxd")

DATA_SPLITS = ("source", "target_train", "target_test")
# small enough to finish in seconds; used by the test suite
SMOKE_PROTOCOL = {"k": 3, "group_size": 60}
SMOKE_EPOCHS = 2


class OutputError(RuntimeError):
    pass


def _out_dir(args, cfg):
    out = args.out or cfg.out
    if not out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return out


def _check_empty(path, force, names=None):
    if not os.path.isdir(path):
        return
    present = sorted(os.listdir(path) if names is None else [n for n in names if os.path.exists(os.path.join(path, n))])
    if present and not force:
        raise OutputError(f"{path} already contains {present}; use --force to overwrite")


def write_outputs(root, files):
    """The single writer: ``files`` maps relative paths to bytes."""
    for rel in sorted(files):
        dest = os.path.join(root, rel)
        os.makedirs(os.path.dirname(dest), exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(dest), prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(files[rel])
        os.replace(tmp, dest)


def _quarantine(root, command, files):
    qdir = os.path.join(root, "quarantine", command)
    if os.path.isdir(qdir):
        shutil.rmtree(qdir)
    write_outputs(qdir, files)
    return qdir


# --- commands --------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    out = _out_dir(args, cfg)
    _check_empty(out, args.force)
    sizes = SMOKE_SIZES if args.smoke else cfg.sizes
    ds = synth_domain_shift(cfg.shift, sizes.n_source, sizes.n_target_train, sizes.n_target_test, cfg.seed)
    os.makedirs(out, exist_ok=True)
    staging = tempfile.mkdtemp(dir=out, prefix=".staging-")
    try:
        for name, dataset in zip(DATA_SPLITS, ds):
            write_dataset(dataset, os.path.join(staging, name))
        for name in DATA_SPLITS:
            dest = os.path.join(out, name)
            if os.path.isdir(dest):
                shutil.rmtree(dest)
            os.replace(os.path.join(staging, name), dest)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    for name, dataset in zip(DATA_SPLITS, ds):
        pos = int(dataset.labels.sum())
        print(f"{name}: {len(dataset)} samples ({pos} positive, {len(dataset) - pos} negative)")
    return 0


def _load_data(cfg):
    if not cfg.data:
        raise ConfigError("config needs 'data' pointing at a gen-data output directory")
    return BenchmarkData(*(read_dataset(os.path.join(cfg.data, name)) for name in DATA_SPLITS))


def _settings(args, cfg, data):
    train = replace(cfg.train, seed=cfg.seed)
    protocol = cfg.protocol
    if args.smoke:
        train = replace(train, epochs=min(train.epochs, SMOKE_EPOCHS))
        protocol = replace(protocol, **SMOKE_PROTOCOL)
    model_cfg = cfg.model_config(int(data.source[0].pixels.size))
    kw = dict(k=protocol.k, model_config=model_cfg, seed=cfg.seed, group_size=protocol.group_size, jobs=args.jobs)
    return train, protocol, kw


def _records(run_id, report_or_folds):
    folds = report_or_folds.folds if isinstance(report_or_folds, FoldReport) else report_or_folds
    return reports.fold_records(run_id, folds)


def _failed(out, command, files, exc):
    qdir = _quarantine(out, command, files)
    print(f"error: {exc}", file=sys.stderr)
    print(f"partial outputs written to {qdir}", file=sys.stderr)
    return 1


def cmd_run(args, cfg):
    out = _out_dir(args, cfg)
    _check_empty(out, args.force, ["summary.csv", "records.tsv", "checkpoints"])
    data = _load_data(cfg)
    train, protocol, kw = _settings(args, cfg, data)
    mask = "none" if protocol.method == "source-only" else mask_name(train.use_cp, train.use_cd)
    run_id = f"{protocol.method}-{mask}-n{protocol.n}"
    try:
        report = k_fold_protocol(data, protocol.n, train, method=protocol.method, **kw)
    except ProtocolError as exc:
        ok = [r for r in exc.results if not r.error]
        text = reports.records_text(_records(run_id, list(exc.results)))
        files = {"records.tsv": text.encode()}
        files.update({f"checkpoints/fold{r.fold:02d}.ckpt": checkpoint_bytes(r.model) for r in ok})
        return _failed(out, "run", files, exc)
    files = {
        "summary.csv": reports.summary_csv(protocol.method, mask, protocol.n, report).encode(),
        "records.tsv": reports.records_text(_records(run_id, report)).encode(),
    }
    files.update({f"checkpoints/fold{f.fold:02d}.ckpt": checkpoint_bytes(f.model) for f in report.folds})
    if os.path.isdir(os.path.join(out, "checkpoints")):
        shutil.rmtree(os.path.join(out, "checkpoints"))
    write_outputs(out, files)
    print(f"{run_id}: accuracy {report.accuracy_str()}  f1 {report.f1_str()}  (k={report.k})")
    return 0


def cmd_ablate(args, cfg):
    out = _out_dir(args, cfg)
    _check_empty(out, args.force, ["ablation.csv", "ablation_records.tsv"])
    data = _load_data(cfg)
    train, protocol, kw = _settings(args, cfg, data)
    try:
        table = ablation_run(data, protocol.n, train, **kw)
    except ProtocolError as exc:
        text = reports.records_text(_records(f"ablation-n{protocol.n}", list(exc.results)))
        return _failed(out, "ablate", {"ablation_records.tsv": text.encode()}, exc)
    lines = []
    for name, report in table.items():
        lines += _records(f"ours-{name}-n{protocol.n}", report)
    write_outputs(out, {"ablation.csv": reports.ablation_csv(table).encode(),
                        "ablation_records.tsv": reports.records_text(lines).encode()})
    for name, report in table.items():
        print(f"{name}: accuracy {report.accuracy_str()}  f1 {report.f1_str()}")
    return 0


def cmd_sweep(args, cfg):
    out = _out_dir(args, cfg)
    _check_empty(out, args.force, ["sweep.csv", "sweep_records.tsv"])
    data = _load_data(cfg)
    train, protocol, kw = _settings(args, cfg, data)
    try:
        curve = n_shot_sweep(data, train, ns=protocol.ns, **kw)
    except ProtocolError as exc:
        text = reports.records_text(_records("sweep", list(exc.results)))
        return _failed(out, "sweep", {"sweep_records.tsv": text.encode()}, exc)
    mask = mask_name(train.use_cp, train.use_cd)
    lines = []
    for n, report in curve:
        lines += _records(f"ours-{mask}-n{n}", report)
    write_outputs(out, {"sweep.csv": reports.sweep_csv(curve).encode(),
                        "sweep_records.tsv": reports.records_text(lines).encode()})
    for n, report in curve:
        print(f"n={n}: accuracy {report.accuracy_str()}  f1 {report.f1_str()}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "ablate": cmd_ablate, "sweep": cmd_sweep}


def build_parser():
    parser = argparse.ArgumentParser(prog="siamxd", description="Few-shot cross-domain Siamese training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-fold progress")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate the synthetic source/target benchmark",
        "run": "k-fold protocol for one method and shot count",
        "ablate": "k-fold protocol for each loss mask",
        "sweep": "k-fold protocol for each shot count",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--smoke", action="store_true", help="tiny sizes for a quick end-to-end check")
        if name != "gen-data":
            p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OutputError, DataError, ContractError, DimensionError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
