"""Command line entry point: ``advtrain {train,evaluate,sweep,intermediate-curve,report}``.

Every command takes ``--config FILE`` plus one ``--<key>`` flag per config key.
Diagnostics go to stderr; results go to files under ``output_dir``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import evaluation as E
from .attacks import AttackConfig
from .config import SCHEMA, RunConfig, parse_config, parse_lines
from .data import load_split
from .errors import AdvTrainError, ConfigError
from .metrics import MetricsRow, append_rows, read_rows
from .model import build_default_arch, checkpoint_load, checkpoint_save, init_params
from .regimes import train

log = logging.getLogger("advtrain")

CHECKPOINT_NAME = "model.atnn"
MANIFEST_NAME = "manifest.txt"
EPOCHS_CSV = "epochs.csv"
EVALS_CSV = "evals.csv"
SWEEP_CSV = "sweep.csv"
CURVE_CSV = "curve.csv"
REPORT_TXT = "report.txt"


@contextlib.contextmanager
def output_lock(directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise AdvTrainError(f"{directory} is locked by another invocation ({lock} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _require_data_dir(config: RunConfig):
    if not config.data_dir or not Path(config.data_dir).is_dir():
        raise ConfigError(f"data_dir {config.data_dir!r} is not an existing directory", key="data_dir")


def write_manifest(run_dir: Path, config: RunConfig, extra: dict) -> None:
    lines = [f"# run_id={config.run_id}"] + [f"# {k}={v}" for k, v in extra.items()]
    (run_dir / MANIFEST_NAME).write_text("\n".join(lines) + "\n" + config.to_text())


def cmd_train(config: RunConfig) -> Path:
    """Train one regime; write checkpoint, epochs.csv, epoch records and manifest."""
    _require_data_dir(config)
    train_split = load_split(config.data_dir, "train", config.train_subset)
    run_dir = Path(config.output_dir) / config.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in (EPOCHS_CSV, CHECKPOINT_NAME):
        (run_dir / stale).unlink(missing_ok=True)
    log.info("training %s on %d examples -> %s", config.regime, len(train_split), run_dir)
    model = init_params(build_default_arch(), config.seed)
    regime = config.regime_config()
    attack = "clean" if config.regime == "vanilla" else config.attack.describe()

    def on_epoch(record):
        append_rows(run_dir / EPOCHS_CSV, [MetricsRow(config.run_id, "epoch", record.epoch, attack,
                                                      "train_loss", record.train_loss, record.seconds)])

    model, records = train(model, train_split, regime, on_epoch=on_epoch)
    checkpoint_save(model, None, run_dir / CHECKPOINT_NAME)
    (run_dir / "epoch_records.json").write_text(json.dumps([asdict(r) for r in records], indent=1) + "\n")
    manifest = train_split.manifest
    write_manifest(run_dir, config, {"train_images_sha256": manifest.image_sha256,
                                     "train_labels_sha256": manifest.label_sha256,
                                     "train_count": manifest.count})
    return run_dir


def _load_models(runs, checkpoints):
    """(run_id, tag, model, manifest config or None) for each reference."""
    out = []
    for run in runs or ():
        run = Path(run)
        ckpt = run / CHECKPOINT_NAME
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
        manifest = parse_config(run / MANIFEST_NAME, env={})
        out.append((manifest.run_id, manifest.model_tag, checkpoint_load(ckpt), manifest))
    for path in checkpoints or ():
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} does not exist")
        out.append((path.stem, path.stem, checkpoint_load(path), None))
    if not out:
        raise ConfigError("no --run or --checkpoint given")
    return out


def _test_split(config):
    _require_data_dir(config)
    return load_split(config.data_dir, "test", config.test_subset)


def parse_attacks(spec: str, epsilon: float) -> list[AttackConfig | None]:
    attacks = []
    for name in (s.strip() for s in spec.split(",") if s.strip()):
        if name == "clean":
            attacks.append(None)
        elif name == "fgsm":
            attacks.append(AttackConfig.fgsm(epsilon))
        elif name.startswith("bim") and name[3:].isdigit():
            attacks.append(AttackConfig.bim(epsilon, int(name[3:])))
        else:
            raise ConfigError(f"unknown attack {name!r} (use clean, fgsm or bimN)", key="attacks")
    return attacks


def _eval_row(run_id, point: E.EvalPoint, key, seconds):
    return MetricsRow(run_id, "eval", key, point.attack, "accuracy", point.accuracy, seconds)


def cmd_evaluate(config: RunConfig, runs=(), checkpoints=(), attacks="clean,fgsm,bim10,bim30") -> Path:
    split = _test_split(config)
    rows = []
    for run_id, tag, model, _ in _load_models(runs, checkpoints):
        for attack in parse_attacks(attacks, config.epsilon):
            start = time.perf_counter()
            point = E.accuracy(model, split, attack, tag)
            rows.append(_eval_row(run_id, point, point.iteration, time.perf_counter() - start))
            log.info("%s %s: %.4f", tag, point.attack, point.accuracy)
    out = Path(config.output_dir) / EVALS_CSV
    append_rows(out, rows)
    return out


def cmd_sweep(config: RunConfig, runs=(), checkpoints=(), n_list=tuple(range(1, 11))) -> Path:
    split = _test_split(config)
    rows = []
    for run_id, tag, model, _ in _load_models(runs, checkpoints):
        for n in n_list:
            start = time.perf_counter()
            point = E.accuracy(model, split, AttackConfig.bim(config.epsilon, n), tag)
            rows.append(_eval_row(run_id, point, n, time.perf_counter() - start))
            log.info("%s N=%d: %.4f", tag, n, point.accuracy)
    out = Path(config.output_dir) / SWEEP_CSV
    append_rows(out, rows)
    return out


def cmd_intermediate_curve(config: RunConfig, runs=(), checkpoints=(), iterations=10) -> Path:
    split = _test_split(config)
    rows = []
    for run_id, tag, model, _ in _load_models(runs, checkpoints):
        start = time.perf_counter()
        points = E.intermediate_curve(model, split, config.epsilon, iterations, tag)
        seconds = time.perf_counter() - start
        rows.extend(_eval_row(run_id, p, p.iteration, seconds) for p in points)
    out = Path(config.output_dir) / CURVE_CSV
    append_rows(out, rows)
    return out


REPORT_KEYS = {"clean": 0, "fgsm": 1, "bim10": 10, "bim30": 30}


def cmd_report(config: RunConfig, runs=()) -> Path:
    """Render the summary table from evals.csv and each run's epochs.csv."""
    if not runs:
        raise ConfigError("report needs at least one --run")
    evals = read_rows(Path(config.output_dir) / EVALS_CSV)
    registry, order = {}, []
    for run in runs:
        run = Path(run)
        manifest_path = run / MANIFEST_NAME
        if not manifest_path.exists():
            raise FileNotFoundError(f"run manifest {manifest_path} does not exist")
        manifest = parse_config(manifest_path, env={})
        entry = E.RunEntry()
        for row in evals:
            if row.run_id != manifest.run_id:
                continue
            for column, key in REPORT_KEYS.items():
                if row.key == key and (key != 1 or row.attack.startswith("fgsm")):
                    entry.evals[column] = row.value
        entry.epoch_seconds = [r.wall_seconds for r in read_rows(run / EPOCHS_CSV)]
        tag = manifest.model_tag if manifest.model_tag not in registry else manifest.run_id
        registry[tag] = entry
        order.append(tag)
    table = E.build_report(registry, order)
    out = Path(config.output_dir) / REPORT_TXT
    out.write_text(table.render())
    return out


def _build_parser():
    parser = argparse.ArgumentParser(prog="advtrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        group = p.add_argument_group("config keys (override the file and ATNN_* variables)")
        for key in SCHEMA:
            group.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="VALUE")
        p.add_argument("-v", "--verbose", action="store_true")

    def refs(p):
        p.add_argument("--run", action="append", default=[], help="run directory (repeatable)")
        p.add_argument("--checkpoint", action="append", default=[], help="checkpoint file (repeatable)")

    common(sub.add_parser("train", help="train one regime"))
    p = sub.add_parser("evaluate", help="clean / FGSM / BIM accuracy of trained models")
    common(p)
    refs(p)
    p.add_argument("--attacks", default="clean,fgsm,bim10,bim30")
    p = sub.add_parser("sweep", help="accuracy against BIM(N) for a list of N")
    common(p)
    refs(p)
    p.add_argument("--n-list", default="1,2,3,4,5,6,7,8,9,10")
    p = sub.add_parser("intermediate-curve", help="accuracy after each BIM iteration")
    common(p)
    refs(p)
    p.add_argument("--curve-iterations", type=int, default=10)
    p = sub.add_parser("report", help="render the summary table")
    common(p)
    p.add_argument("--run", action="append", default=[])
    return parser


def resolve_config(args, base=None, required=()) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return parse_config(args.config, overrides=overrides, base=base, required=required)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            config = resolve_config(args, required=("regime",))
        else:
            # evaluation commands inherit the first run's settings (data_dir, epsilon, ...)
            base = None
            runs = getattr(args, "run", [])
            if runs and (Path(runs[0]) / MANIFEST_NAME).exists():
                base = parse_lines((Path(runs[0]) / MANIFEST_NAME).read_text())
                base.pop("output_dir", None)
            config = resolve_config(args, base=base)
        with output_lock(config.output_dir):
            if args.command == "train":
                out = cmd_train(config)
            elif args.command == "evaluate":
                out = cmd_evaluate(config, args.run, args.checkpoint, args.attacks)
            elif args.command == "sweep":
                n_list = [int(n) for n in args.n_list.split(",") if n.strip()]
                out = cmd_sweep(config, args.run, args.checkpoint, n_list)
            elif args.command == "intermediate-curve":
                out = cmd_intermediate_curve(config, args.run, args.checkpoint, args.curve_iterations)
            else:
                out = cmd_report(config, args.run)
        log.info("wrote %s", out)
    except (AdvTrainError, OSError, ValueError) as exc:
        print(f"advtrain {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
