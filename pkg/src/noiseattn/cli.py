"""Command-line entry points.

Subcommands: synth, inject, train, recurse, eval, export-q. Every run is
driven by a line-based config file; --seed and --out override the config.
Exit code 0 on success, 2 for configuration/data/format problems, 1 for
runtime failures; diagnostics carry the failing pipeline stage.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import build_config, parse_config_text
from .data import load_dataset, save_dataset
from .errors import ConfigError, DataError, FormatError, NoiseAttnError, StageError
from .harness import (MetricsLog, _noise_specs, evaluate, export_q, load_snapshot,
                      resolve_data, resume_recursion, run_experiment, _write_flips)
from .multihead import evaluate_all_metric
from .data import inject_noise, inject_noise_multi


def _load_config(args):
    if not args.config:
        raise ConfigError("this command needs --config")
    try:
        text = Path(args.config).read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"no such config file: {args.config}") from exc
    entries = parse_config_text(text)
    if args.seed is not None:
        entries["seed"] = str(args.seed)
    if args.out is not None:
        entries["out"] = args.out
    return build_config(entries)


def _cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    saved_noise_mode = cfg.noise.mode
    cfg.noise.mode = "none"  # synth writes clean data; inject adds noise
    train, test, _ = resolve_data(cfg, out)
    cfg.noise.mode = saved_noise_mode
    print(f"wrote {out / 'train.nld'} ({train.n} samples) and "
          f"{out / 'test.nld'} ({test.n} samples)")
    return 0


def _cmd_inject(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = args.data or cfg.data.train_path
    if not source:
        raise ConfigError("inject needs --data or data.train_path")
    dataset = load_dataset(source)
    if cfg.noise.mode == "none":
        raise ConfigError("noise.mode is none; nothing to inject")
    if dataset.k:
        if cfg.attributes is None:
            raise ConfigError("multi-attribute dataset needs an attributes config")
        specs = _noise_specs(cfg, dataset.k)
        noisy, flips = inject_noise_multi(dataset, specs, cfg.attributes.class_counts)
    else:
        (spec,) = _noise_specs(cfg, 0)
        noisy, flips = inject_noise(dataset, spec)
    save_dataset(noisy, out / "noisy_train.nld")
    _write_flips(out / "flips.csv", flips)
    n_flipped = sum(len(f) for f in flips) if isinstance(flips, list) else len(flips)
    print(f"wrote {out / 'noisy_train.nld'} ({n_flipped} flipped labels)")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    report = run_experiment(cfg)
    final = report.test_errors.get("final")
    print(f"run complete: artifacts in {report.out_dir}")
    if final is not None:
        print(f"final test error: {final}")
    return 0


def _cmd_recurse(args) -> int:
    cfg = _load_config(args)
    report = resume_recursion(cfg, args.snapshot, args.out)
    print(f"recursion complete: artifacts in {report.out_dir}")
    final = report.test_errors.get("final")
    if final is not None:
        print(f"final test error: {final}")
    return 0


def _cmd_eval(args) -> int:
    snap = load_snapshot(args.snapshot)
    dataset = load_dataset(args.data)
    if dataset.true_labels is None:
        raise DataError("evaluation needs a dataset with true labels")
    if snap["kind"] == "single":
        err = evaluate(snap["net"], dataset.features, dataset.true_labels)
        print(f"test error: {err}")
    else:
        per_attr, all_err = evaluate_all_metric(snap["net"], dataset.features,
                                                dataset.true_labels)
        for name, err in zip(snap["attributes"].names, per_attr):
            print(f"test error [{name}]: {err}")
        print(f"test error [ALL]: {all_err}")
    return 0


def _cmd_export_q(args) -> int:
    snap = load_snapshot(args.snapshot)
    out = Path(args.out or ".")
    if snap["kind"] == "single":
        paths = export_q(snap["models"][0], out)
    else:
        paths = []
        for name, model in zip(snap["attributes"].names, snap["models"]):
            paths.extend(export_q(model, out, prefix=f"q_{name}_"))
    for csv_path, pgm_path in paths:
        print(f"wrote {csv_path} and {pgm_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="noiseattn",
        description="Train classifiers robustly on noisy labels with "
                    "per-sample noise units and recursive self-distillation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, needs_snapshot=False, needs_data=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        if needs_snapshot:
            p.add_argument("--snapshot", required=True, help="model snapshot (.nam)")
        if needs_data:
            p.add_argument("--data", help="dataset path (.nld)")
        p.set_defaults(fn=fn)
        return p

    add("synth", _cmd_synth, "generate synthetic datasets")
    add("inject", _cmd_inject, "inject label noise into a dataset", needs_data=True)
    add("train", _cmd_train, "run the full configured pipeline")
    add("recurse", _cmd_recurse, "resume recursion from a stage-0 snapshot",
        needs_snapshot=True)
    eval_p = add("eval", _cmd_eval, "evaluate a snapshot on a test set",
                 needs_snapshot=True, needs_data=True)
    eval_p.set_defaults(fn=_cmd_eval)
    add("export-q", _cmd_export_q, "export learned units as CSV + PGM",
        needs_snapshot=True)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, (ConfigError, DataError, FormatError)) else 1
    except (ConfigError, DataError, FormatError) as exc:
        print(f"error [config] {exc}", file=sys.stderr)
        return 2
    except NoiseAttnError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
