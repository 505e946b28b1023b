"""Command line entry point: ``hhvaem <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness, hmc
from .data import load_csv, read_split, read_typespec, split_indices, synth_mixed, write_csv, write_split
from .errors import HHVAEMError
from .saia import POLICIES, acquisition_loop

logger = logging.getLogger("hhvaem")

CHECKPOINT = "checkpoint"


def _common(p):
    p.add_argument("--config", metavar="PATH", help="flat 'key = value' config file with dotted keys")
    p.add_argument("--seed", type=int, help="overrides 'seed' in the config")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory (default: current directory)")
    p.add_argument("--variant", choices=sorted(harness.VARIANTS), help="model variant; overrides 'variant'")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _data_flags(p):
    p.add_argument("--data", metavar="CSV", help="data file; overrides 'data.train'")
    p.add_argument("--typespec", metavar="PATH", help="column types; overrides 'data.typespec'")


def build_parser():
    parser = argparse.ArgumentParser(prog="hhvaem", description="Hierarchical VAE with tuned HMC for incomplete mixed-type tables.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic dataset with a train/test split")
    _common(p)
    p.add_argument("--recipe", required=True, choices=("linear-gaussian", "mixed-logit", "informative-one"))
    p.add_argument("--n", type=int, default=2000, help="number of rows (default 2000)")
    p.add_argument("--d", type=int, help="number of features (recipe default when omitted)")

    p = sub.add_parser("train", help="run the three training stages and write a checkpoint")
    _common(p)
    _data_flags(p)

    for name, help_text in (
        ("eval", "imputation and prediction metrics on the test split"),
        ("impute", "fill missing feature cells of a CSV"),
        ("predict", "predict the target column of a CSV"),
        ("saia", "sequential feature acquisition curve on test rows"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        _data_flags(p)
        p.add_argument(
            "--checkpoint", action="append", metavar="PATH",
            help=f"checkpoint path without suffix (default: <out>/{CHECKPOINT}); eval accepts it repeatedly",
        )
        p.add_argument("--k", type=int, help="posterior samples per row; overrides 'eval.k'")
        if name == "saia":
            p.add_argument("--policy", choices=POLICIES, help="acquisition policy; overrides 'saia.policy'")
            p.add_argument("--rows", type=int, help="number of test rows; overrides 'saia.rows'")

    p = sub.add_parser("toy-hmc", help="tune HMC on a 2-D toy density and dump traces")
    _common(p)
    p.add_argument("--density", choices=hmc.TOY_NAMES, default="dual-moon")
    p.add_argument("--steps", type=int, default=500, help="tuning steps (default 500)")
    p.add_argument("--samples", type=int, default=2000, help="final samples to write (default 2000)")
    return parser


def resolve_config(args, base=None):
    """Config file (on top of ``base``) followed by ``--set`` and flag overrides."""
    base = base or harness.RunConfig()
    config = harness.load_config(args.config, base) if args.config else base
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise HHVAEMError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.variant:
        overrides["variant"] = args.variant
    for flag, key in (("data", "data.train"), ("typespec", "data.typespec")):
        if getattr(args, flag, None):
            overrides[key] = getattr(args, flag)
    return harness.config_from_mapping(overrides, config)


def load_split(config):
    """``(train, test)`` datasets according to the config."""
    if not config.data_train or not config.data_typespec:
        raise HHVAEMError("no data: set data.train and data.typespec (or pass --data/--typespec)")
    spec = read_typespec(config.data_typespec)
    full = load_csv(config.data_train, spec)
    if config.data_test:
        return full, load_csv(config.data_test, spec, labels=full.labels)
    if config.data_split:
        test_idx = read_split(config.data_split)
    else:
        _, test_idx = split_indices(full.n, config.data_test_fraction, config.data_split_seed)
    test_idx = np.asarray(test_idx, dtype=int)
    train_idx = np.setdiff1d(np.arange(full.n), test_idx)
    return full.subset(train_idx), full.subset(test_idx)


def _write_metrics(path, config, rows):
    with open(path, "w") as fh:
        for key, value in config.items():
            fh.write(f"# config {key} = {value}\n")
        fh.write("metric\tmean\tstd\tn\n")
        for name, values in rows.items():
            vals = [v for v in values if v is not None]
            if not vals:
                fh.write(f"{name}\tabsent\tabsent\t0\n")
                continue
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            fh.write(f"{name}\t{np.mean(vals):.10g}\t{std:.10g}\t{len(vals)}\n")


def cmd_synth(args, config, out):
    dataset, truth = synth_mixed(args.recipe, args.n, seed=config.seed, d=args.d)
    write_csv(dataset, out / "data.csv", out / "typespec.txt")
    _, test_idx = split_indices(dataset.n, config.data_test_fraction, config.seed)
    write_split(out / "split.txt", test_idx)
    with open(out / "truth.txt", "w") as fh:
        fh.write(f"recipe = {args.recipe}\nn = {args.n}\nseed = {config.seed}\n")
        for key, value in truth.items():
            flat = " ".join(repr(float(v)) for v in np.ravel(value))
            fh.write(f"{key} = {flat}\n")
    with open(out / "config.txt", "w") as fh:
        fh.write(f"data.train = {out / 'data.csv'}\ndata.typespec = {out / 'typespec.txt'}\ndata.split = {out / 'split.txt'}\n")
    print(f"wrote {dataset.n} rows to {out / 'data.csv'}")


def cmd_train(args, config, out):
    train, _ = load_split(config)
    log = harness.TrainingLog(out / "train.log")
    start = time.perf_counter()
    try:
        harness.run_train(config, train, log=log, checkpoint=out / CHECKPOINT)
    finally:
        log.close()
    (out / "config.txt").write_text(config.to_text())
    print(f"trained {config.variant} in {time.perf_counter() - start:.1f}s; checkpoint {out / CHECKPOINT}")


def _checkpoints(args, out):
    return [Path(p) for p in args.checkpoint] if args.checkpoint else [out / CHECKPOINT]


def _model_config(args, tm):
    """Checkpoint config with command-line overrides applied on top."""
    return resolve_config(args, tm.config)


def cmd_eval(args, config, out):
    rows = {}
    resolved = config
    for path in _checkpoints(args, out):
        tm = harness.TrainedModel.load(path)
        resolved = _model_config(args, tm)
        _, test = load_split(resolved)
        observed = harness.test_protocol(test, resolved)
        report = harness.eval_metrics(tm, test, observed, k=args.k or resolved.eval_k, seed=resolved.seed)
        for key, value in report.items():
            if key in ("n_rows", "k", "jensen_ok"):
                continue
            rows.setdefault(key, []).append(value)
        rows.setdefault("train_wallclock_seconds", []).append(_train_seconds(path))
    _write_metrics(out / "metrics.txt", resolved, rows)
    print(f"wrote {out / 'metrics.txt'}")


def _train_seconds(path):
    log = Path(path).parent / "train.log"
    if not log.exists():
        return None
    last = None
    for line in log.read_text().splitlines():
        parts = line.split("\t")
        if len(parts) == 3 and parts[1].endswith(".seconds"):
            last = float(parts[2])
    return last


def _input_rows(args, tm):
    resolved = _model_config(args, tm)
    if args.data:
        spec = read_typespec(resolved.data_typespec)
        return resolved, load_csv(args.data, spec, labels=tm.labels)
    _, test = load_split(resolved)
    return resolved, test


def cmd_impute(args, config, out):
    tm = harness.TrainedModel.load(_checkpoints(args, out)[0])
    resolved, data = _input_rows(args, tm)
    x = harness.impute(tm, data, k=args.k or 10, seed=resolved.seed)
    filled = data.with_masks(np.ones_like(data.x_mask), data.y_mask)
    filled.x = x
    write_csv(filled, out / "imputed.csv")
    print(f"wrote {out / 'imputed.csv'}")


def cmd_predict(args, config, out):
    tm = harness.TrainedModel.load(_checkpoints(args, out)[0])
    resolved, data = _input_rows(args, tm)
    y = harness.predict(tm, data, k=args.k or 10, seed=resolved.seed)
    labels = tm.labels.get(tm.target_name)
    with open(out / "predictions.csv", "w") as fh:
        fh.write(f"row,{tm.target_name}\n")
        for i, v in enumerate(y):
            text = labels[int(v)] if labels and tm.target_type.kind != "real" else repr(float(v))
            fh.write(f"{i},{text}\n")
    print(f"wrote {out / 'predictions.csv'}")


def cmd_saia(args, config, out):
    tm = harness.TrainedModel.load(_checkpoints(args, out)[0])
    resolved, data = _input_rows(args, tm)
    policy = args.policy or resolved.saia_policy
    n_rows = min(args.rows or resolved.saia_rows, data.n)
    rows = np.random.default_rng([resolved.seed, 8]).choice(data.n, n_rows, replace=False)
    result = acquisition_loop(
        tm, data.subset(np.sort(rows)), policy=policy, seed=resolved.seed, n_samples=resolved.saia_samples,
        bins=resolved.saia_bins, k=args.k or 50,
    )
    path = out / f"saia_{policy}.csv"
    result.write_csv(path)
    print(f"wrote {path}")


def cmd_toy(args, config, out):
    density = hmc.make_toy_density(args.density)
    with open(out / "toy_trace.tsv", "w") as fh:
        fh.write("step\tobjective\tsksd\t" + "\t".join(f"inflation_{i}" for i in range(density.dim)) + "\n")

        def record(rec):
            values = [rec["objective"], rec["sksd"], *rec["inflation"]]
            fh.write(f"{rec['step']}\t" + "\t".join(f"{v:.10g}" for v in values) + "\n")

        tuned, _ = hmc.tune_toy(density, steps=args.steps, seed=config.seed, callback=record, **hmc.TOY_TUNING)
    samples, _ = hmc.toy_samples(density, tuned, hmc.TOY_TUNING["mean"], hmc.TOY_TUNING["std"], args.samples, seed=config.seed)
    np.savetxt(out / "toy_samples.tsv", samples, delimiter="\t", header="z1\tz2", comments="")
    print(f"wrote {out / 'toy_trace.tsv'} and {out / 'toy_samples.tsv'}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "impute": cmd_impute,
    "predict": cmd_predict,
    "saia": cmd_saia,
    "toy-hmc": cmd_toy,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, config, out)
    except (HHVAEMError, OSError, ValueError) as exc:
        print(f"hhvaem {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
