"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; results go to stdout or the named files.
"""

import argparse
import logging
import os
import sys

from . import analysis, data, nn, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _config(args):
    overrides = {"seed": args.seed}
    if args.config:
        return train.load_config(args.config, **overrides)
    return train.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def _synth_datasets(cfg):
    spec = data.SynthSpec(class_count=cfg.classes, val_fraction=cfg.val_fraction)
    return data.generate(spec)


def _datasets(cfg):
    """(train, val, test) from the config paths, or the default synthetic set."""
    if cfg.train_path:
        tr, val = train.prepare_datasets(cfg)
        test = data.read_dataset(cfg.test_path, "test") if cfg.test_path else None
        return tr, val, test
    return _synth_datasets(cfg)


def _load_model(path):
    model, _, _ = train.model_from_arrays(train.load_checkpoint(path))
    return model


def cmd_gen_data(args):
    cfg = _config(args)
    spec = data.SynthSpec(class_count=cfg.classes, seed=cfg.seed)
    tr, test = data.generate_full(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    for name, ds in (("train.sefd", tr), ("test.sefd", test)):
        path = os.path.join(args.out_dir, name)
        data.write_dataset(ds, path)
        print(f"{path}\t{len(ds)} images")


def cmd_train(args):
    cfg = _config(args)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    tr, val, test = _datasets(cfg)
    model = nn.SefModel.build(tr.class_count, cfg.channels, cfg.groups, seed=cfg.seed)

    def progress(rec):
        groups = " ".join(f"{a:.3f}" for a in rec.group_val_accuracy)
        print(f"epoch {rec.epoch} lr={rec.lr:g} total={rec.losses.get('total', float('nan')):.4f} "
              f"val={rec.val_accuracy:.4f} groups=[{groups}]", file=sys.stderr)

    result = train.train(model, tr, val, cfg, progress=progress)
    if args.out:
        train.save_checkpoint(args.out, model, result.velocities, cfg.epochs)
    if args.history:
        analysis.write_rows_csv(analysis.history_rows(result.history), args.history)
    if test is not None:
        print(f"test_accuracy\t{train.evaluate(model, test):.6f}")


def cmd_eval(args):
    model = _load_model(args.checkpoint)
    ds = data.read_dataset(args.dataset, "test")
    print(f"{train.evaluate(model, ds):.6f}")


def cmd_gradcheck(args):
    report = analysis.tiny_objective_gradcheck(seed=args.seed or 0)
    print(report.summary())
    if not report.passed:
        raise RuntimeError(f"gradient check failed: max relative error {report.max_error:.3e}")


def cmd_correlations(args):
    model = _load_model(args.checkpoint)
    ds = data.read_dataset(args.dataset, "test")
    corr, _ = analysis.export_correlation(model, ds, args.samples, args.csv, args.pgm,
                                          seed=args.seed or 0)
    print(f"block_gap\t{analysis.block_gap(corr, model.partition):.6f}")


def cmd_activations(args):
    model = _load_model(args.checkpoint)
    ds = data.read_dataset(args.dataset, "test")
    paths = analysis.export_activation_maps(model, ds.images[:args.count], args.out_dir)
    print("\n".join(paths))


def cmd_score(args):
    table = (analysis.MethodTable.from_csv(args.table) if args.table
             else analysis.bundled_table1())
    result = analysis.score_table(table)
    for i, m in enumerate(result.methods):
        print(f"{m}\t{result.display(i)}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(result.to_csv())


def cmd_ablate(args):
    cfg = _config(args)
    tr, val, test = _datasets(cfg)
    if test is None:
        raise RuntimeError("ablation needs a test split (set test_path in the config)")
    rows = analysis.run_ablation(
        cfg, tr, val, test, args.out,
        progress=lambda r: print(f"{r['config']}\t{r['test_accuracy']:.4f}", file=sys.stderr))
    for r in rows:
        print(f"{r['config']}\t{r['lambda']:g}\t{r['gamma']:g}\t{r['phi']:g}\t{r['test_accuracy']:.6f}")


def cmd_params(args):
    partition = nn.GroupPartition.equal(args.channels, args.groups)
    print(nn.count_extra_params(args.channels, args.classes, partition))


def build_parser():
    p = _Parser(prog="sef", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text, config=True):
        sp = sub.add_parser(name, help=help_text)
        if config:
            sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, "write synthetic train/test SEFD files")
    sp.add_argument("out_dir")

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--out", help="checkpoint path for the final model")
    sp.add_argument("--history", help="per-epoch CSV of losses and accuracies")
    sp.add_argument("--epochs", type=int)

    sp = add("eval", cmd_eval, "global-head accuracy of a checkpoint", config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("dataset")

    add("gradcheck", cmd_gradcheck, "finite-difference check of the objective", config=False)

    sp = add("correlations", cmd_correlations, "channel correlation heatmap", config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("dataset")
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--csv")
    sp.add_argument("--pgm")

    sp = add("activations", cmd_activations, "group activation maps", config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("dataset")
    sp.add_argument("out_dir")
    sp.add_argument("--count", type=int, default=4)

    sp = add("score", cmd_score, "dense-rank scores of a method table", config=False)
    sp.add_argument("table", nargs="?", help="CSV (default: bundled comparison table)")
    sp.add_argument("--out", help="write method,score,ranks CSV")

    sp = add("ablate", cmd_ablate, "train the five loss-weight configurations")
    sp.add_argument("--out", help="CSV path")

    sp = add("params", cmd_params, "extra parameters added by the group heads", config=False)
    sp.add_argument("--channels", type=int, required=True)
    sp.add_argument("--classes", type=int, required=True)
    sp.add_argument("--groups", type=int, required=True)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"sef {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
