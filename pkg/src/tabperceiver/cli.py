"""Command-line entry point: ``tabperceiver <command> [options]``."""
import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import harness
from .data import SyntheticConfig
from .errors import TabPerceiverError


def _experiment(args):
    path = args.config or harness.bundled_config("default")
    exp = harness.load_experiment(path)
    if getattr(args, "variant", None):
        exp = replace(exp, variant=args.variant, tasks=None)
    if getattr(args, "seed", None) is not None:
        exp = replace(exp, seeds=[args.seed])
    return exp


def _print_epoch(rec):
    print(f"epoch {rec['epoch']:3d}  loss {rec['train_loss']:.4f}  val AUC {rec['val_auc']:.4f}",
          file=sys.stderr)


def cmd_generate(args):
    exp = harness.load_experiment(args.config or harness.bundled_config("default"))
    syn = dict(exp.data.get("synthetic", {}))
    if args.n_rows is not None:
        syn["n_rows"] = args.n_rows
    seed = args.seed if args.seed is not None else int(exp.data.get("seed", 0))
    path = harness.cmd_generate(SyntheticConfig(**syn), seed, args.out, args.name)
    print(path)


def cmd_train(args):
    exp = _experiment(args)
    report = harness.cmd_train(exp, args.out, args.data, log=_print_epoch if args.verbose else None)
    print(report.to_text(), end="")


def cmd_tune(args):
    exp = _experiment(args)
    best, trials = harness.cmd_tune(exp, args.budget, args.out, data_path=args.data,
                                    log=lambda r: print(f"trial {r['trial']}: val AUC {r['val_auc']:.4f}",
                                                        file=sys.stderr))
    print(f"best validation AUC {max(t['val_auc'] for t in trials):.4f}; "
          f"config written to {Path(args.out) / 'best_config.yaml'}")


def cmd_ablate(args):
    exp = _experiment(args)
    groups = args.groups.split(",") if args.groups else None
    harness.cmd_ablate(exp, groups, args.out, args.data)
    print((Path(args.out) / "ablation.txt").read_text(encoding="utf-8"), end="")


def cmd_eval(args):
    report = harness.cmd_eval(args.checkpoint, args.data, args.split)
    if args.out:
        harness.write_report(report, args.out, "eval")
    print(report.to_text(), end="")


def cmd_compare(args):
    rows = harness.cmd_compare(harness.read_report(args.report_a), harness.read_report(args.report_b),
                               args.out)
    print(json.dumps([asdict(r) for r in rows], indent=2))


def cmd_predict(args):
    harness.cmd_predict(args.checkpoint, args.data, args.out)
    print(args.out)


def build_parser():
    p = argparse.ArgumentParser(prog="tabperceiver",
                                description="Latent-attention models for tabular risk prediction.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, variant=True):
        sp.add_argument("--config", help="experiment YAML (default: bundled default.yaml)")
        sp.add_argument("--seed", type=int, help="root seed; replaces the config's seed list")
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", help="cohort CSV (default: config's data section)")
        if variant:
            sp.add_argument("--variant", choices=sorted(harness.VARIANTS))

    g = sub.add_parser("generate", help="write a synthetic cohort CSV and ground truth")
    common(g, data=False, variant=False)
    g.add_argument("--n-rows", type=int)
    g.add_argument("--name", default="cohort")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and evaluate on the held-out split")
    common(t)
    t.add_argument("--verbose", action="store_true", help="log every epoch to stderr")
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("tune", help="random hyper-parameter search")
    common(u)
    u.add_argument("--budget", type=int, default=20)
    u.set_defaults(func=cmd_tune)

    a = sub.add_parser("ablate", help="retrain without each feature group")
    common(a)
    a.add_argument("--groups", help="comma-separated groups (default: all)")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="paired comparison of two multi-seed reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("predict", help="per-row probabilities from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True, help="output CSV path")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (TabPerceiverError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
