"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 non-finite
abort during training, 5 checkpoint or schema mismatch, 6 gradient check
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, format_config, help_text, load_config
from .errors import BadGrid, BadProtocol, ConfigError, NonFinite, ParseError, SchemaMismatch

EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_CKPT, EXIT_GRADCHECK = 2, 3, 4, 5, 6
CKPT_NAME, METRICS_NAME, CONFIG_NAME = "model.ckpt", "metrics.csv", "config.txt"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _read_data(root, split: str):
    from .dataset import read_split

    try:
        return read_split(root, split)
    except (OSError, ParseError) as exc:
        raise CliError(EXIT_IO, f"cannot read {split} data from {root}: {exc}") from None


def cmd_gen_data(args) -> int:
    from .dataset import generate, write_split

    run = _config(args.config)
    train, test = generate(run.data)
    try:
        write_split(train, args.out, "train")
        write_split(test, args.out, "test")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {len(train)} train and {len(test)} test clouds ({len(run.data.classes)} classes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .diffcore import save_params
    from .trainer import fit, format_metrics, write_text

    run = _config(args.config)
    cfg = run.train
    if args.no_distill:
        cfg.mode = "no_distill"
    elif args.naive_align:
        cfg.mode = "naive_align"
    if args.augment:
        cfg.augment = True
    train = _read_data(args.data, "train")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from None
    result = fit(train, None, cfg)
    try:
        save_params(result.net.state_dict(), out / CKPT_NAME)
        write_text(out / METRICS_NAME, format_metrics(result.metrics))
        write_text(out / CONFIG_NAME, format_config(run))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write outputs to {out}: {exc}") from None
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"trained {cfg.epochs} epochs ({cfg.mode}); final loss {last.loss_total:.6g}, "
              f"student train accuracy {last.acc_student:.4f}")
    print(f"checkpoint: {out / CKPT_NAME}")
    return 0


def _load_model(ckpt, config_path):
    """Rebuild the network from the config stored next to the checkpoint."""
    from .diffcore import load_params
    from .geomcore import make_rng
    from .model import DistillNet

    ckpt = Path(ckpt)
    cfg_path = Path(config_path) if config_path else ckpt.parent / CONFIG_NAME
    run = load_config(cfg_path)
    try:
        state = load_params(ckpt)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {ckpt}: {exc}") from None
    except ParseError as exc:
        raise CliError(EXIT_CKPT, f"malformed checkpoint: {exc}") from None
    net = DistillNet(run.train.encoder, len(run.data.classes), make_rng(run.train.seed, 0))
    net.load_state_dict(state)
    return net, run


def cmd_eval(args) -> int:
    from .dataset import corrupted_view
    from .trainer import evaluate_voting, write_text

    net, run = _load_model(args.ckpt, args.config)
    test = _read_data(args.data, "test")
    if test.n_classes != net.n_classes:
        raise CliError(EXIT_CKPT, f"data has {test.n_classes} classes, checkpoint {net.n_classes}")
    view = corrupted_view(test, "rotation", args.rotate, args.seed) if args.rotate else test
    res = evaluate_voting(net, view, run.train, args.seed)
    names = test.class_names or tuple(str(i) for i in range(net.n_classes))
    counts = test.labels()
    rows = ["class,name,count,accuracy"]
    for c, acc in enumerate(res.per_class):
        rows.append(f"{c},{names[c]},{int((counts == c).sum())},{acc:.9g}")
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_rot{args.rotate:g}_seed{args.seed}.csv"
    try:
        write_text(out, "\n".join(rows) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from None
    print(f"accuracy {res.accuracy:.6f} (rotation up to {args.rotate:g} deg, seed {args.seed}, "
          f"{run.train.vote_count} votes)")
    print(f"per-class accuracy: {out}")
    return 0


def cmd_sweep(args) -> int:
    from .trainer import format_sweep, perturbation_sweep, write_text

    net, run = _load_model(args.ckpt, args.config)
    test = _read_data(args.data, "test")
    grid = None
    if args.grid:
        try:
            grid = [float(g) for g in args.grid.split(",")]
        except ValueError:
            raise CliError(EXIT_CONFIG, f"bad grid {args.grid!r}") from None
    rows = perturbation_sweep(net, test, args.protocol, grid, run.train, args.seed)
    try:
        write_text(args.out, format_sweep(rows))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    for r in rows:
        print(f"{r.protocol} {r.level:g}: {r.accuracy:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_end_to_end, run_primitive_suite

    reports = run_primitive_suite(seed=args.seed)
    if args.full:
        reports["end_to_end"] = run_end_to_end(seed=args.seed, max_elems=args.max_elems or None)
    width = max(len(k) for k in reports)
    for name, rep in reports.items():
        print(f"{name.ljust(width)}  max rel error {rep.max_rel_error:.3e}  {'ok' if rep.passed else 'FAIL'}")
    failed = [k for k, r in reports.items() if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return 0


class _HelpFormatter(argparse.RawDescriptionHelpFormatter):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manifold-kd", description="Rotation-robust point-cloud distillation.",
                                epilog=help_text(), formatter_class=_HelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, helptext):
        sp = sub.add_parser(name, help=helptext, description=helptext, epilog=help_text(),
                            formatter_class=_HelpFormatter)
        sp.set_defaults(func=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "generate the synthetic shape dataset")
    g.add_argument("--config", help="config file (defaults when omitted)")
    g.add_argument("--out", required=True, help="output directory")

    t = add("train", cmd_train, "train a model and write checkpoint, metrics and config")
    t.add_argument("--config", help="config file (defaults when omitted)")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="output directory")
    arm = t.add_mutually_exclusive_group()
    arm.add_argument("--no-distill", action="store_true", help="student only, cross-entropy")
    arm.add_argument("--naive-align", action="store_true", help="direct feature L2 alignment")
    t.add_argument("--augment", action="store_true", help="random rotations of training clouds")

    e = add("eval", cmd_eval, "voting accuracy of the student on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--rotate", type=float, default=0.0, help="max random rotation angle in degrees")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config", help="config (default: config.txt next to the checkpoint)")
    e.add_argument("--out", help="per-class CSV path")

    s = add("sweep", cmd_sweep, "accuracy across corruption levels")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--protocol", required=True, help="rotation | noise | outlier")
    s.add_argument("--out", required=True, help="sweep CSV path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", help="comma separated levels (default grid per protocol)")
    s.add_argument("--config", help="config (default: config.txt next to the checkpoint)")

    gc = add("gradcheck", cmd_gradcheck, "finite-difference check of every primitive")
    gc.add_argument("--full", action="store_true", help="also check the end-to-end tiny-config loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--max-elems", type=int, default=12, help="coordinates probed per tensor (0 = all)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, BadProtocol, BadGrid) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFinite as exc:
        print(f"aborted, non-finite values: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except SchemaMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
