"""Command-line entry point: ``caster {train,eval,ablate,plot}``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
abort during training, 4 report written but non-conforming (fewer than three
seeds behind some aggregate).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from caster.config import load_config, parse_overrides
from caster.tasks import ConfigError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NONCONFORMING = 0, 1, 2, 3, 4

logger = logging.getLogger("caster")


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return parse_overrides(out)


def _config(args):
    config = load_config(args.config)
    return config.replace(**_overrides(args.set)) if args.set else config


def _render(paths, enabled: bool) -> None:
    if not enabled:
        return
    from caster.plotting import render_csv

    for path in paths:
        if Path(path).suffix == ".csv":
            render_csv(path)


def cmd_train(args) -> int:
    from caster.harness.runs import train_run
    from caster.io import new_run_dir

    config = _config(args)
    run_dir = new_run_dir("train", f"{config.encoder}-{config.explorer}-seed{config.seed}", args.runs_dir)
    print(f"run directory: {run_dir}")
    train_run(config, run_dir, plots=not args.no_plots)
    print((run_dir / "report.csv").read_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    from caster.harness.reports import REPORTS
    from caster.io import load_checkpoint, new_run_dir

    checkpoints = [load_checkpoint(p) for p in args.checkpoints]
    kwargs = {"eval_seed": args.eval_seed}
    if args.mode == "efficiency":
        kwargs["k_max"] = args.k_max
    elif args.mode == "overfit":
        kwargs["episodes"] = 2 if args.episodes is None else args.episodes
    else:
        kwargs.update(episodes=3 if args.episodes is None else args.episodes, bins=args.bins)
    report = REPORTS[args.mode](checkpoints, **kwargs)
    report.metadata["checkpoints"] = [str(p) for p in args.checkpoints]
    run_dir = new_run_dir("eval", args.mode, args.runs_dir)
    (run_dir / "config-resolved").write_text(checkpoints[0].config.to_text())
    paths = report.write(run_dir)
    _render(paths, not args.no_plots)
    print(f"run directory: {run_dir}")
    print((run_dir / "report.csv").read_text(), end="")
    return _conformity(report)


def cmd_ablate(args) -> int:
    from caster.harness.ablation import parse_grid, run_ablation_grid, write_per_task
    from caster.io import new_run_dir

    config = _config(args)
    cells = parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")]
    run_dir = Path(args.output) if args.output else new_run_dir("ablate", "", args.runs_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config-resolved").write_text(config.to_text())
    print(f"run directory: {run_dir}")
    report, results = run_ablation_grid(config, cells, seeds, run_dir, k_max=args.k_max, eval_seed=args.eval_seed,
                                        reuse=not args.no_reuse, plots=not args.no_plots)
    paths = report.write(run_dir)
    write_per_task(results, run_dir / "report_per_task.csv")
    _render(paths[:1], not args.no_plots)
    print((run_dir / "report.csv").read_text(), end="")
    return _conformity(report)


def cmd_plot(args) -> int:
    from caster.plotting import render_csv

    for path in args.csv:
        print(render_csv(path))
    return EXIT_OK


def _conformity(report) -> int:
    if report.conforming:
        return EXIT_OK
    print(f"warning: report is non-conforming ({report.n_seeds} seed(s) behind some aggregate; 3 required)",
          file=sys.stderr)
    return EXIT_NONCONFORMING


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caster", description="Meta-RL with latent-graph task inference.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--runs-dir", help="output root (default: $CASTER_RUNS_DIR or ./runs)")
        p.add_argument("--no-plots", action="store_true", help="skip PNG rendering")

    p = sub.add_parser("train", help="meta-train one seed from a config file")
    p.add_argument("config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints (one per seed) on held-out tasks")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--mode", choices=["efficiency", "overfit", "histogram"], default="efficiency")
    p.add_argument("--k-max", type=int, default=10, help="largest adaptation budget (efficiency)")
    p.add_argument("--episodes", type=int,
                   help="context episodes (overfit, default 2) or explorer episodes (histogram, default 3)")
    p.add_argument("--bins", type=int, default=10, help="histogram bins")
    p.add_argument("--eval-seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a grid of config overrides over seeds")
    p.add_argument("config")
    p.add_argument("--grid", required=True, help="e.g. 'encoder=gp,ws,gnn;explorer=none + encoder=gnn;explorer=rs'")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--k-max", type=int, default=2)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--output", help="use this directory instead of a fresh timestamped one (enables reuse)")
    p.add_argument("--no-reuse", action="store_true", help="retrain cells even if a matching checkpoint exists")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render CSV reports to PNG next to them")
    p.add_argument("csv", nargs="+")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    from caster.io import CheckpointError
    from caster.numerics import NumericError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
