"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, TrainConfig, load_config_file
from .envs import EnvError, make_env
from .trainer import VARIANTS, NumericError, ablation_curves, evaluate, read_metrics, run_ablation, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _base_config(args) -> TrainConfig:
    values = dict(PRESETS[args.preset])
    if args.config:
        values.update(load_config_file(args.config))
    values["env"] = args.env
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        values["total_env_steps"] = args.steps
    cfg = TrainConfig.from_dict(values)
    make_env(cfg.env)  # reject unknown environment names before any work
    return cfg


def cmd_train(args) -> int:
    cfg = _base_config(args)
    if args.no_exploration:
        cfg = cfg.replace(exploration=False)
    if args.no_modifications:
        cfg = cfg.replace(modifications=False)
    trainer = train(cfg, args.out)
    last = trainer.history[-1]
    print(json.dumps({"step": last["step"], "mean_return": last["mean_return"],
                      "distinct_state_bins": last["distinct_state_bins"], "out": str(args.out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    rep = evaluate(args.ckpt, args.env, episodes=args.episodes, seed=args.seed)
    print(json.dumps({"mean_return": rep.mean, "ci95_low": rep.ci95_low, "ci95_high": rep.ci95_high,
                      "distinct_state_bins": rep.distinct_state_bins, "returns": rep.returns}))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .verify import COMPONENTS, grad_check

    names = COMPONENTS if args.component == "all" else (args.component,)
    worst = 0.0
    for name in names:
        rep = grad_check(name, seed=args.seed)
        worst = max(worst, rep.max_rel_error)
        print(f"{name}\tmax_rel_error={rep.max_rel_error:.3e}\tparams={rep.n_params}")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


def cmd_oracle_check(args) -> int:
    from .verify import oracle_check

    rep = oracle_check(args.gamma, args.chain, seed=args.seed, steps=args.train_steps)
    print("oracle  " + " ".join(f"{x:.4f}" for x in rep.oracle))
    print("mdn     " + " ".join(f"{x:.4f}" for x in rep.estimate))
    print(f"tv={rep.tv:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .plotting import plot_curves, write_curve_csv

    base = _base_config(args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_ablation(base, variants, tuple(range(args.seeds)), out)
    steps, table = ablation_curves(results)
    csv_path = write_curve_csv(out / "ablation.csv", steps, table)
    png_path = plot_curves(out / "ablation.png", steps, table, title=base.env)
    for name, runs in results.items():
        firsts = [r.first_success_step() for r in runs]
        bins = [r.final_bins() for r in runs]
        print(f"{name}\tfirst_success={firsts}\tfinal_bins={bins}")
    print(f"wrote {csv_path} {png_path}")
    return EXIT_OK


def cmd_export_csv(args) -> int:
    from .plotting import export_metrics

    src = Path(args.metrics)
    if src.is_dir():
        src = src / "metrics.jsonl"
    records = read_metrics(src)
    if not records:
        raise ConfigError(f"no records in {src}")
    csv_path = Path(args.out) if args.out else src.with_suffix(".csv")
    png_path = None if args.no_plot else csv_path.with_suffix(".png")
    for p in export_metrics(records, csv_path, png_path):
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maxent-dreamer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, steps=True):
        sp.add_argument("--env", required=True)
        sp.add_argument("--config", help="flat key = value file applied on top of the preset")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        if steps:
            sp.add_argument("--steps", type=int)

    sp = sub.add_parser("train", help="train one agent")
    add_common(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-exploration", action="store_true")
    sp.add_argument("--no-modifications", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--env")
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grad-check", help="compare autograd with finite differences")
    sp.add_argument("--component", default="all")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("oracle-check", help="compare the MDN occupancy with the exact chain occupancy")
    sp.add_argument("--gamma", type=float, default=0.9)
    sp.add_argument("--chain", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--train-steps", type=int, default=1500)
    sp.set_defaults(func=cmd_oracle_check)

    sp = sub.add_parser("ablate", help="train ablation variants over shared seeds")
    add_common(sp)
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--variants", help="comma list from " + ",".join(VARIANTS))
    sp.add_argument("--out", default="ablation")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export-csv", help="convert a metrics log to CSV plus a PNG curve")
    sp.add_argument("metrics", help="metrics.jsonl or a run directory")
    sp.add_argument("--out")
    sp.add_argument("--no-plot", action="store_true")
    sp.set_defaults(func=cmd_export_csv)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, EnvError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
