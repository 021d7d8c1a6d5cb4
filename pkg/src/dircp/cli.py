"""Command-line entry point: run, sweep, train, export-scene."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .comms import ScorerParams
from .config import ConfigError, RunConfig, effective_config_text, load_config, schema_help
from .evaluate import CONVENTIONS, run_method, sweep, train_sigma_scorers
from .fusion import attention_trace_csv
from .grid import GridSpec
from .learn import (
    DivergedTraining,
    load_scorer,
    make_train_scene,
    save_scorer,
    train_scorer,
    training_log_csv,
)
from .pipeline import prepare_scene, run_pipeline
from .report import (
    budget_curve_svg,
    per_seed_csv,
    run_report_json,
    sweep_csv,
    sweep_json,
    write_text,
)
from .scenario import PlacementExhausted, export_scene, generate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dircp",
        description="Direction-aware collaborative perception simulator.",
        epilog=schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="evaluate configured methods on each seed")
    run_p.add_argument("config", help="path to the run configuration file")
    run_p.add_argument("--output", help="override output.directory")
    run_p.add_argument("--scorer-checkpoint",
                       help="DCPW checkpoint for the MLP query scorer")

    sweep_p = sub.add_parser("sweep", help="budget x sigma x seed sweep")
    sweep_p.add_argument("config")
    sweep_p.add_argument("--budgets", help="comma-separated budget list")
    sweep_p.add_argument("--sigmas", help="comma-separated sigma list")
    sweep_p.add_argument("--seeds", type=int, help="number of evaluation seeds")
    sweep_p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    sweep_p.add_argument("--train-steps", type=int, default=200,
                         help="scorer training steps per sigma (mlp scorer)")
    sweep_p.add_argument("--train-lr", type=float, default=0.5,
                         help="scorer training learning rate (mlp scorer)")
    sweep_p.add_argument("--output", help="override output.directory")

    train_p = sub.add_parser("train", help="train the MLP query scorer")
    train_p.add_argument("config")
    train_p.add_argument("--steps", type=int, default=200)
    train_p.add_argument("--lr", type=float, default=0.5)
    train_p.add_argument("--batch", type=int, default=8,
                         help="number of training scenarios")
    train_p.add_argument("--output", help="override output.directory")

    export_p = sub.add_parser("export-scene", help="dump generated worlds as JSON")
    export_p.add_argument("config")
    export_p.add_argument("--output", help="override output.directory")
    return parser


def _parse_float_list(text: str, flag: str) -> list[float]:
    values = [v for v in (part.strip() for part in text.split(",")) if v]
    if not values:
        raise ConfigError(f"{flag}: empty list")
    try:
        return [float(v) for v in values]
    except ValueError as exc:
        raise ConfigError(f"{flag}: {exc}") from None


def _load(args) -> tuple[RunConfig, Path, GridSpec]:
    overrides = {}
    if getattr(args, "output", None):
        overrides["output.directory"] = args.output
    cfg = load_config(args.config, overrides=overrides)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = GridSpec(cfg.grid_h, cfg.grid_w, cfg.cell_size)
    write_text(out_dir / "effective.cfg", effective_config_text(cfg))
    return cfg, out_dir, grid


def _scorer_for(cfg: RunConfig, checkpoint: str | None = None) -> ScorerParams | None:
    if checkpoint:
        return load_scorer(checkpoint)
    if cfg.scorer == "reference":
        return None
    return ScorerParams.random(cfg.scorer_hidden, seed=cfg.scenario.seed)


def cmd_run(args) -> int:
    cfg, out_dir, grid = _load(args)
    scorer = _scorer_for(cfg, args.scorer_checkpoint)
    results = []
    trace_text = None
    for seed in cfg.seeds:
        world = generate(replace(cfg.scenario, seed=seed), grid=grid)
        scene = prepare_scene(world, cfg.settings)
        for method in cfg.methods:
            params = None if method == "single" else scorer
            results.append(run_method(world, method, cfg.settings.q_max,
                                      cfg.settings, scorer_params=params,
                                      scene=scene))
            if trace_text is None:
                pipe = run_pipeline(scene, method, cfg.settings.q_max,
                                    cfg.settings, params)
                trace_text = attention_trace_csv(pipe.fused)
    if "json" in cfg.formats:
        write_text(out_dir / "report.json", run_report_json(results, CONVENTIONS))
    if "csv" in cfg.formats:
        write_text(out_dir / "report.csv",
                   per_seed_csv(results, cfg.settings.iou_thresholds))
        write_text(out_dir / "attention_trace.csv", trace_text or "")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, out_dir, grid = _load(args)
    budgets = ([cfg.settings.q_max] if args.budgets is None
               else _parse_float_list(args.budgets, "--budgets"))
    sigmas = ([cfg.settings.loss_sigma] if args.sigmas is None
              else _parse_float_list(args.sigmas, "--sigmas"))
    if args.seeds is not None and args.seeds < 1:
        raise ConfigError("--seeds: need at least one seed")
    seeds = (list(cfg.seeds) if args.seeds is None
             else [cfg.scenario.seed + i for i in range(args.seeds)])
    scorers = None
    if cfg.scorer == "mlp":
        scorers = train_sigma_scorers(cfg.scenario, cfg.settings, sigmas,
                                      cfg.settings.q_max, steps=args.train_steps,
                                      learning_rate=args.train_lr,
                                      hidden=cfg.scorer_hidden, grid=grid)
    result = sweep(cfg.scenario, cfg.settings, budgets, sigmas, seeds,
                   methods=cfg.methods, scorers=scorers, jobs=max(1, args.jobs),
                   grid=grid)
    if "csv" in cfg.formats:
        write_text(out_dir / "sweep.csv",
                   sweep_csv(result, cfg.settings.iou_thresholds))
        write_text(out_dir / "per_seed.csv",
                   per_seed_csv(list(result.per_seed), cfg.settings.iou_thresholds))
    if "json" in cfg.formats:
        write_text(out_dir / "sweep.json", sweep_json(result))
    if "svg" in cfg.formats:
        for t in cfg.settings.iou_thresholds:
            write_text(out_dir / f"budget_ap_{t:g}.svg",
                       budget_curve_svg(result, t, sigmas[0], "ap"))
            write_text(out_dir / f"budget_masked_{t:g}.svg",
                       budget_curve_svg(result, t, sigmas[0], "masked"))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.steps < 1:
        raise ConfigError("--steps: must be >= 1")
    if args.batch < 1:
        raise ConfigError("--batch: must be >= 1")
    cfg, out_dir, grid = _load(args)
    scenes = []
    base = cfg.scenario.seed + 100_000
    for i in range(args.batch):
        world = generate(replace(cfg.scenario, seed=base + i), grid=grid)
        scenes.append(make_train_scene(prepare_scene(world, cfg.settings)))
    init = ScorerParams.random(cfg.scorer_hidden, seed=cfg.scenario.seed, scale=0.3)
    result = train_scorer(init, scenes, cfg.settings.q_max, cfg.settings,
                          learning_rate=args.lr, steps=args.steps)
    save_scorer(result.params, out_dir / "scorer.dcpw")
    write_text(out_dir / "training_log.csv", training_log_csv(result.history))
    hard_gap = result.hard_loss_final - result.hard_loss_initial
    print(f"trained {args.steps} steps: soft loss "
          f"{result.history[0]['dw_loss']:.4f} -> {result.history[-1]['dw_loss']:.4f}, "
          f"hard loss {result.hard_loss_initial:.4f} -> "
          f"{result.hard_loss_final:.4f} (gap {hard_gap:+.4f})")
    return EXIT_OK


def cmd_export_scene(args) -> int:
    cfg, out_dir, grid = _load(args)
    for seed in cfg.seeds:
        world = generate(replace(cfg.scenario, seed=seed), grid=grid)
        export_scene(world, out_dir / f"scene_{seed}.json")
    return EXIT_OK


_COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "train": cmd_train,
    "export-scene": cmd_export_scene,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlacementExhausted, DivergedTraining, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
