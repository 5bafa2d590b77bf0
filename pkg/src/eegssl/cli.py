"""Command-line orchestration: pretrain, probe, finetune, maskbench,
robustness, sweep, and report.

Every command resolves one YAML config (with --set overrides taking
precedence), writes the resolved config plus its artifacts under the output
directory, and exits 0 on success, 2 on invalid configuration or inputs,
3 on training divergence, and 4 on I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_model_tensors,
    restore_trainer,
    save_trainer_checkpoint,
)
from .config import ConfigError, RunConfig, config_to_dict, dump_config, load_config
from .data import DataError, EegDataset, load_dataset, split, synthesize_dataset
from .evaluation import (
    ablation_sweep,
    extract_representations,
    fine_tune,
    linear_probe,
    robustness_eval,
)
from .masking import STRATEGIES, MaskingError, boundary_count, make_plan, preserved_run_lengths
from .networks import build_model
from .training import EmaSchedule, Trainer, TrainingDiverged

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

OUTPUT_DIR_ENV = "EEGSSL_OUTPUT_DIR"


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, DataError, MaskingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="YAML run configuration")
            p.add_argument(
                "--set",
                action="append",
                default=[],
                metavar="KEY.PATH=VALUE",
                help="override a config value (repeatable, highest precedence)",
            )
            p.add_argument("--output-dir", default=None, help="override the output directory")
            p.add_argument("--workers", type=int, default=None, help="worker threads (0 = deterministic)")
        p.set_defaults(handler=handler)
        return p

    p = add("pretrain", cmd_pretrain, "run self-supervised pretraining")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument(
        "--stop-after-epoch",
        type=int,
        default=None,
        help="pause after this many epochs (schedules stay pinned to the full run)",
    )

    p = add("probe", cmd_probe, "linear probe on frozen representations")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")

    p = add("finetune", cmd_finetune, "supervised fine-tuning with a classification head")
    p.add_argument("--checkpoint", default=None, help="pretrained checkpoint (omit for random init)")

    add("maskbench", cmd_maskbench, "per-strategy mask plan statistics")

    p = add("robustness", cmd_robustness, "probe accuracy under noise perturbations")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")

    add("sweep", cmd_sweep, "masking ablation grid: pretrain + probe per cell")

    p = add("report", cmd_report, "summarize the artifacts of a run directory", needs_config=False)
    p.add_argument("--run-dir", required=True, help="directory with training logs and metrics")
    return parser


# -- shared plumbing ---------------------------------------------------------


def _resolve_config(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config, args.set)
    output_dir = cfg.output_dir
    if os.environ.get(OUTPUT_DIR_ENV):
        output_dir = os.environ[OUTPUT_DIR_ENV]
    if args.output_dir:
        output_dir = args.output_dir
    if args.workers is not None:
        cfg = dataclasses.replace(
            cfg, training=dataclasses.replace(cfg.training, workers=args.workers)
        )
    cfg = dataclasses.replace(cfg, output_dir=str(output_dir))
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "resolved_config.yaml")
    return cfg, out


def _prepare_data(cfg: RunConfig) -> tuple[EegDataset, EegDataset, EegDataset]:
    if cfg.data.source == "synthetic":
        dataset = synthesize_dataset(cfg.data.synthetic)
    else:
        dataset = load_dataset(cfg.data.manifest_path)
    return split(dataset, cfg.data.split, seed=cfg.seed)


def _build_trainer(cfg: RunConfig, train, val, out: Path | None) -> Trainer:
    model = build_model(
        cfg.embedding, cfg.encoder, train.num_channels, train.num_steps, cfg.seed
    )
    train_cfg = cfg.training.train_config()
    total_updates = Trainer.compute_total_updates(len(train), train_cfg)
    tau_steps = cfg.training.ema.tau_steps or max(1, int(0.3 * total_updates))
    ema = EmaSchedule(cfg.training.ema.tau_start, cfg.training.ema.tau_end, tau_steps)
    log_path = out / "training_log.csv" if out is not None else None
    return Trainer(
        model,
        train,
        val,
        cfg.masking,
        cfg.training.loss,
        train_cfg,
        ema=ema,
        seed=cfg.seed,
        log_path=log_path,
    )


def _load_pretrained_model(cfg: RunConfig, train: EegDataset, checkpoint_path: str):
    ckpt = load_checkpoint(checkpoint_path)
    model = build_model(
        cfg.embedding, cfg.encoder, train.num_channels, train.num_steps, cfg.seed
    )
    load_model_tensors(model, ckpt)
    return model


def _write_metrics_csv(path: Path, rows: list[dict]):
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# -- commands -----------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg, out = _resolve_config(args)
    train, val, _ = _prepare_data(cfg)
    trainer = _build_trainer(cfg, train, val, out)
    if args.resume:
        restore_trainer(load_checkpoint(args.resume), trainer)
        logger.info("resumed from %s at epoch %d (step %d)", args.resume, trainer.epoch, trainer.global_step)
    result = trainer.run(until_epoch=args.stop_after_epoch)
    ckpt_path = out / "checkpoint.ckpt"
    save_trainer_checkpoint(ckpt_path, trainer, config_to_dict(cfg), cfg.seed)
    print(
        f"pretrain done: epochs={trainer.epoch} steps={trainer.global_step} "
        f"best_val={result.best_val:.6f} collapse={result.collapse_flagged} "
        f"checkpoint={ckpt_path}"
    )
    if result.collapse_flagged:
        print("warning: representation collapse flagged (batch std < 1e-3)")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg, out = _resolve_config(args)
    train, _, test = _prepare_data(cfg)
    model = _load_pretrained_model(cfg, train, args.checkpoint)
    encoder = cfg.evaluation.probe_encoder
    report = linear_probe(
        extract_representations(train, model, encoder=encoder),
        train.labels(),
        extract_representations(test, model, encoder=encoder),
        test.labels(),
    )
    row = {"encoder": encoder, "seed": cfg.seed, **report.as_row()}
    _write_metrics_csv(out / "probe_metrics.csv", [row])
    print(f"probe: {row}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, out = _resolve_config(args)
    train, _, test = _prepare_data(cfg)
    if args.checkpoint:
        model = _load_pretrained_model(cfg, train, args.checkpoint)
        init = "pretrained"
    else:
        model = build_model(
            cfg.embedding, cfg.encoder, train.num_channels, train.num_steps, cfg.seed
        )
        init = "random"
    result = fine_tune(
        model,
        train,
        test,
        epochs=cfg.evaluation.finetune_epochs,
        lr=cfg.evaluation.finetune_lr,
        batch_size=cfg.training.batch_size,
        seed=cfg.seed,
    )
    row = {"init": init, "seed": cfg.seed, "eval_loss": result.eval_loss, **result.report.as_row()}
    _write_metrics_csv(out / "finetune_metrics.csv", [row])
    print(f"finetune: {row}")
    return EXIT_OK


def cmd_maskbench(args) -> int:
    cfg, out = _resolve_config(args)
    train, _, _ = _prepare_data(cfg)
    l = cfg.embedding.num_patches(train.num_steps)
    plan_rows = []
    hist_rows = []
    for strategy_index, strategy in enumerate(STRATEGIES):
        mask_cfg = dataclasses.replace(cfg.masking, strategy=strategy)
        run_hist: dict[int, int] = {}
        for i in range(cfg.evaluation.maskbench_plans):
            seed = np.random.SeedSequence([cfg.seed, strategy_index, i])
            plan = make_plan(l, mask_cfg, np.random.default_rng(seed))
            runs = preserved_run_lengths(plan)
            for r in runs:
                run_hist[r] = run_hist.get(r, 0) + 1
            plan_rows.append(
                {
                    "strategy": strategy,
                    "plan": i,
                    "boundaries": boundary_count(plan),
                    "preserved": len(plan.preserved),
                    "num_runs": len(runs),
                    "max_run": max(runs) if runs else 0,
                }
            )
        for run_length in sorted(run_hist):
            hist_rows.append(
                {"strategy": strategy, "run_length": run_length, "count": run_hist[run_length]}
            )
    _write_metrics_csv(out / "maskbench_plans.csv", plan_rows)
    _write_metrics_csv(out / "maskbench_run_hist.csv", hist_rows)
    for strategy in STRATEGIES:
        rows = [r for r in plan_rows if r["strategy"] == strategy]
        mean_boundaries = sum(r["boundaries"] for r in rows) / len(rows)
        print(f"maskbench {strategy}: mean boundaries {mean_boundaries:.2f} over {len(rows)} plans")
    return EXIT_OK


def cmd_robustness(args) -> int:
    cfg, out = _resolve_config(args)
    train, _, test = _prepare_data(cfg)
    model = _load_pretrained_model(cfg, train, args.checkpoint)
    rows = robustness_eval(
        model,
        train,
        test,
        list(cfg.evaluation.robustness_kinds),
        list(cfg.evaluation.robustness_magnitudes),
        seed=cfg.seed,
        csv_path=out / "robustness.csv",
        plot_path=out / "robustness.png",
    )
    print(f"robustness: {len(rows)} rows -> {out / 'robustness.csv'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, out = _resolve_config(args)
    train, val, test = _prepare_data(cfg)
    rows = ablation_sweep(
        train,
        val,
        test,
        cfg.embedding,
        cfg.encoder,
        cfg.masking,
        cfg.training.loss,
        cfg.training.train_config(),
        list(cfg.evaluation.sweep_strategies),
        list(cfg.evaluation.sweep_mask_ratios),
        list(cfg.evaluation.sweep_preserve_blocks),
        list(cfg.evaluation.sweep_seeds),
        csv_path=out / "sweep.csv",
    )
    print(f"sweep: {len(rows)} cells -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    lines = [f"run report: {run_dir}"]
    log_path = run_dir / "training_log.csv"
    if log_path.exists():
        with log_path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            last = rows[-1]
            lines.append(
                f"training: {len(rows)} steps, final total={last['total']}, "
                f"final rec={last['rec']}, rep_std_min={last['rep_std_min']}"
            )
            _plot_training_curves(run_dir / "report_curves.png", rows)
            lines.append(f"curves: {run_dir / 'report_curves.png'}")
    for name in ("probe_metrics.csv", "finetune_metrics.csv", "robustness.csv", "sweep.csv"):
        path = run_dir / name
        if path.exists():
            with path.open(newline="") as fh:
                rows = list(csv.DictReader(fh))
            lines.append(f"{name}: {len(rows)} rows")
            lines.extend(f"  {row}" for row in rows[:10])
    report_path = run_dir / "report.txt"
    report_path.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _plot_training_curves(path: Path, rows: list[dict]):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("rec", "var", "cov", "total"):
        ax.plot(steps, [float(r[key]) for r in rows], label=key)
    val_points = [(int(r["step"]), float(r["val_total"])) for r in rows if r["val_total"]]
    if val_points:
        xs, ys = zip(*val_points)
        ax.plot(xs, ys, "k--", label="val_total")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    sys.exit(main())
