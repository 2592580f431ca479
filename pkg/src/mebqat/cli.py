"""Command-line harness: train, eval sweeps, meta-eval episode sweeps,
gradient checking, cost reporting, and synthetic data generation.

Seeding discipline: one master seed fans out into independent streams for
parameter init, data order, bitwidth task draws, the class split, and
evaluation episodes. Two runs with the same config and seed write byte
identical metrics and checkpoints.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checks import STE_OPS, model_gradient_check, primitive_gradient_checks
from .config import (
    ConfigError,
    RunConfig,
    config_from_mapping,
    dump_config,
    parse_config_text,
    resolve_defaults,
)
from .data import (
    ClassSplit,
    LabeledDataset,
    load_idx,
    make_synthetic_glyphs,
    sample_episode,
    split_classes,
    synthetic_dataset,
    synthetic_train_test,
    write_idx,
)
from .meta import (
    MamlConfig,
    MebqatConfig,
    MetricRow,
    PnConfig,
    meta_backprop_count,
    meta_test_maml,
    meta_test_mebqat,
    meta_test_pn,
    reset_meta_backprop_count,
    run_mebqat_epoch,
    run_mebqat_maml_epoch,
    run_mebqat_pn_epoch,
    run_qat_epoch,
)
from .models import ModelSpec, QuantPolicy, bn_fraction, build_model, init_params, param_count
from .optim import Schedule, make_optimizer, rate_at
from .persistence import (
    CostReport,
    checkpoint_payload_bytes,
    read_checkpoint,
    write_checkpoint,
    write_metrics,
)
from .quantization import BitwidthTask, BitwidthTaskSet

__all__ = ["main", "run_training", "evaluate_sweep", "meta_evaluate", "build_cost_report"]


# -- run assembly -----------------------------------------------------------------


@dataclass
class RunContext:
    cfg: RunConfig
    spec: ModelSpec
    policy: QuantPolicy
    train_ds: LabeledDataset
    test_ds: LabeledDataset
    split: Optional[ClassSplit]
    tasks: BitwidthTaskSet
    streams: dict[str, np.random.SeedSequence]


def _load_datasets(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.data_source == "idx":
        train = load_idx(cfg.train_images, cfg.train_labels)
        test = load_idx(cfg.test_images, cfg.test_labels)
        return train, test
    if cfg.engine in ("mebqat-maml", "mebqat-pn"):
        # episodic engines draw train and test episodes from one pool,
        # separated by the class split
        pool = synthetic_dataset(
            cfg.data_classes, cfg.samples_per_class, cfg.image_size, cfg.seed
        )
        return pool, pool
    return synthetic_train_test(
        cfg.data_classes,
        cfg.samples_per_class,
        cfg.test_samples_per_class,
        cfg.image_size,
        cfg.seed,
    )


def prepare_run(cfg: RunConfig) -> RunContext:
    train_ds, test_ds = _load_datasets(cfg)
    resolve_defaults(
        cfg,
        num_classes=len(train_ds.classes),
        image_size=train_ds.images.shape[-1],
    )
    spec = build_model(
        cfg.model_kind,
        cfg.model_width,
        (cfg.input_channels, cfg.input_size, cfg.input_size),
    )
    master = np.random.SeedSequence(cfg.seed)
    init_ss, data_ss, task_ss, split_ss, eval_ss = master.spawn(5)
    streams = {
        "init": init_ss,
        "data": data_ss,
        "task": task_ss,
        "split": split_ss,
        "eval": eval_ss,
    }
    split = None
    if cfg.engine in ("mebqat-maml", "mebqat-pn"):
        split = split_classes(
            train_ds.classes, cfg.holdout_classes, np.random.default_rng(split_ss)
        )
    tasks = BitwidthTaskSet.of(
        cfg.weight_bits,
        cfg.activation_bits or None,
        cfg.minor_weight_bits,
        cfg.task_pairs,
    )
    return RunContext(cfg, spec, QuantPolicy(), train_ds, test_ds, split, tasks, streams)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    rows: list[MetricRow]
    context: RunContext
    data_rng: Optional[np.random.Generator] = None
    task_rng: Optional[np.random.Generator] = None


def run_training(cfg: RunConfig, echo=lambda s: None) -> TrainResult:
    ctx = prepare_run(cfg)
    spec, policy = ctx.spec, ctx.policy
    params = init_params(spec, np.random.default_rng(ctx.streams["init"]))
    data_rng = np.random.default_rng(ctx.streams["data"])
    task_rng = np.random.default_rng(ctx.streams["task"])
    opt = make_optimizer(cfg.optimizer_kind, cfg.lr, cfg.weight_decay)
    schedule = Schedule(
        cfg.schedule_kind, cfg.lr, tuple(cfg.milestones), cfg.decay_factor, cfg.t_max
    )

    engine_cfg = _engine_config(cfg, ctx.tasks)
    rows: list[MetricRow] = []
    for epoch in range(cfg.epochs):
        opt.lr = rate_at(schedule, epoch)
        if cfg.engine == "mebqat":
            epoch_rows = run_mebqat_epoch(
                params, spec, policy, engine_cfg, ctx.train_ds, opt,
                data_rng, task_rng, epoch=epoch, timed=cfg.wall_clock,
            )
        elif cfg.engine == "qat":
            epoch_rows = run_qat_epoch(
                params, spec, policy, BitwidthTask.of(cfg.qat_task),
                cfg.batch_size, ctx.train_ds, opt, data_rng,
                epoch=epoch, timed=cfg.wall_clock,
            )
        elif cfg.engine == "mebqat-maml":
            epoch_rows = run_mebqat_maml_epoch(
                params, spec, policy, engine_cfg, ctx.train_ds,
                ctx.split.meta_train_classes, opt, data_rng, task_rng,
                epoch=epoch, timed=cfg.wall_clock,
            )
        else:  # mebqat-pn
            epoch_rows = run_mebqat_pn_epoch(
                params, spec, policy, engine_cfg, ctx.train_ds,
                ctx.split.meta_train_classes, opt, data_rng, task_rng,
                epoch=epoch, timed=cfg.wall_clock,
            )
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1:
            rows.extend(epoch_rows)
            mean_loss = sum(r.loss for r in epoch_rows) / len(epoch_rows)
            mean_acc = sum(r.accuracy for r in epoch_rows) / len(epoch_rows)
            echo(f"epoch {epoch}: loss {mean_loss:.4f} acc {mean_acc:.4f}")
    return TrainResult(params, rows, ctx, data_rng, task_rng)


def _engine_config(cfg: RunConfig, tasks: BitwidthTaskSet):
    if cfg.engine == "mebqat":
        return MebqatConfig(
            tasks=tasks,
            branches=cfg.branches,
            batch_size=cfg.batch_size,
            kd_enabled=cfg.kd,
            fix_first_fp=cfg.fix_first_fp,
        )
    if cfg.engine == "mebqat-maml":
        return MamlConfig(
            tasks=tasks,
            branches=cfg.branches,
            ways=cfg.ways,
            shots=cfg.shots,
            query_shots=cfg.query_shots,
            inner_steps=cfg.inner_steps,
            inner_lr=cfg.inner_lr,
            meta_test_steps=cfg.meta_test_steps,
        )
    if cfg.engine == "mebqat-pn":
        return PnConfig(
            tasks=tasks,
            branches=cfg.branches,
            ways=cfg.ways,
            shots=cfg.shots,
            query_shots=cfg.query_shots,
        )
    return None  # dedicated QAT carries its task directly


def _checkpoint_meta(cfg: RunConfig, data_rng, task_rng) -> dict:
    return {
        "engine": cfg.engine,
        "model_kind": cfg.model_kind,
        "width": cfg.model_width,
        "input_channels": cfg.input_channels,
        "input_size": cfg.input_size,
        "epoch": cfg.epochs,
        "seed": cfg.seed,
        "rng_state": {
            "data": data_rng.bit_generator.state if data_rng is not None else None,
            "task": task_rng.bit_generator.state if task_rng is not None else None,
        },
    }


def save_run(result: TrainResult, out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.context.cfg
    paths = {
        "metrics": out_dir / "metrics.csv",
        "checkpoint": out_dir / "model.ckpt",
        "config": out_dir / "config.resolved.ini",
    }
    write_metrics(paths["metrics"], result.rows)
    write_checkpoint(
        paths["checkpoint"],
        result.params,
        _checkpoint_meta(cfg, result.data_rng, result.task_rng),
    )
    paths["config"].write_text(dump_config(cfg), encoding="utf-8")
    return paths


# -- evaluation ------------------------------------------------------------------


def _spec_from_meta(meta: dict) -> ModelSpec:
    return build_model(
        meta["model_kind"],
        meta["width"],
        (meta["input_channels"], meta["input_size"], meta["input_size"]),
    )


def _params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: Tensor(data, requires_grad=True) for name, data in arrays.items()}


def evaluate_sweep(
    cfg: RunConfig,
    params: dict[str, Tensor],
    spec: ModelSpec,
    tasks: Sequence[BitwidthTask],
) -> list[tuple[BitwidthTask, float]]:
    """Accuracy at each bitwidth setting over one pass of the test set."""
    ctx = prepare_run(cfg)
    results = []
    for task in tasks:
        acc = meta_test_mebqat(
            params, spec, ctx.policy, task, ctx.test_ds, cfg.eval_batch_size
        )
        results.append((task, acc))
    return results


def meta_evaluate(
    cfg: RunConfig,
    params: dict[str, Tensor],
    spec: ModelSpec,
    tasks: Sequence[BitwidthTask],
    episodes: int,
) -> list[tuple[BitwidthTask, float]]:
    """Mean episode accuracy per bitwidth setting on held-out classes.
    All settings see the same pre-drawn episodes (paired comparison)."""
    ctx = prepare_run(cfg)
    if ctx.split is None:
        raise ConfigError("run.engine: meta-eval needs an episodic engine")
    rng = np.random.default_rng(ctx.streams["eval"])
    drawn = [
        sample_episode(
            ctx.test_ds, ctx.split.meta_test_classes, cfg.ways, cfg.shots,
            cfg.query_shots, rng,
        )
        for _ in range(episodes)
    ]
    results = []
    for task in tasks:
        total = 0.0
        for episode in drawn:
            if cfg.engine == "mebqat-pn":
                total += meta_test_pn(params, spec, ctx.policy, task, episode)
            else:
                total += meta_test_maml(
                    params, spec, ctx.policy, task, episode,
                    cfg.meta_test_steps, cfg.inner_lr,
                )
        results.append((task, total / episodes))
    return results


def build_cost_report(cfg: RunConfig, arrays: dict[str, np.ndarray]) -> CostReport:
    """Measure backprops for one outer update on the configured data and
    combine with checkpoint storage facts."""
    ctx = prepare_run(cfg)
    params = _params_from_arrays(arrays)
    opt = make_optimizer(cfg.optimizer_kind, cfg.lr, cfg.weight_decay)
    data_rng = np.random.default_rng(ctx.streams["data"])
    task_rng = np.random.default_rng(ctx.streams["task"])
    engine_cfg = _engine_config(cfg, ctx.tasks)

    ad.reset_backward_pass_count()
    reset_meta_backprop_count()
    if cfg.engine == "mebqat":
        one_batch = ctx.train_ds.subset(np.arange(min(cfg.batch_size, len(ctx.train_ds))))
        run_mebqat_epoch(
            params, ctx.spec, ctx.policy, engine_cfg, one_batch, opt, data_rng, task_rng
        )
        updates = 1
    elif cfg.engine == "qat":
        one_batch = ctx.train_ds.subset(np.arange(min(cfg.batch_size, len(ctx.train_ds))))
        run_qat_epoch(
            params, ctx.spec, ctx.policy, BitwidthTask.of(cfg.qat_task),
            cfg.batch_size, one_batch, opt, data_rng,
        )
        updates = 1
    elif cfg.engine == "mebqat-maml":
        run_mebqat_maml_epoch(
            params, ctx.spec, ctx.policy, engine_cfg, ctx.train_ds,
            ctx.split.meta_train_classes, opt, data_rng, task_rng,
        )
        updates = 1
    else:
        run_mebqat_pn_epoch(
            params, ctx.spec, ctx.policy, engine_cfg, ctx.train_ds,
            ctx.split.meta_train_classes, opt, data_rng, task_rng,
        )
        updates = 1

    return CostReport(
        evaluated_pairs=len(cfg.eval_tasks),
        branches=1 if cfg.engine == "qat" else cfg.branches,
        param_count=param_count(ctx.spec),
        param_bytes=checkpoint_payload_bytes(params),
        bn_fraction=bn_fraction(ctx.spec),
        backprops_per_update=meta_backprop_count() // updates,
        total_backward_passes=ad.backward_pass_count(),
    )


# -- argument plumbing --------------------------------------------------------------


def _load_cfg(args) -> RunConfig:
    with open(args.config, "r", encoding="utf-8") as f:
        mapping = parse_config_text(f.read())
    for override in getattr(args, "set", None) or []:
        if "=" not in override:
            raise ConfigError(f"--set expects key=value, got {override!r}")
        key, raw = override.split("=", 1)
        mapping[key.strip()] = parse_config_text(f"x = {raw}")["x"]
    cfg = config_from_mapping(mapping)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _add_common(sub):
    sub.add_argument("--config", required=True, help="run configuration file")
    sub.add_argument("--seed", type=int, default=None, help="override run.seed")
    sub.add_argument("--out", default=None, help="override run.out_dir")
    sub.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override any configuration key (repeatable)",
    )


def _parse_tasks(raw: Optional[Sequence[str]], cfg: RunConfig) -> list[BitwidthTask]:
    specs = list(raw) if raw else list(cfg.eval_tasks)
    return [BitwidthTask.of(s) for s in specs]


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mebqat",
        description="Bitwidth-adaptive quantization-aware training toolkit",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="run a training engine per config")
    _add_common(p_train)

    p_eval = subs.add_parser("eval", help="sweep bitwidth settings over a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--tasks", nargs="*", default=None, help='settings like "2,2" "FP,FP"')

    p_meval = subs.add_parser("meta-eval", help="episode sweep on held-out classes")
    _add_common(p_meval)
    p_meval.add_argument("--checkpoint", default=None)
    p_meval.add_argument("--tasks", nargs="*", default=None)
    p_meval.add_argument("--episodes", type=int, default=None)

    p_grad = subs.add_parser("gradcheck", help="finite-difference gradient audit")
    p_grad.add_argument("--trials", type=int, default=100)
    p_grad.add_argument("--seed", type=int, default=0)

    p_cost = subs.add_parser("report-cost", help="training and storage cost report")
    _add_common(p_cost)
    p_cost.add_argument("--checkpoint", default=None)

    p_synth = subs.add_parser("make-synthetic", help="emit synthetic glyph IDX files")
    p_synth.add_argument("--out", required=True, help="output path prefix")
    p_synth.add_argument("--classes", type=int, default=50)
    p_synth.add_argument("--per-class", type=int, default=40)
    p_synth.add_argument("--image-size", type=int, default=28)
    p_synth.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "train":
        cfg = _load_cfg(args)
        result = run_training(cfg, echo=print)
        paths = save_run(result, Path(cfg.out_dir))
        print(f"wrote {paths['metrics']}, {paths['checkpoint']}, {paths['config']}")
        return 0

    if args.command in ("eval", "meta-eval"):
        cfg = _load_cfg(args)
        ckpt = args.checkpoint or str(Path(cfg.out_dir) / "model.ckpt")
        arrays, meta = read_checkpoint(ckpt)
        # the checkpoint records the trained model's shape; trust it
        cfg.model_kind = meta["model_kind"]
        cfg.model_width = meta["width"]
        cfg.input_channels = meta["input_channels"]
        cfg.input_size = meta["input_size"]
        spec = _spec_from_meta(meta)
        params = _params_from_arrays(arrays)
        tasks = _parse_tasks(args.tasks, cfg)
        if args.command == "eval":
            rows = evaluate_sweep(cfg, params, spec, tasks)
        else:
            episodes = args.episodes if args.episodes is not None else cfg.eval_episodes
            rows = meta_evaluate(cfg, params, spec, tasks, episodes)
        print("b_w,b_a,accuracy")
        for task, acc in rows:
            print(f"{task.b_w},{task.b_a},{acc:.4f}")
        return 0

    if args.command == "gradcheck":
        outcomes = primitive_gradient_checks(trials=args.trials, seed=args.seed)
        model_report = model_gradient_check(trials=min(args.trials, 100), seed=args.seed)
        print(f"{'op':<20} {'max rel err':>12} {'mean rel err':>13}  status")
        failed = False
        for outcome in outcomes:
            r = outcome.report
            status = "pass" if r.passed else "FAIL"
            failed = failed or not r.passed
            print(f"{outcome.name:<20} {r.max_rel_error:>12.3e} {r.mean_rel_error:>13.3e}  {status}")
        status = "pass" if model_report.passed else "FAIL"
        failed = failed or not model_report.passed
        print(
            f"{'conv5-maml model':<20} {model_report.max_rel_error:>12.3e} "
            f"{model_report.mean_rel_error:>13.3e}  {status}"
        )
        for op in STE_OPS:
            print(f"{op:<20} {'-':>12} {'-':>13}  excluded from numeric check (defined gradient)")
        return 1 if failed else 0

    if args.command == "report-cost":
        cfg = _load_cfg(args)
        ckpt = args.checkpoint or str(Path(cfg.out_dir) / "model.ckpt")
        arrays, meta = read_checkpoint(ckpt)
        cfg.model_kind = meta["model_kind"]
        cfg.model_width = meta["width"]
        cfg.input_channels = meta["input_channels"]
        cfg.input_size = meta["input_size"]
        report = build_cost_report(cfg, arrays)
        for line in report.lines():
            print(line)
        return 0

    if args.command == "make-synthetic":
        images, labels = make_synthetic_glyphs(
            args.classes, args.per_class, args.image_size, args.seed
        )
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        image_path = Path(f"{prefix}-images.idx")
        label_path = Path(f"{prefix}-labels.idx")
        write_idx(images, labels, image_path, label_path)
        print(f"wrote {image_path} and {label_path}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
