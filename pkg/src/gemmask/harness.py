"""Config-driven experiment runner producing machine-readable reports.

One experiment is a grid of (strategy, ratio, seed) cells. Per seed: the
model is initialized and pre-trained on the source task, the accumulated
gradient on the target task is snapshotted at the pre-trained weights,
and each (strategy, ratio) builds its masks from that pair and
fine-tunes on the target task. Every cell is deterministic, so two runs
of the same config produce bytewise-identical report files.

Output layout under the configured directory:

- ``config.json``             echo of the experiment config
- ``cells/<cell>.csv``        per-epoch train records of one cell
- ``cells/<cell>.gemm``       the cell's mask file
- ``cells/<cell>.alloc.json`` the cell's allocation plan
- ``cells/index.json``        per-cell summaries (the report's raw rows)
- ``cells.csv``               one row per (strategy, ratio, seed)
- ``report.csv``              mean +/- std over seeds per (strategy, ratio)
- ``fig2.csv``                seed means normalized to max = 1 per column
- ``captured_share.csv``      captured-GWR-share table
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import scoring
from .mask_engine import MaskSet, save_masks
from .model_store import GradientSnapshot, ModelSnapshot
from .strategies import StrategySpec, make_mask
from .toy_models import (
    Dataset,
    OptimizerConfig,
    SyntheticTask,
    ToyModel,
    ToyModelSpec,
    TrainConfig,
    TrainRecord,
    make_dataset,
    train_masked,
    write_records_csv,
)

WORKERS_ENV = "GEM_WORKERS"


class ConfigError(ValueError):
    """Malformed experiment configuration."""


def _check_keys(d: dict, allowed: Sequence[str], where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")


def _dataclass_from(cls, d: dict, where: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    _check_keys(d, tuple(fields), where)
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; serialized as a single strict JSON document."""

    model: ToyModelSpec
    source_task: SyntheticTask
    target_task: SyntheticTask
    strategies: tuple[str, ...]
    ratios: tuple[float, ...]
    seeds: tuple[int, ...]
    optimizer: OptimizerConfig
    epochs: int
    output_dir: str
    pretrain_epochs: int = 30
    batch_size: int = 32
    eps: float = 1e-12
    gradient_accumulation: str = "epoch"

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.strategies:
            raise ConfigError("strategy list must be non-empty")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if not self.ratios:
            raise ConfigError("ratio list must be non-empty")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.gradient_accumulation not in ("epoch", "batch"):
            raise ConfigError(
                f"gradient_accumulation must be 'epoch' or 'batch', got {self.gradient_accumulation!r}"
            )
        for name in self.strategies:
            StrategySpec(name=name, ratio=min(self.ratios), eps=self.eps, seed=0)

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("model", "source_task", "target_task", "optimizer"):
            d[key] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[key].items()}
        for key in ("strategies", "ratios", "seeds"):
            d[key] = list(d[key])
        d["model"]["dims"] = list(self.model.dims)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        _check_keys(d, tuple(fields), "experiment config")
        for required in ("model", "source_task", "target_task", "strategies", "ratios",
                         "seeds", "optimizer", "epochs", "output_dir"):
            if required not in d:
                raise ConfigError(f"experiment config is missing {required!r}")
        model = _dataclass_from(ToyModelSpec, d["model"], "model")
        source = _dataclass_from(SyntheticTask, d["source_task"], "source_task")
        target = _dataclass_from(SyntheticTask, d["target_task"], "target_task")
        optimizer = _dataclass_from(OptimizerConfig, d["optimizer"], "optimizer")
        extra = {k: d[k] for k in ("pretrain_epochs", "batch_size", "eps", "gradient_accumulation") if k in d}
        return cls(
            model=model,
            source_task=source,
            target_task=target,
            strategies=tuple(d["strategies"]),
            ratios=tuple(float(r) for r in d["ratios"]),
            seeds=tuple(int(s) for s in d["seeds"]),
            optimizer=optimizer,
            epochs=int(d["epochs"]),
            output_dir=str(d["output_dir"]),
            **extra,
        )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("experiment config must be a JSON object")
    return ExperimentConfig.from_json_dict(doc)


def default_config(output_dir: str, **overrides) -> ExperimentConfig:
    """The default desk-scale comparison grid (see README).

    Pre-trains on the base two-Gaussians task and fine-tunes on the
    shifted variant (rotated class direction plus newly-activated
    high-variance nuisance dimensions), comparing the scale-aware
    strategies against random and top-gradient masking at a 1% budget.
    """
    base = dict(
        model=ToyModelSpec(kind="mlp", dims=(20, 100, 2), activation="tanh", seed=0,
                           loss="cross_entropy"),
        source_task=SyntheticTask(kind="two_gaussians_classification", n_train=1024,
                                  n_eval=256, noise=0.6, seed=0, shift=0.0),
        target_task=SyntheticTask(kind="two_gaussians_classification", n_train=1024,
                                  n_eval=256, noise=0.6, seed=0, shift=1.3),
        strategies=("gem", "gwr_uniform", "random", "top_gradient"),
        ratios=(0.01,),
        seeds=(1, 2, 3),
        optimizer=OptimizerConfig(kind="adamw", lr=0.02),
        epochs=10,
        output_dir=output_dir,
        pretrain_epochs=40,
        batch_size=32,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@dataclass(frozen=True)
class CellResult:
    """One (strategy, ratio, seed) cell's summary."""

    strategy: str
    ratio: float
    seed: int
    captured_share: float
    final_loss: float | None
    final_metric: float | None
    rel_change: float | None
    loss_red_proxy: float | None
    budgets: dict[str, int]

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "CellResult":
        return cls(**d)


@dataclass(frozen=True)
class AggregateRow:
    """Seed-mean and seed-std of one (strategy, ratio) group."""

    strategy: str
    ratio: float
    n_seeds: int
    captured_share_mean: float
    captured_share_std: float
    final_loss_mean: float | None
    final_loss_std: float | None
    final_metric_mean: float | None
    final_metric_std: float | None
    rel_change_mean: float | None
    rel_change_std: float | None
    loss_red_proxy_mean: float | None
    loss_red_proxy_std: float | None


@dataclass(frozen=True)
class Report:
    cells: tuple[CellResult, ...]
    aggregates: tuple[AggregateRow, ...]


def _mean_std(values: Sequence[float | None]) -> tuple[float | None, float | None]:
    if any(v is None for v in values):
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(arr))
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def aggregate_cells(cells: Sequence[CellResult]) -> tuple[AggregateRow, ...]:
    """Group cells by (strategy, ratio) preserving first-seen order."""
    groups: dict[tuple[str, float], list[CellResult]] = {}
    for c in cells:
        groups.setdefault((c.strategy, c.ratio), []).append(c)
    rows = []
    for (strategy, ratio), members in groups.items():
        share_m, share_s = _mean_std([c.captured_share for c in members])
        loss_m, loss_s = _mean_std([c.final_loss for c in members])
        metric_m, metric_s = _mean_std([c.final_metric for c in members])
        rel_m, rel_s = _mean_std([c.rel_change for c in members])
        proxy_m, proxy_s = _mean_std([c.loss_red_proxy for c in members])
        rows.append(
            AggregateRow(
                strategy=strategy,
                ratio=ratio,
                n_seeds=len(members),
                captured_share_mean=share_m,
                captured_share_std=share_s,
                final_loss_mean=loss_m,
                final_loss_std=loss_s,
                final_metric_mean=metric_m,
                final_metric_std=metric_s,
                rel_change_mean=rel_m,
                rel_change_std=rel_s,
                loss_red_proxy_mean=proxy_m,
                loss_red_proxy_std=proxy_s,
            )
        )
    return tuple(rows)


def _ratio_token(ratio: float) -> str:
    return repr(ratio).replace(".", "p").replace("-", "m").replace("+", "")


def cell_name(strategy: str, ratio: float, seed: int) -> str:
    return f"{strategy}_r{_ratio_token(ratio)}_s{seed}"


@dataclass(frozen=True)
class _SeedContext:
    """Per-seed shared state: pre-trained weights and accumulated gradients."""

    seed: int
    w0: ModelSnapshot
    g0: GradientSnapshot
    dataset: Dataset
    model: ToyModel


def _prepare_seed(config: ExperimentConfig, seed: int) -> _SeedContext:
    model_spec = replace(config.model, seed=seed)
    model = ToyModel(model_spec)
    source = replace(config.source_task, seed=config.source_task.seed + seed)
    target = replace(config.target_task, seed=config.target_task.seed + seed)
    snap = model.init_snapshot()
    train_cfg = TrainConfig(optimizer=config.optimizer, batch_size=config.batch_size,
                            shuffle_seed=seed)
    if config.pretrain_epochs > 0:
        snap = train_masked(model, snap, source, None, train_cfg, config.pretrain_epochs).snapshot
    target_ds = make_dataset(target, model)
    if config.gradient_accumulation == "epoch":
        gx, gy = target_ds.x_train, target_ds.y_train
    else:
        order = np.random.default_rng(seed).permutation(target_ds.x_train.shape[0])
        sel = order[: config.batch_size]
        gx, gy = target_ds.x_train[sel], target_ds.y_train[sel]
    _, g0 = model.loss_and_grads(snap, gx, gy)
    return _SeedContext(seed=seed, w0=snap, g0=g0, dataset=target_ds, model=model)


def _run_cell(config: ExperimentConfig, ctx: _SeedContext, strategy: str, ratio: float
              ) -> tuple[CellResult, list[TrainRecord], MaskSet]:
    spec = StrategySpec(name=strategy, ratio=ratio, eps=config.eps, seed=ctx.seed)
    masks = make_mask(spec, ctx.w0, ctx.g0,
                      gradient_source=f"{config.gradient_accumulation} accumulation, seed {ctx.seed}")
    target = replace(config.target_task, seed=config.target_task.seed + ctx.seed)
    train_cfg = TrainConfig(optimizer=config.optimizer, batch_size=config.batch_size,
                            shuffle_seed=ctx.seed + 1)
    outcome = train_masked(ctx.model, ctx.w0, target, masks, train_cfg, config.epochs,
                           grads0=ctx.g0, dataset=ctx.dataset)
    if outcome.records:
        last = outcome.records[-1]
        result = CellResult(strategy, ratio, ctx.seed, last.captured_share, last.loss,
                            last.metric, last.rel_change, last.loss_red_proxy, masks.budgets())
    else:
        scores = [
            scoring.compute_gwr(layer, ctx.g0.layer(layer.name), config.eps)
            for layer in ctx.w0.tunable_layers()
        ]
        share = scoring.captured_share(scores, masks)
        result = CellResult(strategy, ratio, ctx.seed, share, None, None, None, None,
                            masks.budgets())
    return result, outcome.records, masks


def _cell_worker(payload: tuple) -> tuple[CellResult, list[TrainRecord], MaskSet]:
    return _run_cell(*payload)


def _flush_cell(cells_dir: Path, result: CellResult, records: list[TrainRecord], masks: MaskSet) -> None:
    name = cell_name(result.strategy, result.ratio, result.seed)
    write_records_csv(records, cells_dir / f"{name}.csv")
    save_masks(masks, cells_dir / f"{name}.gemm")
    plan = masks.provenance.get("plan")
    (cells_dir / f"{name}.alloc.json").write_text(
        json.dumps(plan, indent=2, sort_keys=True) + "\n"
    )


def _write_index(cells_dir: Path, results: Sequence[CellResult]) -> None:
    doc = [r.to_json_dict() for r in results]
    (cells_dir / "index.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_files(out_dir: str | Path, cells: Sequence[CellResult]) -> tuple[AggregateRow, ...]:
    """Write cells.csv, report.csv, fig2.csv, and captured_share.csv."""
    out = Path(out_dir)
    aggregates = aggregate_cells(cells)

    # One row per (strategy, ratio, seed): the raw material of the report.
    with open(out / "cells.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "ratio", "seed", "captured_share", "final_loss",
                         "final_metric", "rel_change", "loss_red_proxy"])
        for c in cells:
            writer.writerow([c.strategy, _csv_value(c.ratio), c.seed,
                             _csv_value(c.captured_share), _csv_value(c.final_loss),
                             _csv_value(c.final_metric), _csv_value(c.rel_change),
                             _csv_value(c.loss_red_proxy)])
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "strategy", "ratio", "n_seeds",
            "captured_share_mean", "captured_share_std",
            "final_loss_mean", "final_loss_std",
            "final_metric_mean", "final_metric_std",
            "rel_change_mean", "rel_change_std",
            "loss_red_proxy_mean", "loss_red_proxy_std",
        ])
        for row in aggregates:
            writer.writerow([
                row.strategy, _csv_value(row.ratio), row.n_seeds,
                _csv_value(row.captured_share_mean), _csv_value(row.captured_share_std),
                _csv_value(row.final_loss_mean), _csv_value(row.final_loss_std),
                _csv_value(row.final_metric_mean), _csv_value(row.final_metric_std),
                _csv_value(row.rel_change_mean), _csv_value(row.rel_change_std),
                _csv_value(row.loss_red_proxy_mean), _csv_value(row.loss_red_proxy_std),
            ])

    # Normalized view: per ratio, each column scaled so its max is 1.
    with open(out / "fig2.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "strategy", "rel_change_mean", "rel_change_norm",
                         "loss_red_proxy_mean", "loss_red_proxy_norm"])
        for ratio in sorted({row.ratio for row in aggregates}):
            group = [row for row in aggregates if row.ratio == ratio]
            rel_vals = [row.rel_change_mean for row in group]
            proxy_vals = [row.loss_red_proxy_mean for row in group]
            rel_max = max((v for v in rel_vals if v is not None), default=None)
            proxy_max = max((v for v in proxy_vals if v is not None), default=None)

            def norm(v, vmax):
                if v is None or vmax is None or vmax == 0.0:
                    return None
                return v / vmax

            for row in group:
                writer.writerow([
                    _csv_value(ratio), row.strategy,
                    _csv_value(row.rel_change_mean), _csv_value(norm(row.rel_change_mean, rel_max)),
                    _csv_value(row.loss_red_proxy_mean), _csv_value(norm(row.loss_red_proxy_mean, proxy_max)),
                ])

    with open(out / "captured_share.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "ratio", "captured_share_mean", "captured_share_std"])
        for row in aggregates:
            writer.writerow([row.strategy, _csv_value(row.ratio),
                             _csv_value(row.captured_share_mean), _csv_value(row.captured_share_std)])
    return aggregates


def run_experiment(config: ExperimentConfig) -> Report:
    """Execute every (strategy, ratio, seed) cell and write the report.

    Cells are independent; ``GEM_WORKERS`` > 1 runs them in a process
    pool. Results are written in grid order regardless of completion
    order, so output bytes do not depend on the worker count. A failing
    cell aborts the run with its identity after flushing finished cells.
    """
    out = Path(config.output_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )

    contexts = {seed: _prepare_seed(config, seed) for seed in config.seeds}
    grid = [
        (strategy, ratio, seed)
        for strategy in config.strategies
        for ratio in config.ratios
        for seed in config.seeds
    ]
    workers = int(os.environ.get(WORKERS_ENV, "1") or "1")
    results: list[CellResult] = []
    try:
        if workers > 1:
            payloads = [(config, contexts[seed], strategy, ratio) for strategy, ratio, seed in grid]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for (strategy, ratio, seed), (result, records, masks) in zip(
                    grid, pool.map(_cell_worker, payloads)
                ):
                    _flush_cell(cells_dir, result, records, masks)
                    results.append(result)
        else:
            for strategy, ratio, seed in grid:
                try:
                    result, records, masks = _run_cell(config, contexts[seed], strategy, ratio)
                except Exception as exc:
                    raise RuntimeError(
                        f"cell strategy={strategy} ratio={ratio} seed={seed} failed: {exc}"
                    ) from exc
                _flush_cell(cells_dir, result, records, masks)
                results.append(result)
    finally:
        _write_index(cells_dir, results)
    aggregates = write_report_files(out, results)
    return Report(cells=tuple(results), aggregates=aggregates)


def read_cells(run_dir: str | Path) -> list[CellResult]:
    """Reload the per-cell summaries a run directory recorded."""
    index = Path(run_dir) / "cells" / "index.json"
    if not index.is_file():
        raise ConfigError(f"not a run directory (missing {index})")
    doc = json.loads(index.read_text())
    return [CellResult.from_json_dict(d) for d in doc]


def rebuild_report(run_dir: str | Path) -> tuple[AggregateRow, ...]:
    """Recompute aggregate files from the per-cell rows on disk."""
    cells = read_cells(run_dir)
    return write_report_files(run_dir, cells)
