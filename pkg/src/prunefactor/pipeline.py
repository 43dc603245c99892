"""Three-step compression runs and the experiment suites around them.

A full run is prune -> factorize -> mixed-rank fine-tune, with a checkpoint,
evaluation, and model statistics recorded after every stage. The suites
reproduce the desk-scale study tables: a budget sweep comparing pruning
methods against plain truncated SVD of a dense model, and ablations over
kept fraction, factorization weighting, the consistency term, and p_init.

All randomness is derived from integer seeds; rerunning any function with
the same config and seed writes bit-identical checkpoints.
"""

from __future__ import annotations

import csv
import os
import time

import numpy as np

from . import analysis, factorize, mixedrank, nn, prune, storage

DEFAULT_BUDGETS = (0.75, 0.50, 0.25, 0.10)
DEFAULT_P_GRID = (0.0, 0.25, 0.5, 0.75)
NUM_SEEDS = 3

STAGE_PRUNE = "prune"
STAGE_FACTORIZE = "factorize"
STAGE_FINETUNE = "finetune"


class StageError(RuntimeError):
    """A pipeline stage failed; checkpoints of earlier stages are kept."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


def dataset_pair(cfg):
    """(train, eval) datasets from the config's dataset section."""
    return (
        storage.load_dataset(cfg.dataset),
        storage.load_dataset(cfg.dataset, eval_split=True),
    )


def build_model(cfg, dataset, seed):
    """Fresh model for this config; init drawn from the seed's init stream."""
    streams = nn.rng_streams(seed)
    return nn.init_mlp(
        dataset.features.shape[1],
        cfg.hidden_dims,
        num_classes=dataset.num_classes,
        seed=streams["init"],
        task=dataset.task,
    )


def metric_name(dataset):
    return "accuracy" if dataset.task == nn.CLASSIFICATION else "mse"


def dense_baseline(cfg, seed, total_steps=None, datasets=None):
    """Plain dense training with the pipeline's total step budget.

    Returns (model, eval metric). Used as the reference point compressed
    runs are scored against.
    """
    if datasets is None:
        datasets = dataset_pair(cfg)
    train_ds, eval_ds = datasets
    if total_steps is None:
        total_steps = cfg.raw["train"]["total_steps"] + cfg.raw["finetune"]["total_steps"]
    model = build_model(cfg, train_ds, seed)
    nn.train(model, train_ds, cfg.train_config(seed, total_steps=total_steps))
    return model, nn.evaluate(model, eval_ds)


def prune_telemetry_rows(events):
    """Flatten prune events into one row per (event, layer)."""
    rows = []
    for ev in events:
        for layer_idx in sorted(ev.nonzeros):
            row = {
                "step": ev.step,
                "layer": layer_idx,
                "v_t": ev.kept_fraction,
                "nonzeros": ev.nonzeros[layer_idx],
            }
            if layer_idx in ev.numerical_ranks:
                row["numerical_rank"] = ev.numerical_ranks[layer_idx]
            rows.append(row)
    return rows


def write_csv(path, rows, fieldnames=None):
    """CSV with a header row; field order taken from the first row."""
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
        writer.writeheader()
        writer.writerows(rows)
    return str(path)


def stage_record(name, model, eval_ds, seconds, checkpoint=None):
    return {
        "name": name,
        "seconds": seconds,
        "metric": {metric_name(eval_ds): nn.evaluate(model, eval_ds)},
        "stats": analysis.model_stats(model).as_dict(),
        "checkpoint": checkpoint,
    }


def run_prune_stage(cfg, model, train_ds, seed, schedule=None, method=None):
    pr = cfg.raw["prune"]
    return prune.run_pruning(
        model,
        train_ds,
        cfg.train_config(seed),
        cfg.schedule() if schedule is None else schedule,
        method=pr["method"] if method is None else method,
        prune_interval=pr["interval"],
        layers=pr["layers"],
    )


def run_factorize_stage(cfg, model, weighting=None, rank=None):
    fz = cfg.raw["factorize"]
    return factorize.factorize_model(
        model,
        fz["rank"] if rank is None else rank,
        weighting=fz["weighting"] if weighting is None else weighting,
        layers=fz["layers"],
    )


def run_finetune_stage(cfg, model, train_ds, seed, mixed=None):
    return mixedrank.mixed_rank_finetune(
        model,
        train_ds,
        cfg.finetune_config(seed),
        cfg.mixed_config() if mixed is None else mixed,
    )


def lpaf_run(cfg, seed=None, out_dir=None, datasets=None):
    """Full prune -> factorize -> fine-tune run with artifacts on disk.

    Writes stage checkpoints (step1_sparse/, step2_factorized/, final/),
    losses.csv, prune telemetry, sparsity patterns, approximation curves,
    figures, and report.json under the output directory. Returns the report
    as a dict. A failing stage raises StageError naming the stage; artifacts
    of completed stages stay on disk.
    """
    from . import plots

    seed = cfg.seed if seed is None else seed
    out = cfg.out_dir if out_dir is None else str(out_dir)
    fig_dir = os.path.join(out, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    if datasets is None:
        datasets = dataset_pair(cfg)
    train_ds, eval_ds = datasets
    model = build_model(cfg, train_ds, seed)
    report = {
        "seed": seed,
        "config": cfg.raw,
        "stages": [],
        "files": {"report": os.path.join(out, "report.json")},
    }
    losses = {}

    def run_stage(name, fn):
        start = time.perf_counter()
        try:
            value = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        return value, time.perf_counter() - start

    # Step 1: prune while training.
    result, secs = run_stage(STAGE_PRUNE, lambda: run_prune_stage(cfg, model, train_ds, seed))
    ckpt = os.path.join(out, "step1_sparse")
    storage.save_checkpoint(model, ckpt)
    report["stages"].append(stage_record(STAGE_PRUNE, model, eval_ds, secs, ckpt))
    losses[STAGE_PRUNE] = result.losses
    telemetry = prune_telemetry_rows(result.events)
    report["files"]["prune_events"] = write_csv(
        os.path.join(out, "prune_events.csv"),
        telemetry,
        ["step", "layer", "v_t", "nonzeros", "numerical_rank"],
    )
    pattern_files = []
    sparse_weights = []
    sparse_names = []
    for i, lay in enumerate(model.layers):
        if lay.kind == nn.SPARSE:
            base = os.path.join(fig_dir, f"pattern_layer{i}")
            analysis.sparsity_pattern_export(lay, base + ".pgm", base + "_rows.csv")
            pattern_files += [base + ".pgm", base + "_rows.csv"]
            if i < len(model.layers) - 1:
                sparse_weights.append(lay.weight * lay.mask)
                sparse_names.append(f"layer{i}")
    report["files"]["patterns"] = pattern_files

    # Spectrum diagnostics of the sparse matrices the next stage factorizes.
    if sparse_weights:
        max_k = min(int(min(w.shape)) for w in sparse_weights)
        k_grid = sorted({min(2**j, max_k) for j in range(0, 9)} | {max_k})
        approx_rows = analysis.approximation_curves(
            sparse_weights,
            [k for k in k_grid if k >= 1],
            names=sparse_names,
            csv_path=os.path.join(out, "approximation.csv"),
        )
        report["files"]["approximation"] = os.path.join(out, "approximation.csv")
        plots.plot_approximation(approx_rows, os.path.join(fig_dir, "approximation.png"))

    # Step 2: factorize.
    fact_report, secs = run_stage(STAGE_FACTORIZE, lambda: run_factorize_stage(cfg, model))
    ckpt = os.path.join(out, "step2_factorized")
    storage.save_checkpoint(model, ckpt)
    record = stage_record(STAGE_FACTORIZE, model, eval_ds, secs, ckpt)
    record["layer_ranks"] = {str(k): v for k, v in fact_report.layer_ranks.items()}
    record["reconstruction_errors"] = {str(k): v for k, v in fact_report.errors.items()}
    report["stages"].append(record)

    # Step 3: mixed-rank fine-tune.
    ft_result, secs = run_stage(
        STAGE_FINETUNE, lambda: run_finetune_stage(cfg, model, train_ds, seed)
    )
    ckpt = os.path.join(out, "final")
    storage.save_checkpoint(model, ckpt)
    report["stages"].append(stage_record(STAGE_FINETUNE, model, eval_ds, secs, ckpt))
    losses[STAGE_FINETUNE] = ft_result.losses

    loss_rows = [
        {"stage": stage, "step": i, "loss": value}
        for stage, values in losses.items()
        for i, value in enumerate(values)
    ]
    report["files"]["losses"] = write_csv(
        os.path.join(out, "losses.csv"), loss_rows, ["stage", "step", "loss"]
    )
    plots.plot_loss_curves(losses, os.path.join(fig_dir, "loss_curve.png"))
    storage.write_json(report["files"]["report"], report)
    return report


# ------------------------------------------------------------- experiments --


def _seed_list(cfg, seeds):
    if seeds is None:
        return [cfg.seed + i for i in range(NUM_SEEDS)]
    return list(seeds)


def preliminary_study(cfg, out_dir=None, budgets=None, seeds=None, track_svd_ft=True):
    """Budget sweep comparing first-order and zero-order pruning against
    truncated SVD of the dense model, plus the dense reference.

    For each seed: train a dense model; for each kept-parameter budget run
    UP_first and UP_zero to that budget and, when track_svd_ft, factorize
    the dense model at the matching per-layer rank and re-train it. Emits
    accuracy and average-rank tables plus figures.
    """
    from . import plots

    budgets = DEFAULT_BUDGETS if budgets is None else tuple(budgets)
    seeds = _seed_list(cfg, seeds)
    out = cfg.out_dir if out_dir is None else str(out_dir)
    fig_dir = os.path.join(out, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    train_ds, eval_ds = dataset_pair(cfg)
    rows = []

    def record(arm, budget, seed, model):
        stats = analysis.model_stats(model)
        rows.append(
            {
                "budget": budget,
                "arm": arm,
                "seed": seed,
                "accuracy": nn.evaluate(model, eval_ds),
                "average_rank": stats.average_rank,
                "kept_params": stats.kept_params,
                "zero_row_fraction": float(
                    np.mean([e["zero_row_fraction"] for e in stats.layers[:-1]])
                ),
            }
        )

    for seed in seeds:
        dense = build_model(cfg, train_ds, seed)
        nn.train(dense, train_ds, cfg.train_config(seed))
        record("dense", 1.0, seed, dense)
        for budget in budgets:
            schedule = cfg.updated("schedule", v_final=budget).schedule()
            for method, arm in (
                (prune.FIRST_ORDER, "UP_first"),
                (prune.ZERO_ORDER, "UP_zero"),
            ):
                model = build_model(cfg, train_ds, seed)
                run_prune_stage(cfg, model, train_ds, seed, schedule=schedule, method=method)
                record(arm, budget, seed, model)
            if track_svd_ft:
                model = dense.copy()
                hidden = list(range(len(model.layers) - 1))
                prune.mark_prunable(model, hidden)
                ks = [
                    factorize.rank_for_budget(lay.out_dim, lay.in_dim, budget)
                    for lay in (model.layers[i] for i in hidden)
                ]
                factorize.factorize_model(model, ks, weighting=factorize.NONE, layers=hidden)
                nn.train(model, train_ds, cfg.finetune_config(seed))
                record("SVD_Ft", budget, seed, model)

    files = {
        "table": write_csv(
            os.path.join(out, "study.csv"),
            rows,
            ["budget", "arm", "seed", "accuracy", "average_rank", "kept_params", "zero_row_fraction"],
        )
    }
    files["accuracy_figure"] = plots.plot_lines(
        [r for r in rows if r["arm"] != "dense"],
        "budget", "accuracy", "arm",
        os.path.join(fig_dir, "study_accuracy.png"),
        xlabel="kept fraction", ylabel="accuracy",
        hline=_mean([r["accuracy"] for r in rows if r["arm"] == "dense"]),
    )
    files["rank_figure"] = plots.plot_lines(
        [r for r in rows if r["arm"] != "dense"],
        "budget", "average_rank", "arm",
        os.path.join(fig_dir, "study_rank.png"),
        xlabel="kept fraction", ylabel="average rank",
        hline=_mean([r["average_rank"] for r in rows if r["arm"] == "dense"]),
    )
    report = {"seeds": seeds, "budgets": list(budgets), "rows": rows, "files": files}
    storage.write_json(os.path.join(out, "report.json"), report)
    return report


def _mean(values):
    return float(np.mean(values)) if values else 0.0


def ablation_suite(cfg, out_dir=None, seeds=None, v_grid=None, p_grid=None):
    """Four ablations at desk scale, one CSV each.

    * kept-fraction grid: full pipeline per v_final
    * factorization weighting {score, mask, none}: accuracy before and
      after the fine-tune stage
    * consistency term: fine-tune with the consistency loss, without it,
      and plain (ungated) fine-tuning of the same factorized model
    * p_init grid for the gate schedule
    """
    from . import plots

    seeds = _seed_list(cfg, seeds)
    v_grid = DEFAULT_BUDGETS if v_grid is None else tuple(v_grid)
    p_grid = DEFAULT_P_GRID if p_grid is None else tuple(p_grid)
    out = cfg.out_dir if out_dir is None else str(out_dir)
    fig_dir = os.path.join(out, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    train_ds, eval_ds = dataset_pair(cfg)
    weighting_rows, consistency_rows, v_rows, p_rows = [], [], [], []

    for seed in seeds:
        # Shared Step-1 model at the config's kept fraction.
        base = build_model(cfg, train_ds, seed)
        run_prune_stage(cfg, base, train_ds, seed)

        for weighting in (factorize.SCORE, factorize.MASK, factorize.NONE):
            model = base.copy()
            run_factorize_stage(cfg, model, weighting=weighting)
            before = nn.evaluate(model, eval_ds)
            run_finetune_stage(cfg, model, train_ds, seed)
            weighting_rows.append(
                {
                    "seed": seed,
                    "weighting": weighting,
                    "accuracy_before": before,
                    "accuracy_after": nn.evaluate(model, eval_ds),
                }
            )

        factorized = base.copy()
        run_factorize_stage(cfg, factorized)
        variants = {
            "with_consistency": lambda m: run_finetune_stage(cfg, m, train_ds, seed),
            "without_consistency": lambda m: run_finetune_stage(
                cfg, m, train_ds, seed,
                mixed=mixedrank.MixedRankConfig(
                    p_init=cfg.mixed_config().p_init,
                    decay=cfg.raw["mixed_rank"]["decay"],
                    consistency_weight=0.0,
                ),
            ),
            "vanilla_finetune": lambda m: nn.train(m, train_ds, cfg.finetune_config(seed)),
        }
        for variant, runner in variants.items():
            model = factorized.copy()
            runner(model)
            consistency_rows.append(
                {"seed": seed, "variant": variant, "accuracy": nn.evaluate(model, eval_ds)}
            )

        for p_init in p_grid:
            model = factorized.copy()
            run_finetune_stage(
                cfg, model, train_ds, seed,
                mixed=mixedrank.MixedRankConfig(
                    p_init=float(p_init),
                    decay=cfg.raw["mixed_rank"]["decay"],
                    consistency_weight=cfg.mixed_config().consistency_weight,
                ),
            )
            p_rows.append(
                {"seed": seed, "p_init": p_init, "accuracy": nn.evaluate(model, eval_ds)}
            )

        for v_final in v_grid:
            sub = cfg.updated("schedule", v_final=v_final)
            model = build_model(sub, train_ds, seed)
            run_prune_stage(sub, model, train_ds, seed)
            run_factorize_stage(sub, model)
            run_finetune_stage(sub, model, train_ds, seed)
            v_rows.append(
                {"seed": seed, "v_final": v_final, "accuracy": nn.evaluate(model, eval_ds)}
            )

    files = {
        "weighting": write_csv(
            os.path.join(out, "ablate_weighting.csv"),
            weighting_rows,
            ["seed", "weighting", "accuracy_before", "accuracy_after"],
        ),
        "consistency": write_csv(
            os.path.join(out, "ablate_consistency.csv"),
            consistency_rows,
            ["seed", "variant", "accuracy"],
        ),
        "v_grid": write_csv(
            os.path.join(out, "ablate_v.csv"), v_rows, ["seed", "v_final", "accuracy"]
        ),
        "p_grid": write_csv(
            os.path.join(out, "ablate_pinit.csv"), p_rows, ["seed", "p_init", "accuracy"]
        ),
    }
    files["v_figure"] = plots.plot_lines(
        v_rows, "v_final", "accuracy", None,
        os.path.join(fig_dir, "ablate_v.png"),
        xlabel="final kept fraction", ylabel="accuracy",
    )
    files["p_figure"] = plots.plot_lines(
        p_rows, "p_init", "accuracy", None,
        os.path.join(fig_dir, "ablate_pinit.png"),
        xlabel="initial gate probability", ylabel="accuracy",
    )
    report = {
        "seeds": seeds,
        "rows": {
            "weighting": weighting_rows,
            "consistency": consistency_rows,
            "v_grid": v_rows,
            "p_grid": p_rows,
        },
        "files": files,
    }
    storage.write_json(os.path.join(out, "report.json"), report)
    return report
