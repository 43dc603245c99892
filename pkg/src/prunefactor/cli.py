"""Command-line interface.

Every subcommand exits 0 on success. On failure a single JSON line goes to
stderr ({"error": <type>, "message": <text>}) and the exit code is 1.
Artifact-producing commands write a report.json plus CSV tables and figures
under the output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import analysis, nn, pipeline, storage


def build_parser():
    parser = argparse.ArgumentParser(
        prog="prunefactor",
        description="Compress small dense classifiers: prune, factorize, fine-tune.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, func, config=True, checkpoint=False):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        else:
            p.add_argument("--checkpoint", default=None, help="checkpoint directory")
        p.set_defaults(func=func)
        return p

    add("train", "train a dense model", cmd_train)
    add("prune", "train while pruning to the scheduled kept fraction", cmd_prune)
    add("factorize", "factorize a pruned checkpoint", cmd_factorize, checkpoint=True)
    add("finetune", "mixed-rank fine-tune a factorized checkpoint", cmd_finetune, checkpoint=True)
    add("pipeline", "full prune/factorize/fine-tune run", cmd_pipeline)
    add("study", "budget sweep: pruning methods vs plain truncated SVD", cmd_study)
    add("ablate", "ablations over v, weighting, consistency, p_init", cmd_ablate)
    add("stats", "print model statistics for a checkpoint", cmd_stats,
        config=False, checkpoint=True)
    p = add("export-pattern", "write sparsity patterns of a checkpoint", cmd_export,
            config=False, checkpoint=True)
    p.add_argument("--layer", type=int, default=None, help="single layer index")
    return parser


def _setup(args):
    cfg = storage.load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = cfg.out_dir if args.out is None else args.out
    os.makedirs(out, exist_ok=True)
    return cfg, seed, out


def _finish(out, report):
    storage.write_json(os.path.join(out, "report.json"), report)
    print(json.dumps({"out": out, "report": os.path.join(out, "report.json")}))
    return 0


def cmd_train(args):
    from . import plots

    cfg, seed, out = _setup(args)
    train_ds, eval_ds = pipeline.dataset_pair(cfg)
    model = pipeline.build_model(cfg, train_ds, seed)
    losses = nn.train(model, train_ds, cfg.train_config(seed))
    ckpt = os.path.join(out, "model")
    storage.save_checkpoint(model, ckpt)
    fig_dir = os.path.join(out, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    report = {
        "seed": seed,
        "config": cfg.raw,
        "stages": [pipeline.stage_record("train", model, eval_ds, None, ckpt)],
        "files": {
            "losses": pipeline.write_csv(
                os.path.join(out, "losses.csv"),
                [{"stage": "train", "step": i, "loss": v} for i, v in enumerate(losses)],
                ["stage", "step", "loss"],
            ),
            "loss_figure": plots.plot_loss_curves({"train": losses}, os.path.join(fig_dir, "loss_curve.png")),
        },
    }
    return _finish(out, report)


def cmd_prune(args):
    cfg, seed, out = _setup(args)
    train_ds, eval_ds = pipeline.dataset_pair(cfg)
    if args.checkpoint:
        model = storage.load_checkpoint(args.checkpoint)
    else:
        model = pipeline.build_model(cfg, train_ds, seed)
    result = pipeline.run_prune_stage(cfg, model, train_ds, seed)
    ckpt = os.path.join(out, "step1_sparse")
    storage.save_checkpoint(model, ckpt)
    report = {
        "seed": seed,
        "config": cfg.raw,
        "stages": [pipeline.stage_record("prune", model, eval_ds, None, ckpt)],
        "files": {
            "prune_events": pipeline.write_csv(
                os.path.join(out, "prune_events.csv"),
                pipeline.prune_telemetry_rows(result.events),
                ["step", "layer", "v_t", "nonzeros", "numerical_rank"],
            )
        },
    }
    return _finish(out, report)


def cmd_factorize(args):
    cfg, seed, out = _setup(args)
    _, eval_ds = pipeline.dataset_pair(cfg)
    model = storage.load_checkpoint(args.checkpoint)
    fact_report = pipeline.run_factorize_stage(cfg, model)
    ckpt = os.path.join(out, "step2_factorized")
    storage.save_checkpoint(model, ckpt)
    record = pipeline.stage_record("factorize", model, eval_ds, None, ckpt)
    record["layer_ranks"] = {str(k): v for k, v in fact_report.layer_ranks.items()}
    record["reconstruction_errors"] = {str(k): v for k, v in fact_report.errors.items()}
    report = {"seed": seed, "config": cfg.raw, "stages": [record], "files": {}}
    return _finish(out, report)


def cmd_finetune(args):
    cfg, seed, out = _setup(args)
    train_ds, eval_ds = pipeline.dataset_pair(cfg)
    model = storage.load_checkpoint(args.checkpoint)
    result = pipeline.run_finetune_stage(cfg, model, train_ds, seed)
    ckpt = os.path.join(out, "final")
    storage.save_checkpoint(model, ckpt)
    report = {
        "seed": seed,
        "config": cfg.raw,
        "stages": [pipeline.stage_record("finetune", model, eval_ds, None, ckpt)],
        "files": {
            "losses": pipeline.write_csv(
                os.path.join(out, "finetune_losses.csv"),
                [
                    {"step": i, "p": p, "loss": l, "task_loss": t, "consistency": c}
                    for i, (p, l, t, c) in enumerate(
                        zip(result.p_history, result.losses,
                            result.task_losses, result.consistency_losses)
                    )
                ],
                ["step", "p", "loss", "task_loss", "consistency"],
            )
        },
    }
    return _finish(out, report)


def cmd_pipeline(args):
    cfg, seed, out = _setup(args)
    report = pipeline.lpaf_run(cfg, seed=seed, out_dir=out)
    print(json.dumps({"out": out, "report": report["files"]["report"]}))
    return 0


def cmd_study(args):
    cfg, seed, out = _setup(args)
    seeds = [seed + i for i in range(pipeline.NUM_SEEDS)]
    pipeline.preliminary_study(cfg, out_dir=out, seeds=seeds)
    print(json.dumps({"out": out, "report": os.path.join(out, "report.json")}))
    return 0


def cmd_ablate(args):
    cfg, seed, out = _setup(args)
    seeds = [seed + i for i in range(pipeline.NUM_SEEDS)]
    pipeline.ablation_suite(cfg, out_dir=out, seeds=seeds)
    print(json.dumps({"out": out, "report": os.path.join(out, "report.json")}))
    return 0


def cmd_stats(args):
    model = storage.load_checkpoint(args.checkpoint)
    stats = analysis.model_stats(model).as_dict()
    print(json.dumps(stats, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        storage.write_json(os.path.join(args.out, "stats.json"), stats)
        pipeline.write_csv(
            os.path.join(args.out, "layers.csv"),
            [
                {**e, "shape": f"{e['shape'][0]}x{e['shape'][1]}", "k": "" if e["k"] is None else e["k"]}
                for e in stats["layers"]
            ],
        )
    return 0


def cmd_export(args):
    if not args.out:
        raise ValueError("--out is required for export-pattern")
    model = storage.load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    indices = range(len(model.layers)) if args.layer is None else [args.layer]
    written = []
    for i in indices:
        lay = model.layers[i]
        if lay.kind != nn.SPARSE:
            if args.layer is not None:
                raise ValueError(f"layer {i} is not sparse")
            continue
        base = os.path.join(args.out, f"pattern_layer{i}")
        analysis.sparsity_pattern_export(lay, base + ".pgm", base + "_rows.csv")
        written += [base + ".pgm", base + "_rows.csv"]
    if not written:
        raise ValueError("checkpoint has no sparse layers")
    print(json.dumps({"files": written}))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one machine-readable line, nonzero exit
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
