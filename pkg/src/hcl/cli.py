"""Command-line surface: data generation, training, embedding, evaluation,
and ablation runs.

Heavy imports happen inside main() so the HCL_THREADS cap can be applied
to the numerical backend before it loads.
"""

from __future__ import annotations

import argparse
import os
import sys


class UsageError(Exception):
    pass


def _apply_thread_cap() -> None:
    cap = os.environ.get("HCL_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="hcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-sbm", help="generate a stochastic-block-model graph")
    p.add_argument("--out", required=True, help="output graph directory")
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--nodes-per-block", type=int, default=100)
    p.add_argument("--p-in", type=float, default=0.1)
    p.add_argument("--p-out", type=float, default=0.01)
    p.add_argument("--feature-noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on one graph")
    p.add_argument("--graph", required=True, help="graph directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--scales", type=int,
                   help="total scale count (1 = no pooling); truncates pool_ratios")
    p.add_argument("--input-mode", choices=("adjacency", "diffusion"))

    p = sub.add_parser("embed", help="export node embeddings from a trained run")
    p.add_argument("--model", required=True, help="run directory or checkpoint file")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="embedding file to write")

    p = sub.add_parser("probe", help="linear-probe classification of embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--graph", required=True, help="graph directory with labels")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("cluster", help="k-means clustering of embeddings (NMI/ARI)")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--graph", required=True, help="graph directory with labels")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--k", type=int, help="cluster count (default: #classes)")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval-graph",
                       help="graph-level classification via averaged node embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--graphs", required=True,
                   help="directory of graph subdirectories plus labels.tsv")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="side-by-side runs along one config axis")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--axis", required=True,
                   choices=("scales", "pooling_gate", "channels", "input_mode"))
    p.add_argument("--config", help="base config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int, default=5, help="probe repetitions")
    return parser


def _resolve_config(args, trainer):
    config = trainer.load_config(args.config) if args.config else trainer.TrainConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "input_mode", None) is not None:
        updates["input_mode"] = args.input_mode
    if getattr(args, "scales", None) is not None:
        if args.scales < 1:
            raise UsageError("--scales must be >= 1")
        if args.scales > len(config.pool_ratios) + 1:
            raise UsageError(
                f"--scales {args.scales} exceeds the configured "
                f"{len(config.pool_ratios) + 1} scales")
        updates["pool_ratios"] = config.pool_ratios[:args.scales - 1]
    if updates:
        from dataclasses import replace
        config = replace(config, **updates)
    return config.validate()


def _graph_input_files(path, graph_data):
    names = (graph_data.EDGE_FILE, graph_data.FEATURE_FILE,
             graph_data.LABEL_FILE, graph_data.MASK_FILE)
    return {name: os.path.join(path, name) for name in names
            if os.path.exists(os.path.join(path, name))}


def _cmd_gen_sbm(args) -> int:
    from . import graph_data
    graph = graph_data.generate_sbm(args.blocks, args.nodes_per_block, args.p_in,
                                    args.p_out, args.feature_noise, args.seed)
    graph_data.save_graph_dir(graph, args.out)
    print(f"wrote {graph.n}-node graph to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from . import graph_data, trainer
    config = _resolve_config(args, trainer)
    graph = graph_data.load_graph_dir(args.graph)
    model = trainer.HclModel(config, graph.features.shape[1])
    result = trainer.train(model, graph)
    os.makedirs(args.out, exist_ok=True)
    trainer.save_model(model, os.path.join(args.out, "checkpoint.hcl"))
    trainer.write_loss_trace(os.path.join(args.out, "loss_trace.csv"), result, config)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(trainer.config_to_text(config))
    print(f"trained {result.epochs_run} epochs; best loss "
          f"{result.best_loss:.6f} at epoch {result.best_epoch}")
    return 0


def _find_checkpoint(model_path: str) -> str:
    if os.path.isdir(model_path):
        model_path = os.path.join(model_path, "checkpoint.hcl")
    if not os.path.exists(model_path):
        raise FileNotFoundError(f"missing checkpoint: {model_path}")
    return model_path


def _cmd_embed(args) -> int:
    from . import evaluate, graph_data, trainer
    model = trainer.load_model(_find_checkpoint(args.model))
    graph = graph_data.load_graph_dir(args.graph)
    embeddings = trainer.embed(model, graph)
    evaluate.save_embeddings(args.out, embeddings)
    print(f"wrote {embeddings.shape[0]}x{embeddings.shape[1]} embeddings to {args.out}")
    return 0


def _require_labels(graph, where: str):
    if graph.labels is None:
        raise ValueError(f"graph at {where} has no labels to evaluate against")


def _cmd_probe(args) -> int:
    from . import evaluate, graph_data
    graph = graph_data.load_graph_dir(args.graph)
    _require_labels(graph, args.graph)
    embeddings = evaluate.load_embeddings(args.embeddings)
    masks = graph.masks if graph.mask_train is not None else None
    result = evaluate.linear_probe(embeddings, graph.labels, masks=masks,
                                   runs=args.runs, seed=args.seed)
    hashes = {"embeddings": evaluate.content_hash([args.embeddings])}
    hashes.update({k: evaluate.content_hash([v])
                   for k, v in _graph_input_files(args.graph, graph_data).items()})
    report = evaluate.format_report(
        "linear probe", f"runs = {args.runs}\nseed = {args.seed}\n", hashes,
        [args.seed], {
            "runs": result.runs,
            "accuracy_mean": f"{result.accuracy_mean:.6f}",
            "accuracy_std": f"{result.accuracy_std:.6f}",
        })
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report)
    print(f"probe accuracy {result.accuracy_mean:.4f} +- {result.accuracy_std:.4f}")
    return 0


def _cmd_cluster(args) -> int:
    from . import evaluate, graph_data
    graph = graph_data.load_graph_dir(args.graph)
    _require_labels(graph, args.graph)
    embeddings = evaluate.load_embeddings(args.embeddings)
    result = evaluate.cluster_eval(embeddings, graph.labels, k=args.k,
                                   runs=args.runs, seed=args.seed)
    hashes = {"embeddings": evaluate.content_hash([args.embeddings])}
    report = evaluate.format_report(
        "k-means clustering", f"k = {args.k}\nruns = {args.runs}\nseed = {args.seed}\n",
        hashes, [args.seed], {
            "runs": result.runs,
            "nmi": f"{result.nmi:.6f}",
            "ari": f"{result.ari:.6f}",
        })
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report)
    print(f"clustering NMI {result.nmi:.4f}, ARI {result.ari:.4f}")
    return 0


def _cmd_eval_graph(args) -> int:
    import numpy as np

    from . import evaluate, graph_data, trainer
    model = trainer.load_model(_find_checkpoint(args.model))
    subdirs = sorted(d for d in os.listdir(args.graphs)
                     if os.path.isdir(os.path.join(args.graphs, d)))
    if not subdirs:
        raise FileNotFoundError(f"no graph subdirectories under {args.graphs}")
    label_path = os.path.join(args.graphs, "labels.tsv")
    if not os.path.exists(label_path):
        raise FileNotFoundError(f"missing graph labels: {label_path}")
    with open(label_path, "r", encoding="utf-8") as fh:
        labels = np.array([int(line.strip()) for line in fh if line.strip()],
                          dtype=np.int64)
    if labels.shape[0] != len(subdirs):
        raise ValueError(
            f"{labels.shape[0]} labels for {len(subdirs)} graph directories")
    per_graph = [trainer.embed(model, graph_data.load_graph_dir(
        os.path.join(args.graphs, d))) for d in subdirs]
    graph_embs = evaluate.graph_level_embed(per_graph)
    result = evaluate.graph_classify(graph_embs, labels, seed=args.seed)
    report = evaluate.format_report(
        "graph classification (10-fold linear probe)",
        trainer.config_to_text(model.config), {"labels": evaluate.content_hash(
            [label_path])}, [args.seed], {
            "graphs": len(subdirs),
            "folds": result.runs,
            "accuracy_mean": f"{result.accuracy_mean:.6f}",
            "accuracy_std": f"{result.accuracy_std:.6f}",
        })
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report)
    print(f"graph classification accuracy {result.accuracy_mean:.4f} "
          f"+- {result.accuracy_std:.4f}")
    return 0


def _ablation_variants(axis: str, config):
    from dataclasses import replace
    if axis == "scales":
        return [(f"scales={i + 1}", replace(config, pool_ratios=config.pool_ratios[:i]))
                for i in range(len(config.pool_ratios) + 1)]
    if axis == "pooling_gate":
        return [("gate=on", replace(config, pooling_gate=True)),
                ("gate=off", replace(config, pooling_gate=False))]
    if axis == "channels":
        return [("channels=dual", replace(config, channels="dual")),
                ("channels=single", replace(config, channels="single"))]
    if axis == "input_mode":
        return [("input=adjacency", replace(config, input_mode="adjacency")),
                ("input=diffusion", replace(config, input_mode="diffusion"))]
    raise UsageError(f"unknown ablation axis {axis!r}")


def _cmd_ablate(args) -> int:
    from . import evaluate, graph_data, trainer
    config = _resolve_config(args, trainer)
    graph = graph_data.load_graph_dir(args.graph)
    _require_labels(graph, args.graph)
    masks = graph.masks if graph.mask_train is not None else None

    rows = []
    for label, variant in _ablation_variants(args.axis, config):
        model = trainer.HclModel(variant, graph.features.shape[1])
        trainer.train(model, graph)
        embeddings = trainer.embed(model, graph)
        probe = evaluate.linear_probe(embeddings, graph.labels, masks=masks,
                                      runs=args.runs, seed=variant.seed)
        clusters = evaluate.cluster_eval(embeddings, graph.labels,
                                         runs=max(1, args.runs), seed=variant.seed)
        rows.append((label, probe, clusters))

    width = max(len(r[0]) for r in rows)
    table = [f"{'variant':<{width}}  acc_mean  acc_std   nmi       ari"]
    for label, probe, clusters in rows:
        table.append(f"{label:<{width}}  {probe.accuracy_mean:.6f}  "
                     f"{probe.accuracy_std:.6f}  {clusters.nmi:.6f}  {clusters.ari:.6f}")
    hashes = {k: evaluate.content_hash([v])
              for k, v in _graph_input_files(args.graph, graph_data).items()}
    report = evaluate.format_report(
        f"ablation along {args.axis}", trainer.config_to_text(config), hashes,
        [config.seed], {"runs": args.runs, "table": "\n" + "\n".join(table)})
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report)
    print("\n".join(table))
    return 0


_COMMANDS = {
    "gen-sbm": _cmd_gen_sbm,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "probe": _cmd_probe,
    "cluster": _cmd_cluster,
    "eval-graph": _cmd_eval_graph,
    "ablate": _cmd_ablate,
}


def run(argv=None) -> int:
    """Parse and dispatch; returns the process exit code."""
    _apply_thread_cap()
    parser = _build_parser()
    from . import checkpoint, graph_data, trainer
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, graph_data.GraphFormatError,
            trainer.ConfigError, checkpoint.CheckpointError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except trainer.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
