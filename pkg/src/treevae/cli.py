"""Command-line entry points: train, eval, generate, export-tree."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ConfigError, DataConfig, RunConfig, _build, config_to_dict, dump_config, load_config
from .data import Dataset, MissingData, load_dataset, synthetic_hierarchical
from .generative import reconstruct, sample_conditional, sample_unconditional
from .inference import ShapeMismatch
from .metrics import assign_leaves, evaluate
from .model import ConfigMismatch, CorruptCheckpoint, checkpoint_extra, load_checkpoint, save_checkpoint
from .plotting import plot_image_grid, plot_training_curves, plot_tree
from .trainer import NumericalFailure, TERMS, run_growing_loop

log = logging.getLogger("treevae")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
METRIC_COLUMNS = ("dataset", "seed", "DP", "LP", "ACC", "NMI", "LL", "RL", "ELBO")
LOG_COLUMNS = ("phase", "epoch", "beta", "n_leaves", *TERMS, "total", "elbo")
CHECKPOINT = "final_checkpoint.zip"


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def load_data(dc: DataConfig, seed: int) -> Dataset:
    if dc.name == "synthetic":
        return synthetic_hierarchical(dc.n, dc.dim, dc.n_clusters, dc.separation, seed=seed, n_test=dc.n_test)
    return load_dataset(dc.name, dc.root, dc.subset, seed=seed)


def resolve_arch(cfg: RunConfig, data: Dataset) -> None:
    if cfg.arch.input_shape is None:
        cfg.arch.input_shape = data.input_shape
    elif tuple(cfg.arch.input_shape) != data.input_shape:
        raise ShapeMismatch(f"dataset shape {data.input_shape} does not match arch.input_shape "
                            f"{tuple(cfg.arch.input_shape)}")
    if cfg.arch.likelihood is None:
        cfg.arch.likelihood = data.likelihood


def _fmt(v) -> str:
    return v if isinstance(v, str) else f"{v:.6f}" if isinstance(v, float) else str(v)


def write_metrics(path: Path, dataset: str, seed: int, metrics: dict) -> None:
    row = {"dataset": dataset, "seed": seed, **{k: float(metrics[k]) for k in METRIC_COLUMNS[2:]}}
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerow([_fmt(row[k]) for k in METRIC_COLUMNS])


def write_log(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in LOG_COLUMNS])


def _is_image(shape) -> bool:
    return len(shape) == 3


def _leaf_summary(m, x, y) -> tuple[dict, dict]:
    hard, _ = assign_leaves(m, x)
    labels, means = {}, {}
    for leaf in m.topology.sorted_leaves:
        rows = hard == leaf
        count = int(rows.sum())
        if count and y is not None:
            top = int(np.bincount(y[rows]).argmax())
            labels[leaf] = f"n={count}\nmaj={top}"
        else:
            labels[leaf] = f"n={count}"
        if count and _is_image(x.shape[1:]):
            img = x[torch.from_numpy(rows)].float().mean(0).numpy()
            means[leaf] = img[0] if img.shape[0] == 1 else np.moveaxis(img, 0, -1)
    return labels, means


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.dataset:
        cfg.data.name = args.dataset
    if args.deterministic is not None:
        cfg.deterministic = args.deterministic
    out = Path(args.out or cfg.out)
    cfg.out = str(out)
    set_deterministic(cfg.deterministic)
    data = load_data(cfg.data, cfg.seed)
    resolve_arch(cfg, data)
    cfg.check()
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")

    x = data.x_train.double() if cfg.arch.dtype == "float64" else data.x_train
    model, report = run_growing_loop(cfg, x)
    write_log(out / "train_log.csv", report.rows)
    (out / "topology.json").write_text(model.topology.to_json(indent=1))
    (out / "snapshots.json").write_text(json.dumps(
        [{"event": e, "topology": t} for e, t in report.snapshots], indent=1))
    save_checkpoint(model, out / CHECKPOINT, extra={"data": config_to_dict(cfg.data), "seed": cfg.seed,
                                                    "occupancy": {str(k): v for k, v in report.occupancy.items()}})

    xt = data.x_test.double() if cfg.arch.dtype == "float64" else data.x_test
    metrics = evaluate(model, xt, data.y_test, K=cfg.eval.iw_samples, mc_samples=cfg.eval.mc_samples,
                       seed=cfg.seed, iw_max_points=cfg.eval.iw_max_points)
    write_metrics(out / "metrics.csv", data.name, cfg.seed, metrics)

    plot_training_curves(report.rows, out / "training_curves.png")
    labels, means = _leaf_summary(model, xt, data.y_test)
    plot_tree(model.topology, out / "tree.png", labels, means or None)
    if _is_image(data.input_shape):
        _write_generation(model, "unconditional", 5, cfg.seed, out / "generations_unconditional.png", data)
    log.info("metrics: %s", {k: round(v, 4) for k, v in metrics.items()})
    print(out)
    return 0


def _dataset_for_checkpoint(path: Path, name: Optional[str], seed: Optional[int]) -> tuple[Dataset, int]:
    extra = checkpoint_extra(path)
    raw = dict(extra.get("data", {}))
    if name and name != raw.get("name"):
        raw = {"name": name}
    dc = _build(DataConfig, raw)
    seed = extra.get("seed", 0) if seed is None else seed
    return load_data(dc, seed), seed


def _check_shape(model, data: Dataset) -> None:
    if data.input_shape != model.input_shape:
        raise ShapeMismatch(f"dataset {data.name} has input shape {data.input_shape} but the checkpoint "
                            f"expects {model.input_shape}")


def cmd_eval(args) -> int:
    set_deterministic(args.deterministic is not False)
    model = load_checkpoint(args.checkpoint)
    data, seed = _dataset_for_checkpoint(Path(args.checkpoint), args.dataset, args.seed)
    _check_shape(model, data)
    x = data.x_test.to(next(model.parameters()).dtype)
    metrics = evaluate(model, x, data.y_test, K=args.K, seed=seed)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics_eval.csv" if args.out is None else out / "metrics.csv", data.name, seed, metrics)
    print(json.dumps({k: round(v, 6) for k, v in metrics.items()}))
    return 0


def _write_generation(model, mode: str, n: int, seed: int, path: Path, data: Optional[Dataset]) -> Path:
    gen = torch.Generator().manual_seed(seed)
    leaves = model.topology.sorted_leaves
    image = _is_image(model.input_shape)
    if not image:
        path = path.with_suffix(".csv")
    if mode == "unconditional":
        res = sample_unconditional(model, n, gen)
        if image:
            grid = [[res.outputs[l][i].numpy() for l in leaves] for i in range(n)]
            plot_image_grid(grid, path, col_titles=[f"leaf {l}" for l in leaves])
        else:
            rows = [[i, l, *res.outputs[l][i].tolist()] for i in range(n) for l in leaves]
            _write_rows(path, ["sample", "leaf"], rows)
    elif mode == "conditional":
        res = sample_conditional(model, n, gen)
        if image:
            cols = min(n, 10)
            nrows = -(-n // cols)
            grid = [[res.samples[r * cols + c].numpy() if r * cols + c < n else np.zeros(model.input_shape)
                     for c in range(cols)] for r in range(nrows)]
            plot_image_grid(grid, path)
        else:
            rows = [[i, int(res.path[i]), *res.samples[i].tolist()] for i in range(n)]
            _write_rows(path, ["sample", "leaf"], rows)
    else:
        if data is None:
            raise MissingData("reconstruct mode needs a dataset")
        x = data.x_test[:n].to(next(model.parameters()).dtype)
        recs, weights = reconstruct(model, x, M=1, rng=gen)
        mixed = sum(weights[:, j].view(-1, *[1] * (x.dim() - 1)) * recs[l] for j, l in enumerate(leaves))
        if image:
            plot_image_grid([[x[i].numpy(), mixed[i].numpy()] for i in range(n)], path,
                            col_titles=["input", "reconstruction"])
        else:
            rows = [[i, kind, *v[i].tolist()] for i in range(n) for kind, v in (("input", x), ("recon", mixed))]
            _write_rows(path, ["sample", "kind"], rows)
    return path


def _write_rows(path: Path, head: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        width = len(rows[0]) - len(head) if rows else 0
        w.writerow(head + [f"x{i}" for i in range(width)])
        w.writerows(rows)


def cmd_generate(args) -> int:
    set_deterministic(args.deterministic is not False)
    model = load_checkpoint(args.checkpoint)
    data = None
    if args.mode == "reconstruct":
        data, _ = _dataset_for_checkpoint(Path(args.checkpoint), args.dataset, args.seed)
        _check_shape(model, data)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    path = _write_generation(model, args.mode, args.n, args.seed or 0, out / f"generate_{args.mode}.png", data)
    print(path)
    return 0


def tree_export(model, data: Optional[Dataset], top_k: int) -> dict:
    doc = model.topology.to_dict()
    if data is not None:
        x = data.x_test.to(next(model.parameters()).dtype)
        hard, soft = assign_leaves(model, x)
        leaves = model.topology.sorted_leaves
        doc["leaf_counts"] = {str(l): int((hard == l).sum()) for l in leaves}
        doc["expected_counts"] = {str(l): float(soft[:, j].sum()) for j, l in enumerate(leaves)}
        reps = {}
        for j, l in enumerate(leaves):
            order = np.lexsort((np.arange(len(soft)), -soft[:, j]))  # highest reach first, then index
            reps[str(l)] = [int(i) for i in order[:top_k]]
        doc["representatives"] = reps
    return doc


def to_dot(doc: dict) -> str:
    counts = doc.get("leaf_counts", {})
    lines = ["digraph tree {", "  node [shape=circle, fontsize=10];"]
    for node in doc["nodes"]:
        n = node["id"]
        label = str(n) if str(n) not in counts else f"{n}\\nn={counts[str(n)]}"
        shape = "box" if not node["children"] else "circle"
        lines.append(f'  n{n} [label="{label}", shape={shape}];')
    for node in doc["nodes"]:
        for c in node["children"] or []:
            lines.append(f"  n{node['id']} -> n{c};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_export_tree(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = None
    if args.dataset or checkpoint_extra(args.checkpoint).get("data"):
        data, _ = _dataset_for_checkpoint(Path(args.checkpoint), args.dataset, args.seed)
        _check_shape(model, data)
    doc = tree_export(model, data, args.top_k)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"tree.{args.format}")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=1) if args.format == "json" else to_dot(doc))
    print(out)
    return 0


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treevae", description="Tree-structured variational autoencoder")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output directory (or file for export-tree)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dataset", help="dataset name; overrides the config or checkpoint")
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)

    t = sub.add_parser("train", help="grow and train a tree, then evaluate on the test split")
    t.add_argument("--config", required=True)
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--K", type=int, default=1000, help="importance samples for the log-likelihood")
    common(e)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="sample images or vectors from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--mode", required=True, choices=["conditional", "unconditional", "reconstruct"])
    g.add_argument("--n", type=int, default=8)
    common(g)
    g.set_defaults(func=cmd_generate)

    x = sub.add_parser("export-tree", help="write the learned tree as JSON or DOT")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--format", choices=["json", "dot"], default="json")
    x.add_argument("--top-k", type=int, default=8, help="representative samples per leaf")
    common(x)
    x.set_defaults(func=cmd_export_tree)
    return p


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingData, ShapeMismatch, CorruptCheckpoint, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
