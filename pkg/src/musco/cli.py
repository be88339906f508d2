"""Command-line surface: analyze, compress, evbmf, gen-data, eval.

All commands are deterministic under a fixed seed and exit non-zero with a
diagnostic on bad inputs, without leaving partial output files behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .decomp import AlsOptions
from .driver import CompressionReport, MuscoConfig, musco_run
from .modelgraph import ModelGraph, count_flops, count_params, infer_shapes
from .rank_select import RankStrategy, evbmf_rank
from .serialize import ManifestError, load_dataset, load_model, save_model, write_synthetic
from .trainer import TrainConfig, evaluate

__all__ = ["main", "config_from_dict", "cmd_analyze", "cmd_compress", "cmd_evbmf"]


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def config_from_dict(raw: dict) -> tuple[MuscoConfig, dict]:
    """Build a run configuration from a parsed JSON document.

    Returns the config plus the leftover entries (dataset paths, seed).
    """
    raw = dict(raw)
    strat = raw.pop("strategy", {})
    strategy = RankStrategy(
        mode=strat.get("mode", "constant_rate"),
        weakening_factor=strat.get("weakening_factor", 0.8),
        alpha=strat.get("alpha", 2.0),
        beta=strat.get("beta", 1.0),
        min_rank_guard=strat.get("min_rank_guard", 21),
    )
    ft = raw.pop("finetune", {})
    finetune = TrainConfig(
        learning_rate=ft.get("learning_rate", 0.01),
        momentum=ft.get("momentum", 0.9),
        epochs=ft.get("epochs", 1),
        batch_size=ft.get("batch_size", 32),
        seed=ft.get("seed", raw.get("seed", 0)),
        weight_decay=ft.get("weight_decay", 0.0),
        patience=ft.get("patience", 3),
    )
    als = AlsOptions(seed=raw.get("seed", 0))
    cfg = MuscoConfig(
        strategy=strategy,
        steps=raw.pop("steps", 1),
        conv_scheme=raw.pop("conv_scheme", "tucker2"),
        fc_scheme=raw.pop("fc_scheme", "svd"),
        layer_fraction=raw.pop("layer_fraction", 1.0),
        target_global_ratio=raw.pop("target_global_ratio", None),
        rank_stabilization_window=raw.pop("rank_stabilization_window", 2),
        finetune=finetune,
        als=als,
    )
    return cfg, raw


def _report_to_dict(report: CompressionReport) -> dict:
    out = dataclasses.asdict(report)
    out["global_param_ratio"] = report.global_param_ratio
    out["global_flops_ratio"] = report.global_flops_ratio
    out["final_weight_params"] = report.final_weight_params
    out["rank_history"] = {str(k): v for k, v in report.rank_history.items()}
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_analyze(args: argparse.Namespace) -> int:
    g = load_model(args.model)
    input_shape = tuple(args.input_size) + (g.input_shape[2],) if args.input_size else None
    shape = tuple(input_shape) if input_shape else g.input_shape
    flops = count_flops(g, shape)
    params = count_params(g)
    shapes = infer_shapes(g if input_shape is None else
                          dataclasses.replace(g, input_shape=shape))

    member_to_group = {m: gr for gr in g.groups for m in gr.member_ids}
    rows = []
    print(f"input {shape[0]}x{shape[1]}x{shape[2]}")
    print(f"{'id':>4}  {'kind':<18} {'shape':<22} {'params':>12} {'MFLOPs':>9}")
    for layer, out_shape in zip(g.layers, shapes):
        w, b = params.per_layer[layer.id]
        macs = flops.per_layer[layer.id]
        tag = ""
        if layer.id in member_to_group:
            tag = f"  [{member_to_group[layer.id].scheme} of {member_to_group[layer.id].source_id}]"
        print(
            f"{layer.id:>4}  {layer.kind:<18} {layer.describe():<22} "
            f"{w + b:>12} {macs / 1e6:>9.0f}{tag}"
        )
        rows.append(
            {
                "id": layer.id,
                "kind": layer.kind,
                "shape": layer.describe(),
                "output_shape": list(out_shape),
                "weight_params": w,
                "bias_params": b,
                "macs": macs,
            }
        )
    groups = []
    for gr in g.groups:
        gmacs = sum(flops.per_layer[i] for i in gr.member_ids)
        gparams = sum(sum(params.per_layer[i]) for i in gr.member_ids)
        groups.append(
            {
                "source_id": gr.source_id,
                "scheme": gr.scheme,
                "ranks": list(gr.ranks),
                "member_ids": list(gr.member_ids),
                "weight_params": gparams,
                "macs": gmacs,
            }
        )
        print(
            f"group (source {gr.source_id}, {gr.scheme}, ranks {list(gr.ranks)}): "
            f"{gparams} params, {gmacs / 1e6:.0f} MFLOPs"
        )
    print(f"total params {params.total}  total MFLOPs {flops.total / 1e6:.0f}")

    doc = {
        "input_shape": list(shape),
        "layers": rows,
        "groups": groups,
        "total_params": params.total,
        "total_weight_params": params.weight_total,
        "total_macs": flops.total,
    }
    json_out = Path(args.json_out) if args.json_out else Path(
        str(args.model) + ".analysis.json"
    )
    json_out.write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def cmd_compress(args: argparse.Namespace) -> int:
    g = load_model(args.model)
    raw = json.loads(Path(args.config).read_text())
    cfg, extra = config_from_dict(raw)

    train_data = load_dataset(extra["train_images"], extra["train_labels"])
    eval_data = load_dataset(extra["eval_images"], extra["eval_labels"])
    for name, data in (("train", train_data), ("eval", eval_data)):
        if data[0].shape[1:] != tuple(g.input_shape):
            raise ValueError(
                f"{name} images {data[0].shape[1:]} do not match model input "
                f"{tuple(g.input_shape)}"
            )

    compressed, report = musco_run(g, train_data, eval_data, cfg)

    out_model = Path(args.out)
    save_model(compressed, out_model)
    report_path = Path(args.report) if args.report else out_model.with_suffix(".report.json")
    report_path.write_text(json.dumps(_report_to_dict(report), indent=2) + "\n")
    print(
        f"{report.run_name}: params {report.baseline_weight_params} -> "
        f"{report.final_weight_params} ({report.global_param_ratio:.2f}x), "
        f"stop: {report.stop_reason}"
    )
    return 0


def cmd_evbmf(args: argparse.Namespace) -> int:
    matrix = np.load(args.matrix)
    est = evbmf_rank(matrix)
    print(f"rank {est.rank}")
    print(f"noise_variance {est.noise_variance:.6g}")
    if est.degenerate:
        print("degenerate input (all zeros)")
    values = ", ".join(f"{v:.4f}" for v in est.retained_singular_values)
    print(f"retained_singular_values [{values}]")
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    images_path, labels_path = write_synthetic(
        args.out, classes=args.classes, samples=args.samples, size=args.size,
        seed=args.seed, template_seed=args.template_seed, noise=args.noise,
    )
    print(f"wrote {images_path} and {labels_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    g = load_model(args.model)
    data = load_dataset(args.images, args.labels)
    if data[0].shape[1:] != tuple(g.input_shape):
        raise ValueError(
            f"images {data[0].shape[1:]} do not match model input {tuple(g.input_shape)}"
        )
    acc, loss = evaluate(g, data)
    print(f"accuracy {acc:.4f}")
    print(f"loss {loss:.6f}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="musco",
        description="Iterative neural-network compression by low-rank factorization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="print a per-layer params/FLOPs table")
    p.add_argument("model", help="model manifest (JSON)")
    p.add_argument("--input-size", nargs=2, type=int, metavar=("H", "W"),
                   help="override the spatial input size")
    p.add_argument("--json-out", help="where to write the machine-readable table")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compress", help="run the compression loop on a model")
    p.add_argument("model", help="model manifest (JSON)")
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--out", required=True, help="output model manifest path")
    p.add_argument("--report", help="output report path (JSON)")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("evbmf", help="estimate the rank of a stored matrix")
    p.add_argument("matrix", help="matrix file (.npy)")
    p.set_defaults(func=cmd_evbmf)

    p = sub.add_parser("gen-data", help="generate a synthetic IDX dataset")
    p.add_argument("--out", required=True, help="output file prefix")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--size", type=int, default=28)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template-seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.15)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("eval", help="evaluate a model on an IDX dataset")
    p.add_argument("model", help="model manifest (JSON)")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ManifestError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
