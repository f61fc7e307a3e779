"""Command-line front end.

Subcommands: train, eval, ablate, sweep-layers, grad-check, report.
Exit codes: 0 success, 2 configuration error, 3 data error,
4 training divergence, 5 verification failure, 1 other I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_CHECK_FAILED = 5


def _limit_blas_threads():
    """Tiny matrices dominate; BLAS thread pools only add contention."""
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except Exception:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")


def _load_config(args):
    from .config import RunConfig

    rc = RunConfig.from_file(args.config) if args.config else RunConfig.default()
    if getattr(args, "seed", None) is not None:
        rc.set("run", "seed", args.seed)
    if getattr(args, "topology", None) is not None:
        rc.set("head", "topology", args.topology)
    if getattr(args, "out", None) is not None:
        rc.set("run", "out_dir", args.out)
    return rc


def cmd_train(args) -> int:
    from .report import run_training, write_run_outputs

    rc = _load_config(args)
    result = run_training(
        rc,
        epochs=args.epochs,
        map50_target=args.map50_target,
    )
    out_dir = rc.get("run", "out_dir")
    write_run_outputs(out_dir, result)
    for line in result.log_lines:
        print(line)
    if result.status != "ok":
        print(f"training FAILED: {result.metrics.get('error')}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"checkpoint + metric log written to {out_dir}")
    print(
        "final:",
        " ".join(f"{k}={v:.4f}" for k, v in result.metrics.items()),
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, load_into_head
    from .config import RunConfig
    from .data import build_dataset
    from .head import CSDNHead
    from .report import evaluate_head

    config_text, _ = load_checkpoint(args.checkpoint)
    rc = RunConfig.from_text(config_text)
    head = CSDNHead(rc.head_config(), seed=rc.get("run", "seed"))
    load_into_head(head, args.checkpoint)
    _, eval_split = build_dataset(
        rc.get("run", "seed"), rc.data_config(), rc.get("head", "embed_dim")
    )
    metrics = evaluate_head(
        head,
        eval_split,
        rc.get("nms", "conf_threshold"),
        rc.get("nms", "iou_threshold"),
        rc.get("head", "num_classes"),
    )
    print(" ".join(f"{k}={v:.6f}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .report import run_ablation

    rc = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    report = run_ablation(rc, seeds=seeds)
    out_dir = rc.get("run", "out_dir")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report.tsv())
    with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.text())
    print(report.text())
    return EXIT_OK


def cmd_sweep_layers(args) -> int:
    from .report import run_layer_sweep

    rc = _load_config(args)
    layers = [int(s) for s in args.layers.split(",")] if args.layers else None
    report = run_layer_sweep(rc, layer_choices=layers)
    out_dir = rc.get("run", "out_dir")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "layer_sweep.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report.tsv())
    with open(os.path.join(out_dir, "layer_sweep.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.text())
    print(report.text())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradsuite import TOLERANCE, run_gradient_suite

    t0 = time.time()
    worst = run_gradient_suite(num_seeds=args.seeds, epsilon=args.epsilon)
    failed = False
    for name, err in worst.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        if err >= TOLERANCE:
            failed = True
        print(f"{name:24s} max rel err {err:.3e}  {status}")
    print(f"gradient suite: {args.seeds} seeds in {time.time() - t0:.1f} s")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_report(args) -> int:
    """Re-render the aligned text table from a machine-readable TSV."""
    from .report import MatrixReport, RunResult, _aggregate, ordering_footnotes

    with open(args.input, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header, rows = lines[0].split("\t"), []
    for ln in lines[1:]:
        vals = dict(zip(header, ln.split("\t")))
        r = RunResult(
            topology=vals["group"],
            seed=int(vals["seed"]),
            num_layers=0,
            status=vals["status"],
            param_count=int(vals["params"]),
        )
        if r.status == "ok":
            r.metrics = {
                k: float(vals[k]) for k in ("precision", "recall", "map50", "map5095")
            }
        rows.append(r)
    agg = _aggregate(rows)
    report = MatrixReport(
        rows=rows,
        aggregated=agg,
        footnotes=ordering_footnotes(agg),
        header=f"# re-rendered from {args.input}\n",
    )
    print(report.text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="csdn",
        description="Context-gated scale-adaptive detection head harness",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="config file path (defaults built in)")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", help="override [run] out_dir")

    sp = sub.add_parser("train", help="train one model, write checkpoint + logs")
    common(sp)
    sp.add_argument("--topology", help="override [head] topology, e.g. n+b+d")
    sp.add_argument("--epochs", type=int, help="override [optim] epochs")
    sp.add_argument("--map50-target", type=float, dest="map50_target",
                    help="stop early once eval mAP50 reaches this")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on its eval split")
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="run the topology ablation matrix")
    common(sp)
    sp.add_argument("--seeds", help="comma-separated seed list")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("sweep-layers", help="run the layer-depth sweep")
    common(sp)
    sp.add_argument("--layers", help="comma-separated depth list, e.g. 2,4,6")
    sp.set_defaults(fn=cmd_sweep_layers)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    sp.add_argument("--seeds", type=int, default=50)
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.set_defaults(fn=cmd_grad_check)

    sp = sub.add_parser("report", help="re-render a text table from a TSV report")
    sp.add_argument("--input", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    _limit_blas_threads()
    from .errors import (
        CheckpointError,
        ConfigError,
        TrainingDivergenceError,
    )

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
