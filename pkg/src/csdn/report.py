"""Run orchestration and report emission.

Builds datasets and heads from a RunConfig, runs training/evaluation,
the seven-topology ablation matrix, and the layer-depth sweep.  Reports
come in two forms: tab-separated values (machine-readable, one row per
run) and an aligned text table whose header embeds the canonical config
and seed list.  Ordering checks print footnotes with the measured means
when they fail.
"""

from __future__ import annotations

import copy
import os
import statistics
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import build_dataset
from .errors import TrainingDivergenceError
from .evaluation import decode_detections, evaluate
from .geometry import nms
from .head import CSDNHead, HeadConfig, parse_topology
from .tensor import no_grad
from .training import DetectionLossConfig, train


def format_metric_line(record: dict) -> str:
    """Deterministic key=value line; floats via repr for bit-stable logs."""
    parts = []
    for key, val in record.items():
        if isinstance(val, float):
            parts.append(f"{key}={val!r}")
        else:
            parts.append(f"{key}={val}")
    return " ".join(parts)


def evaluate_head(head: CSDNHead, eval_samples, conf_threshold: float,
                  iou_threshold: float, num_classes: int) -> dict:
    dets, gts = [], []
    with no_grad():
        for pyramid, gt_boxes, gt_classes, _ in eval_samples:
            out = head.forward(pyramid)
            decoded = decode_detections(out.final.logits.data, out.final.boxes.data)
            dets.append(nms(decoded, conf_threshold, iou_threshold))
            gts.append((gt_boxes, gt_classes))
    r = evaluate(dets, gts, num_classes)
    return {
        "precision": r.precision,
        "recall": r.recall,
        "map50": r.map50,
        "map5095": r.map5095,
    }


def per_layer_param_count(cfg: HeadConfig) -> int:
    probe0 = CSDNHead(
        HeadConfig(**{**cfg.__dict__, "num_layers": 0}), seed=0
    ).parameter_count()
    probe1 = CSDNHead(
        HeadConfig(**{**cfg.__dict__, "num_layers": 1}), seed=0
    ).parameter_count()
    return probe1 - probe0


def balanced_ffn_hidden(rc: RunConfig, topology: str, ablate: bool) -> Optional[int]:
    """Widen the FFN so per-layer parameter counts match the largest
    topology's (the shared budget policy for comparable ablation rows)."""
    if rc.get("ablate", "param_budget") != "ffn-balance":
        return None
    topologies = rc.get("ablate", "topologies")
    base = {
        t: per_layer_param_count(rc.head_config(topology=t, ablate=ablate))
        for t in set(topologies) | {topology}
    }
    target = max(base.values())
    cfg = rc.head_config(topology=topology, ablate=ablate)
    deficit = target - base[topology]
    d = cfg.embed_dim
    extra = int(round(deficit / (2 * d + 1)))
    return cfg.ffn_hidden + extra


@dataclass
class RunResult:
    topology: str
    seed: int
    num_layers: int
    status: str  # "ok" or "FAILED"
    metrics: dict = field(default_factory=dict)
    param_count: int = 0
    log_lines: list = field(default_factory=list)
    head: Optional[CSDNHead] = None
    config_text: str = ""


def effective_config(rc: RunConfig, head_cfg, data_cfg, seed: int,
                     epochs: Optional[int]) -> RunConfig:
    """Resolve overrides into a standalone config that rebuilds this run."""
    eff = RunConfig(values=copy.deepcopy(rc.values))
    eff.set("run", "seed", seed)
    for key in ("num_layers", "num_queries", "embed_dim", "num_heads",
                "num_classes", "topology", "pos_encoding",
                "deformable_points", "ffn_hidden"):
        eff.set("head", key, getattr(head_cfg, key))
    eff.set("data", "train_scenes", data_cfg.train_scenes)
    eff.set("data", "eval_scenes", data_cfg.eval_scenes)
    eff.set("data", "max_objects", data_cfg.scene.max_objects)
    eff.set("data", "level_sizes", list(data_cfg.level_sizes))
    if epochs is not None:
        eff.set("optim", "epochs", epochs)
    return eff


def run_training(
    rc: RunConfig,
    topology: Optional[str] = None,
    seed: Optional[int] = None,
    num_layers: Optional[int] = None,
    epochs: Optional[int] = None,
    ablate: bool = False,
    ffn_hidden: Optional[int] = None,
    map50_target: Optional[float] = None,
) -> RunResult:
    """One full train+eval run; FAILED status on divergence."""
    seed = rc.get("run", "seed") if seed is None else seed
    topology = rc.get("head", "topology") if topology is None else topology
    if ffn_hidden is None and ablate:
        ffn_hidden = balanced_ffn_hidden(rc, topology, ablate)
    head_cfg = rc.head_config(
        topology=topology, num_layers=num_layers, ffn_hidden=ffn_hidden, ablate=ablate
    )
    data_cfg = rc.data_config(ablate=ablate)
    optim = rc.optim_config()
    if epochs is None and ablate:
        epochs = rc.get("ablate", "epochs")
    num_classes = head_cfg.num_classes
    conf_thr = rc.get("nms", "conf_threshold")
    iou_thr = rc.get("nms", "iou_threshold")

    train_split, eval_split = build_dataset(seed, data_cfg, head_cfg.embed_dim)
    train_samples = [(p, b, c) for p, b, c, _ in train_split]
    head = CSDNHead(head_cfg, seed=seed)
    loss_cfg = DetectionLossConfig(num_classes=num_classes)

    log_lines: list[str] = []
    state = {"stop": False, "best": 0.0}

    def eval_fn(h):
        return evaluate_head(h, eval_split, conf_thr, iou_thr, num_classes)

    def on_epoch(receps):
        m = receps.eval_metrics or {}
        state["best"] = max(state["best"], m.get("map50", 0.0))
        rec = {
            "epoch": receps.epoch,
            "step": receps.step,
            "total": receps.loss.total,
            "cls": receps.loss.cls,
            "l1": receps.loss.l1,
            "giou": receps.loss.giou,
        }
        rec.update(m)
        log_lines.append(format_metric_line(rec))

    result = RunResult(
        topology=topology,
        seed=seed,
        num_layers=head_cfg.num_layers,
        status="ok",
        param_count=head.parameter_count(),
        head=head,
        config_text=effective_config(
            rc, head_cfg, data_cfg, seed, epochs
        ).canonical_text(),
    )
    stop_fn = None
    if map50_target is not None:
        stop_fn = lambda rec: state["best"] >= map50_target
    try:
        epochs_eff = optim.epochs if epochs is None else epochs
        train(head, train_samples, loss_cfg, optim, seed=seed,
              epochs=epochs_eff, evaluate_fn=eval_fn, on_epoch=on_epoch,
              stop_fn=stop_fn)
    except TrainingDivergenceError as exc:
        result.status = "FAILED"
        result.metrics = {"error": str(exc)}
        result.head = None
        result.log_lines = log_lines
        return result
    result.metrics = eval_fn(head)
    result.metrics["best_map50"] = state["best"]
    result.log_lines = log_lines
    return result


# ---------------------------------------------------------------------------
# Ablation matrix and layer sweep
# ---------------------------------------------------------------------------


@dataclass
class MatrixReport:
    rows: list  # RunResult per (topology/layers, seed)
    aggregated: list  # dict per group
    footnotes: list
    header: str

    def tsv(self) -> str:
        cols = ["group", "seed", "status", "precision", "recall",
                "map50", "map5095", "params"]
        lines = ["\t".join(cols)]
        for r in self.rows:
            lines.append("\t".join([
                str(r.topology if isinstance(r.topology, str) else r.topology),
                str(r.seed),
                r.status,
                _fmt(r.metrics.get("precision")),
                _fmt(r.metrics.get("recall")),
                _fmt(r.metrics.get("map50")),
                _fmt(r.metrics.get("map5095")),
                str(r.param_count),
            ]))
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        out = [self.header]
        cols = ["group", "P", "R", "mAP50", "mAP50-95", "params", "runs"]
        widths = [10, 7, 7, 15, 15, 9, 5]
        out.append("".join(c.ljust(w) for c, w in zip(cols, widths)))
        for g in self.aggregated:
            row = [
                str(g["group"]).ljust(widths[0]),
                f"{g['precision']:.3f}".ljust(widths[1]),
                f"{g['recall']:.3f}".ljust(widths[2]),
                f"{g['map50']:.3f}±{g['map50_std']:.3f}".ljust(widths[3]),
                f"{g['map5095']:.3f}±{g['map5095_std']:.3f}".ljust(widths[4]),
                str(g["params"]).ljust(widths[5]),
                f"{g['ok']}/{g['total']}".ljust(widths[6]),
            ]
            out.append("".join(row))
        if self.footnotes:
            out.append("")
            out.extend(f"note: {n}" for n in self.footnotes)
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _aggregate(rows, key=lambda r: r.topology):
    groups: dict = {}
    for r in rows:
        groups.setdefault(key(r), []).append(r)
    out = []
    for name, rs in groups.items():
        ok = [r for r in rs if r.status == "ok"]
        def mean(metric):
            return statistics.fmean(r.metrics[metric] for r in ok) if ok else 0.0
        def std(metric):
            vals = [r.metrics[metric] for r in ok]
            return statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append({
            "group": name,
            "precision": mean("precision"),
            "recall": mean("recall"),
            "map50": mean("map50"),
            "map50_std": std("map50"),
            "map50_sem": std("map50") / max(1, len(ok)) ** 0.5,
            "map5095": mean("map5095"),
            "map5095_std": std("map5095"),
            "params": rs[0].param_count,
            "ok": len(ok),
            "total": len(rs),
        })
    return out


def _header(rc: RunConfig, title: str, seeds) -> str:
    cfg_lines = "".join(f"# {line}\n" for line in rc.canonical_text().splitlines())
    return (
        f"# {title}\n"
        f"# seeds: {','.join(str(s) for s in seeds)}\n"
        f"{cfg_lines}"
    )


def ordering_footnotes(aggregated) -> list[str]:
    """Check the qualitative orderings; report measured means on failure."""
    by = {g["group"]: g for g in aggregated}
    notes = []
    if "s-d" in by and "s+d" in by:
        sd, spd = by["s-d"]["map50"], by["s+d"]["map50"]
        if spd < sd:
            notes.append(
                f"ordering holds: s+d mean mAP50 {spd:.3f} < s-d {sd:.3f}"
            )
        else:
            notes.append(
                f"ORDERING FAILED: s+d mean mAP50 {spd:.3f} >= s-d {sd:.3f}"
            )
    if "n+b+d" in by:
        nbd = by["n+b+d"]["map50"]
        for name in ("s+d", "b+d", "n+d"):
            if name not in by:
                continue
            bar = by[name]["map50"] - by[name]["map50_sem"]
            if nbd >= bar:
                notes.append(
                    f"ordering holds: n+b+d mean mAP50 {nbd:.3f} >= "
                    f"{name} mean - 1 SE ({bar:.3f})"
                )
            else:
                notes.append(
                    f"ORDERING FAILED: n+b+d mean mAP50 {nbd:.3f} < "
                    f"{name} mean - 1 SE ({bar:.3f})"
                )
    return notes


def run_ablation(rc: RunConfig, seeds=None, topologies=None) -> MatrixReport:
    """Train every topology on identical data/seeds; emit the matrix."""
    seeds = rc.get("ablate", "seeds") if seeds is None else seeds
    topologies = rc.get("ablate", "topologies") if topologies is None else topologies
    rows = []
    for topo in topologies:
        for seed in seeds:
            rows.append(run_training(rc, topology=topo, seed=seed, ablate=True))
    agg = _aggregate(rows)
    order = {t: i for i, t in enumerate(topologies)}
    agg.sort(key=lambda g: order.get(g["group"], 99))
    return MatrixReport(
        rows=rows,
        aggregated=agg,
        footnotes=ordering_footnotes(agg),
        header=_header(rc, "ablation matrix", seeds),
    )


def run_layer_sweep(rc: RunConfig, layer_choices=None, seed=None) -> MatrixReport:
    layer_choices = (
        rc.get("ablate", "layer_choices") if layer_choices is None else layer_choices
    )
    seed = rc.get("run", "seed") if seed is None else seed
    rows = []
    for nl in layer_choices:
        r = run_training(rc, seed=seed, num_layers=nl, ablate=True)
        r.topology = f"{nl} layers"
        rows.append(r)
    agg = _aggregate(rows)
    order = {f"{nl} layers": i for i, nl in enumerate(layer_choices)}
    agg.sort(key=lambda g: order.get(g["group"], 99))
    notes = []
    counts = [r.param_count for r in rows]
    if all(b >= a for a, b in zip(counts, counts[1:])):
        notes.append(f"parameter count non-decreasing across depths: {counts}")
    else:
        notes.append(f"PARAMETER COUNT NOT MONOTONE: {counts}")
    return MatrixReport(
        rows=rows, aggregated=agg, footnotes=notes,
        header=_header(rc, "layer-depth sweep", [seed]),
    )


def write_run_outputs(out_dir: str, result: RunResult):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(result.config_text)
    with open(os.path.join(out_dir, "metrics.log"), "w", encoding="utf-8") as fh:
        for line in result.log_lines:
            fh.write(line + "\n")
    if result.head is not None:
        save_checkpoint(
            os.path.join(out_dir, "checkpoint.bin"),
            result.head.parameters(),
            result.config_text,
        )
