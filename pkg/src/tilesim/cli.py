"""Command-line entry point tying configs, planners, simulator and the
functional oracle into reproducible experiments.

Exit codes: 0 success, 1 verification failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import analytics
from .arch import ArchConfig, ConfigError, MhaLayer, load_config_file, preset, PRESET_NAMES
from .dataflow import (
    DataflowKind,
    GroupShape,
    PlanError,
    execute_functional,
    plan_dataflow,
    reference_attention,
)
from .simcore import GraphError, simulate

REPORT_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_INPUT = 2


@dataclass
class RunSpec:
    """Everything one experiment needs, resolved from flags and env."""

    cfg: ArchConfig
    arch_name: str
    layer: MhaLayer
    kind: DataflowKind
    group: GroupShape | None
    collectives: str | None
    account_transpose: bool = False
    trace_path: str | None = None
    report_path: str | None = None
    seed: int = 0


def _parse_group(text: str) -> GroupShape:
    try:
        gx, _, gy = text.lower().partition("x")
        return GroupShape(int(gx), int(gy))
    except (ValueError, PlanError) as exc:
        raise argparse.ArgumentTypeError(f"bad group {text!r}: expected GxxGy") from exc


def _load_arch(value: str) -> tuple[str, ArchConfig]:
    if value in PRESET_NAMES:
        cfg = preset(value)
        # Presets honor the same env override scheme as files.
        from .arch import apply_env
        return value, apply_env(cfg, os.environ)
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"architecture {value!r} is neither a preset nor a file")
    return path.stem, load_config_file(path, env=os.environ)


def _add_layer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seq", type=int, default=4096, help="sequence length S")
    p.add_argument("--dim", type=int, default=128, help="head dimension D")
    p.add_argument("--batch", type=int, default=2, help="batch size B")
    p.add_argument("--heads", type=int, default=32, help="head count H")
    p.add_argument("--elem-bytes", type=int, default=2, help="bytes per element")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", required=True,
                   help=f"config file path or preset ({', '.join(PRESET_NAMES)})")
    p.add_argument("--dataflow", default="flatasyn",
                   choices=[k.value for k in DataflowKind])
    p.add_argument("--group", type=_parse_group, default=None,
                   help="group shape GxxGy (grouped dataflows; default: whole mesh)")
    p.add_argument("--collectives", choices=["sw", "hw"], default=None)
    p.add_argument("--account-transpose", action="store_true",
                   help="charge one extra S x D read+write pass per head for "
                        "key pre-transposition")
    _add_layer_flags(p)
    p.add_argument("--trace", default=None, help="write an event trace (JSON lines)")
    p.add_argument("--report", default=None, help="write the structured report")
    p.add_argument("--seed", type=int, default=0)


def _spec_from_args(args) -> RunSpec:
    arch_name, cfg = _load_arch(args.arch)
    layer = MhaLayer(batch=args.batch, heads=args.heads, seq_len=args.seq,
                     head_dim=args.dim, bytes_per_elem=args.elem_bytes)
    return RunSpec(
        cfg=cfg, arch_name=arch_name, layer=layer,
        kind=DataflowKind(args.dataflow), group=args.group,
        collectives=args.collectives,
        account_transpose=args.account_transpose,
        trace_path=args.trace, report_path=getattr(args, "report", None),
        seed=args.seed,
    )


def _run_sim(spec: RunSpec) -> tuple[dict, dict]:
    graph = plan_dataflow(spec.layer, spec.cfg, spec.kind, group=spec.group,
                          collectives=spec.collectives,
                          account_transpose=spec.account_transpose)
    if spec.trace_path:
        with open(spec.trace_path, "w") as fh:
            report = simulate(spec.cfg, graph, trace=fh)
    else:
        report = simulate(spec.cfg, graph)
    metrics = analytics.summarize(report, spec.cfg, spec.layer)
    meta = graph.meta
    sp = meta["slice_plan"]
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "arch": spec.arch_name,
        "layer": {
            "batch": spec.layer.batch, "heads": spec.layer.heads,
            "seq_len": spec.layer.seq_len, "head_dim": spec.layer.head_dim,
            "bytes_per_elem": spec.layer.bytes_per_elem,
        },
        "dataflow": meta["kind"],
        "collectives": meta["collectives"],
        "group": list(meta["group"]),
        "slice": {
            "b_r": sp.b_r, "b_c": sp.b_c,
            "slice_r": sp.slice_r, "slice_c": sp.slice_c,
            "l1_footprint_bytes": sp.l1_footprint_bytes,
            "buffering": sp.buffering, "streams": sp.streams,
        },
        "predicted_hbm_bytes": meta["predicted_hbm_bytes"],
        "metrics": metrics,
        "report": report.as_dict(),
    }
    return doc, metrics


def _print_run_summary(doc: dict) -> None:
    m = doc["metrics"]
    print(f"arch={doc['arch']} dataflow={doc['dataflow']} "
          f"group={doc['group'][0]}x{doc['group'][1]} "
          f"S={doc['layer']['seq_len']} D={doc['layer']['head_dim']} "
          f"B={doc['layer']['batch']} H={doc['layer']['heads']}")
    print(f"cycles                {m['cycles']}")
    print(f"utilization           {m['utilization']:.4f}")
    print(f"active utilization    {m['active_utilization']:.4f}")
    print(f"hbm bytes             {m['hbm_bytes']} "
          f"(predicted {doc['predicted_hbm_bytes']})")
    print(f"hbm bw utilization    {m['hbm_bw_utilization']:.4f}")
    print("exposed cycles        " + " ".join(
        f"{k}={v}" for k, v in sorted(m["exposed_cycles"].items()) if k != "matmul"
    ))


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    doc, _ = _run_sim(spec)
    if spec.report_path:
        _write_json(spec.report_path, doc)
    _print_run_summary(doc)
    return EXIT_OK


def cmd_trace(args) -> int:
    if not args.trace:
        print("trace: --trace <path> is required", file=sys.stderr)
        return EXIT_INPUT
    spec = _spec_from_args(args)
    doc, _ = _run_sim(spec)
    print(f"trace written to {spec.trace_path} "
          f"({doc['report']['task_count']} tasks, {doc['metrics']['cycles']} cycles)")
    return EXIT_OK


def cmd_io_model(args) -> int:
    layer = MhaLayer(batch=args.batch, heads=args.heads, seq_len=args.seq,
                     head_dim=args.dim, bytes_per_elem=args.elem_bytes)
    fa = analytics.fa_io_bytes(layer, args.block, args.account_transpose)
    flat = analytics.flat_io_bytes(layer, args.block, args.group_tiles,
                                   args.account_transpose)
    ratio = fa.total_bytes / flat.total_bytes
    print(f"S={args.seq} D={args.dim} B={args.batch} H={args.heads} "
          f"M={args.block} N={args.group_tiles}")
    print(f"per-tile  total={fa.total_bytes} q={fa.q_bytes} kv={fa.kv_bytes} "
          f"o={fa.o_bytes}")
    print(f"grouped   total={flat.total_bytes} q={flat.q_bytes} kv={flat.kv_bytes} "
          f"o={flat.o_bytes}")
    print(f"ratio     {ratio:g}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("model,total_bytes,q_bytes,kv_bytes,o_bytes,ratio\n")
            fh.write(f"per_tile,{fa.total_bytes},{fa.q_bytes},{fa.kv_bytes},"
                     f"{fa.o_bytes},1\n")
            fh.write(f"grouped,{flat.total_bytes},{flat.q_bytes},{flat.kv_bytes},"
                     f"{flat.o_bytes},{ratio:g}\n")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    _, cfg = _load_arch(args.arch)
    kinds = [DataflowKind(v) for v in args.variants]
    rng = np.random.default_rng(args.seed)
    q = rng.standard_normal((args.seq, args.dim))
    k = rng.standard_normal((args.seq, args.dim))
    v = rng.standard_normal((args.seq, args.dim))
    ref = reference_attention(q, k, v)
    scale_ref = float(np.max(np.abs(ref)))
    failures = 0
    for kind in kinds:
        group = args.group if kind.grouped else None
        out = execute_functional(q, k, v, kind, cfg, group=group, check_state=True)
        err = float(np.max(np.abs(out - ref))) / scale_ref
        status = "pass" if err <= args.tolerance else "FAIL"
        if status == "FAIL":
            failures += 1
        print(f"{kind.value:<9} max relative error {err:.3e}  {status}")
    return EXIT_OK if failures == 0 else EXIT_VERIFY


def cmd_sweep(args) -> int:
    spec = yaml.safe_load(Path(args.spec).read_text()) or {}
    arch_values = spec.get("archs", ["mesh32x32"])
    cfgs = {}
    for value in arch_values:
        name, cfg = _load_arch(str(value))
        cfgs[name] = cfg
    batch = int(spec.get("batch", 4))
    heads = int(spec.get("heads", 32))
    if "layers" in spec:
        layers = [
            MhaLayer(batch=int(l.get("batch", batch)), heads=int(l.get("heads", heads)),
                     seq_len=int(l["seq_len"]), head_dim=int(l["head_dim"]),
                     bytes_per_elem=int(l.get("bytes_per_elem", 2)))
            for l in spec["layers"]
        ]
    else:
        seqs = spec.get("seq_lens", list(analytics.DEFAULT_SEQ_LENS))
        dims = spec.get("head_dims", list(analytics.DEFAULT_HEAD_DIMS))
        layers = [
            MhaLayer(batch=batch, heads=heads, seq_len=int(s), head_dim=int(d))
            for s in seqs for d in dims
        ]
    kinds = [DataflowKind(v) for v in spec.get("dataflows", ["flatasyn"])]
    group_texts = spec.get("groups",
                           [f"{g}x{g}" for g in analytics.DEFAULT_GROUP_EDGES])
    groups = [_parse_group(str(g)) for g in group_texts]

    result = analytics.sweep(cfgs, layers, kinds, groups, parallel=args.parallel)
    analytics.write_csv(result, args.csv)
    ran = sum(1 for r in result.rows if not r["error"])
    failed = len(result.rows) - ran
    print(f"{len(result.rows)} points ({ran} ok, {failed} infeasible) -> {args.csv}")

    best_rows = sorted(result.best.items())
    for cell, idx in best_rows:
        row = result.rows[idx]
        print(f"best {row['arch']} S={row['S']} D={row['D']} {row['dataflow']}: "
              f"group {row['group']} utilization {row['utilization']}")
    if best_rows:
        top = max(best_rows, key=lambda kv: result.rows[kv[1]]["utilization"])
        row = result.rows[top[1]]
        print(f"best architecture: {row['arch']} (group {row['group']}, "
              f"utilization {row['utilization']})")
    return EXIT_OK if ran else EXIT_INPUT


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tilesim",
        description="Performance simulator and dataflow planner for attention "
                    "kernels on tile-based many-PE accelerators",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="plan, simulate and report one experiment")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("trace", help="run one experiment and emit its event trace")
    _add_run_flags(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("io-model", help="print the closed-form HBM traffic models")
    _add_layer_flags(p)
    p.add_argument("--block", type=int, default=128, help="block size M")
    p.add_argument("--group-tiles", type=int, default=64,
                   help="group tile count N (perfect square)")
    p.add_argument("--account-transpose", action="store_true")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_io_model)

    p = sub.add_parser("oracle-check",
                       help="verify the scheduled functional execution against "
                            "the attention oracle")
    p.add_argument("--arch", default="mesh32x32")
    p.add_argument("--seq", type=int, default=128)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--group", type=_parse_group, default=GroupShape(4, 4))
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--variants", nargs="*",
                   default=[k.value for k in DataflowKind])
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("sweep", help="run a grid of experiments and export CSV")
    p.add_argument("spec", help="YAML grid description")
    p.add_argument("--csv", required=True)
    p.add_argument("--parallel", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PlanError, GraphError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
