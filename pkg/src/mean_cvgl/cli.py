"""Command-line entry point: ``mean-cvgl {synth,train,eval,profile,ablate,distances}``.

Every command prints a human-readable table, writes ``<out>/<command>.kv``
(one ``key=value`` per line) and stamps ``<out>/config.yaml`` with the
resolved configuration. Failures exit nonzero with a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mean_cvgl.config import ConfigError, TrainConfig, apply_overrides, preset

DATA_ROOT_ENV = "MEAN_DATA_ROOT"
# default expectation for ConvNeXt-Tiny configurations when no --expect-* flag is given
REFERENCE_COST = {"params_m": 36.50, "gflops": 26.18}

log = logging.getLogger("mean_cvgl")


class CommandError(RuntimeError):
    """A user-facing failure that should end the process with a nonzero code."""


def _resolve_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.load(args.config)
    else:
        cfg = preset(args.preset or _default_preset(args.command))
    if args.seed is not None:
        cfg.seed = args.seed
    cfg = apply_overrides(cfg, args.set)
    cfg.validate()
    return cfg


def _default_preset(command: str) -> str:
    return "full" if command == "profile" else "toy"


def _out_dir(args) -> Path:
    out = Path(args.out or Path("mean_out") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(out: Path, command: str, record: dict, table: str) -> None:
    from mean_cvgl.metrics import write_kv

    print(table)
    write_kv(out / f"{command}.kv", record)


def _data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise CommandError(f"no dataset given: pass --data or set {DATA_ROOT_ENV}")
    return Path(root)


def _open_dataset(args, cfg: TrainConfig):
    from mean_cvgl.data import FileStore, load_splits

    splits = load_splits(_data_root(args))
    return splits, FileStore(cfg.model.backbone.input_resolution)


def _report_table(reports) -> str:
    lines = [f"{'direction':<20}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'AP':>8}"]
    for rep in reports:
        r = rep.recall_at
        lines.append(f"{rep.direction:<20}{100 * r[1]:>8.2f}{100 * r[5]:>8.2f}{100 * r[10]:>8.2f}{100 * rep.ap:>8.2f}")
    return "\n".join(lines)


# -- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    from mean_cvgl.data import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(num_classes=args.classes, drone_per_class=args.drone_per_class,
                         resolution=args.resolution, seed=args.seed or 0, test_classes=args.test_classes)
    out = _out_dir(args)
    ds = generate_synthetic(spec, out)
    record = {"root": str(out), "images": ds.num_images}
    for split, idx in ds.splits.items():
        record.update({f"{split}_{k}": v for k, v in idx.counts().items()})
    _emit(out, "synth", record, "\n".join(f"{k:<20}{v}" for k, v in record.items()))
    return 0


def cmd_train(args) -> int:
    from mean_cvgl.trainer import fit

    cfg = _resolve_config(args)
    splits, store = _open_dataset(args, cfg)
    if "train" not in splits:
        raise CommandError("dataset has no train split")
    out = _out_dir(args)
    eval_index = splits.get("test") if args.eval_split == "test" else splits["train"]
    result = fit(cfg, splits["train"], store, eval_index=eval_index, out_dir=out, resume=args.resume)
    record = {"steps": result.state.step, "checkpoint": str(result.checkpoint)}
    if result.history:
        record.update({f"final_{k}": v for k, v in result.history[-1].items() if k != "step"})
    record.update(result.state.last_metrics)
    _emit(out, "train", record, "\n".join(f"{k:<20}{v}" for k, v in record.items()))
    return 0


def cmd_eval(args) -> int:
    from mean_cvgl.trainer import evaluate, load_checkpoint

    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    splits, store = _open_dataset(args, cfg)
    if args.split not in splits:
        raise CommandError(f"dataset has no split {args.split!r}")
    out = _out_dir(args)
    cfg.save(out / "config.yaml")
    directions = ["drone->satellite", "satellite->drone"] if args.direction == "both" else [args.direction]
    reports = [evaluate(state.model, splits[args.split], store, d) for d in directions]
    record = {}
    for rep in reports:
        tag = "d2s" if rep.direction.startswith("drone") else "s2d"
        record.update({f"{tag}_R@{k}": v for k, v in sorted(rep.recall_at.items())})
        record[f"{tag}_AP"] = rep.ap
        record[f"{tag}_queries"] = rep.num_queries
    _emit(out, "eval", record, _report_table(reports))
    return 0


def cmd_profile(args) -> int:
    from mean_cvgl.model import build_model
    from mean_cvgl.profiler import estimate_flops, group_by_prefix

    cfg = _resolve_config(args)
    out = _out_dir(args)
    cfg.save(out / "config.yaml")
    res = args.input_size or cfg.model.backbone.input_resolution
    model = build_model(cfg.model, cfg.seed)
    report = estimate_flops(model, (1, 3, res, res))
    expect_p, expect_g = args.expect_params, args.expect_gflops
    if expect_p is None and expect_g is None and cfg.model.backbone.kind == "convnext_tiny":
        expect_p, expect_g = REFERENCE_COST["params_m"], REFERENCE_COST["gflops"]
    record = {"params": report.parameter_count, "params_m": round(report.params_m, 4),
              "gflops": round(report.gflops, 4), "input": f"1x3x{res}x{res}"}
    for name, v in group_by_prefix(report.per_module).items():
        record[f"gflops_{name}"] = round(v / 1e9, 4)
    lines = [f"{'parameters (M)':<18}{report.params_m:>10.3f}", f"{'GFLOPs':<18}{report.gflops:>10.3f}"]
    ok = True
    tol = args.tolerance / 100.0
    for key, got, want in (("params", report.params_m, expect_p), ("gflops", report.gflops, expect_g)):
        if want is None:
            continue
        dev = (got - want) / want
        passed = abs(dev) <= tol
        ok &= passed
        record[f"{key}_expected"] = want
        record[f"{key}_deviation_pct"] = round(100 * dev, 3)
        record[f"{key}_pass"] = passed
        lines.append(f"{key:<18}expected {want:.2f}  deviation {100 * dev:+.2f}%  {'PASS' if passed else 'FAIL'}")
    _emit(out, "profile", record, "\n".join(lines))
    if not ok:
        print(f"error: profile outside +/-{args.tolerance:g}% of expected values", file=sys.stderr)
        return 3
    return 0


def cmd_ablate(args) -> int:
    from mean_cvgl.ablation import DILATION_GRID, format_table, parse_grid, run_ablation
    from mean_cvgl.data import SyntheticSpec, generate_synthetic

    cfg = _resolve_config(args)
    if args.steps:
        cfg.steps = args.steps
    grid = parse_grid(args.grid) if args.grid else list(DILATION_GRID)
    out = _out_dir(args)
    cfg.save(out / "config.yaml")
    if args.data or os.environ.get(DATA_ROOT_ENV):
        splits, store = _open_dataset(args, cfg)
        index = splits["train"]
    else:
        spec = SyntheticSpec(num_classes=cfg.model.num_classes, resolution=cfg.model.backbone.input_resolution,
                             seed=cfg.seed)
        ds = generate_synthetic(spec)
        index, store = ds.train, ds.store
    rows = run_ablation(cfg, index, store, args.target, grid)
    record = {"target": args.target, "rows": len(rows)}
    for i, r in enumerate(rows):
        for k, v in r.as_dict().items():
            record[f"row{i}_{k}"] = v
    (out / "ablate.json").write_text(json.dumps([r.as_dict() for r in rows], indent=2))
    _emit(out, "ablate", record, format_table(rows, args.target))
    return 0


PROJECTIONS = {}


def projection(name):
    def register(fn):
        PROJECTIONS[name] = fn
        return fn
    return register


@projection("pca")
def _pca_2d(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def cmd_distances(args) -> int:
    from mean_cvgl.metrics import distance_stats
    from mean_cvgl.trainer import embed_view, load_checkpoint

    state = load_checkpoint(args.checkpoint)
    splits, store = _open_dataset(args, state.config)
    if args.split not in splits:
        raise CommandError(f"dataset has no split {args.split!r}")
    out = _out_dir(args)
    state.config.save(out / "config.yaml")
    dtype = next(state.model.parameters()).dtype
    q = embed_view(state.model, splits[args.split], store, "drone", dtype)
    g = embed_view(state.model, splits[args.split], store, "satellite", dtype)
    stats = distance_stats(q.vectors, g.vectors, q.labels, g.labels, bins=args.bins)
    summary = stats.summary()
    (out / "distances.json").write_text(json.dumps({
        "summary": summary,
        "bin_edges": stats.bins.tolist(),
        "intra_hist": stats.intra_hist.tolist(),
        "inter_hist": stats.inter_hist.tolist(),
    }, indent=2))
    if args.project:
        if args.project not in PROJECTIONS:
            raise CommandError(f"unknown projection {args.project!r}; choose from {sorted(PROJECTIONS)}")
        coords = PROJECTIONS[args.project](np.vstack([q.vectors, g.vectors]))
        views = ["drone"] * len(q) + ["satellite"] * len(g)
        labels = list(q.labels) + list(g.labels)
        with open(out / "projection.csv", "w") as fh:
            fh.write("view,label,x,y\n")
            for v, lab, (x, y) in zip(views, labels, coords):
                fh.write(f"{v},{lab},{x!r},{y!r}\n")
        summary["projection"] = args.project
    table = "\n".join(f"{k:<14}{v:.4f}" if isinstance(v, float) else f"{k:<14}{v}" for k, v in summary.items())
    _emit(out, "distances", summary, table)
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mean-cvgl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, data=False):
        p.add_argument("--out", metavar="DIR", help="output directory (default mean_out/<command>)")
        p.add_argument("--seed", type=int, metavar="N", help="random seed")
        if config:
            p.add_argument("--config", metavar="PATH", help="YAML or JSON TrainConfig file")
            p.add_argument("--preset", choices=("toy", "full"), help="start from a named config")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="dotted config override, e.g. model.cea_channels=256 (repeatable)")
        if data:
            p.add_argument("--data", metavar="ROOT", help=f"dataset root (default ${DATA_ROOT_ENV})")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic paired-view dataset"), config=False)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--drone-per-class", type=int, default=4)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--test-classes", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train on a dataset directory"), data=True)
    p.add_argument("--resume", metavar="CKPT", help="checkpoint directory to continue from")
    p.add_argument("--eval-split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="retrieval metrics for a checkpoint"), config=False, data=True)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--split", default="train")
    p.add_argument("--direction", choices=("drone->satellite", "satellite->drone", "both"), default="both")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("profile", help="parameter count and GFLOPs"))
    p.add_argument("--input-size", type=int, metavar="PX", help="square input size (default: config resolution)")
    p.add_argument("--expect-params", type=float, metavar="M", help="expected parameters in millions")
    p.add_argument("--expect-gflops", type=float, metavar="G", help="expected GFLOPs")
    p.add_argument("--tolerance", type=float, default=10.0, metavar="PCT", help="allowed deviation in percent")
    p.set_defaults(func=cmd_profile)

    p = common(sub.add_parser("ablate", help="dilation-rate ablation table"), data=True)
    p.add_argument("--target", choices=("deg", "dec", "both"), default="deg")
    p.add_argument("--grid", action="append", metavar="A,B,C", help="dilation triple (repeatable; default 10-row grid)")
    p.add_argument("--steps", type=int, help="training steps per configuration")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("distances", help="intra/inter-class distance statistics"), config=False, data=True)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--split", default="train")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--project", metavar="METHOD", help="also write 2-D coordinates (available: pca)")
    p.set_defaults(func=cmd_distances)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, ValueError, FileNotFoundError, KeyError, TypeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
