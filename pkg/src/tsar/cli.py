"""Command line: ``tsar <meta-train|transfer|analyze|gradcheck|dataset> ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
failure.  Settings come from defaults, then ``--config FILE`` (INI), then
flags.  ``TSAR_DATA_DIR`` is searched for relative dataset paths.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as A
from .analysis import export
from .checks import FAULT_TARGETS, run_all
from .config import ConfigError, RunConfig, read_config_file, resolve, resolve_data_path
from .data.datasets import load_image_folder, save_image_folder, synthetic_glyphs
from .data.trace import TraceError, read_trace
from .experiment import fleet, meta_dataset, meta_train_run, transfer_dataset, transfer_run

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("tsar")

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [run]/[meta]/[transfer] sections; flags override it")
    p.add_argument("--mode", help="grow | sculpt | custom_bias=<b> | anml | oml | scratch")
    p.add_argument("--regime", help="scarce (25 classes) | rich")
    p.add_argument("--preset", help="tiny (desk) | paper (full-size) architecture")
    p.add_argument("--seed", dest="seeds", help="seed, list (0,3) or range (0-9); one output subdirectory per seed")
    p.add_argument("--seeds", dest="seeds", help=argparse.SUPPRESS)
    p.add_argument("--trials", type=int, help="shorthand for --seeds 0-(N-1)")
    p.add_argument("--data", help="dataset folder (class-per-subfolder) or 'synthetic'")
    p.add_argument("--data-seed", type=int, help="seed of the synthetic dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="parallel worker processes for multi-seed runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsar", description="Meta-learned synaptic regulation for continual learning.")
    parser.add_argument("--version", action="version", version=f"tsar {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="meta-learn a model with the online-aware protocol")
    _add_common(p)
    p.add_argument("--iters", dest="iterations", type=int, help="meta-iterations")
    p.add_argument("--inner-lr", type=float)
    p.add_argument("--outer-lr", type=float)
    p.add_argument("--order", choices=("first", "second"))
    p.add_argument("--probe-every", type=int)

    p = sub.add_parser("transfer", help="sequential training on unseen classes")
    _add_common(p)
    p.add_argument("--checkpoint", help="model file, or a meta-train output directory with seed_<n>/model.tsar")
    p.add_argument("--tasks", type=int)
    p.add_argument("--images-per-task", type=int)
    p.add_argument("--lr", dest="transfer_lr", type=float)
    p.add_argument("--lr-grid", help="comma-separated learning rates; the best is used")
    p.add_argument("--treatment", help="normal | enhancing | diminishing | mixed | fixed | reservoir")
    p.add_argument("--trace-detail", help="summary | tracked | full")
    p.add_argument("--tracked-band", help="percentile band lo,hi for tracked traces")
    p.add_argument("--pool-per-class", type=int)
    p.add_argument("--record-weights", action="store_const", const=True, default=None)

    p = sub.add_parser("analyze", help="post-hoc analyses of regulation traces")
    p.add_argument("traces", nargs="+", help="trace .jsonl files")
    p.add_argument("--out", default="analysis")
    p.add_argument("--layer", default="c3")
    p.add_argument("--modularity", action="store_true")
    p.add_argument("--timelag", action="store_true")
    p.add_argument("--band", default="75,99", help="percentile band for --timelag")
    p.add_argument("--spikes", action="store_true")
    p.add_argument("--thresholds", help="burst thresholds, e.g. 0.5,0.75")
    p.add_argument("--powerlaw", action="store_true")
    p.add_argument("--cp-sign", action="store_true")
    p.add_argument("--class-nodes", action="store_true")
    p.add_argument("--eq23-oracle", action="store_true", help="recount activity tables by brute force and print the max deviation")

    p = sub.add_parser("gradcheck", help="gradient and meta-gradient self-checks")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--inject-fault", choices=sorted(FAULT_TARGETS), help=argparse.SUPPRESS)

    p = sub.add_parser("dataset", help="create or inspect image datasets")
    dsub = p.add_subparsers(dest="action", required=True)
    s = dsub.add_parser("synthesize", help="render synthetic glyph classes to a folder")
    s.add_argument("out")
    s.add_argument("--classes", type=int, default=25)
    s.add_argument("--per-class", type=int, default=20)
    s.add_argument("--domain", type=int, choices=(0, 1), default=0)
    s.add_argument("--seed", type=int, default=0)
    s = dsub.add_parser("inspect", help="summarize a dataset folder")
    s.add_argument("path")
    s.add_argument("--split", default="15,5", help="train,test split to check ('none' to skip)")
    return parser


def _overrides(args) -> dict:
    fields = RunConfig.__dataclass_fields__
    out = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    if getattr(args, "trials", None):
        out["seeds"] = f"0-{args.trials - 1}"
    return out


def _config(args) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    return resolve(file_values, _overrides(args))


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, default=float))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_meta_train(args) -> int:
    cfg = _config(args)
    if cfg.mode == "scratch":
        raise ConfigError("run.mode", "scratch is trained from a random initialization; nothing to meta-train")
    resolve_data_path(cfg.data)
    ds = meta_dataset(cfg)
    runs = fleet(meta_train_run, cfg, cfg.out, dataset=ds)
    for r in runs:
        print(f"seed {r['seed']}: final retention accuracy {r['final_retention_acc']:.4f}  checkpoint {r['checkpoint']}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _config(args)
    resolve_data_path(cfg.data)
    if cfg.checkpoint is None and cfg.mode != "scratch" and cfg.treatment != "reservoir":
        raise ConfigError("transfer.checkpoint", f"mode {cfg.mode!r} needs --checkpoint (only scratch and reservoir run without one)")
    if cfg.checkpoint is not None and not Path(cfg.checkpoint).exists():
        raise ConfigError("transfer.checkpoint", f"checkpoint not found: {cfg.checkpoint}")
    ds = transfer_dataset(cfg)
    explicit = args.preset is not None
    runs = fleet(transfer_run, cfg, cfg.out, dataset=ds, explicit_preset=explicit)
    for r in runs:
        print(
            f"seed {r['config']['seed']}: final retention {r['final_retention']:.4f}  "
            f"validation {r['validation'] if r['validation'] is None else round(r['validation'], 4)}"
        )
    return EXIT_OK


def cmd_analyze(args) -> int:
    out = Path(args.out)
    traces = [read_trace(p) for p in args.traces]
    requested = [
        name
        for name in ("modularity", "timelag", "spikes", "powerlaw", "cp_sign", "class_nodes", "eq23_oracle")
        if getattr(args, name)
    ]
    if not requested:
        raise ConfigError("analyze", "no analysis selected (e.g. --modularity, --spikes)")
    thresholds = tuple(float(t) for t in args.thresholds.split(",")) if args.thresholds else A.DEFAULT_THRESHOLDS
    band = tuple(float(v) for v in args.band.split(","))
    skipped = []
    layer = args.layer
    info = {"version": __version__, "traces": [str(p) for p in args.traces], "layer": layer}

    for name in requested:
        try:
            if name == "class_nodes":
                curves = A.class_node_dynamics(traces)
                files, ends = [], {}
                for key, (mean, spread) in curves.summary().items():
                    files.append(export.write_table_csv(out / f"class_nodes_{key}.csv", {"step": np.arange(len(mean)), "mean": mean, "std": spread}))
                    ends[key] = float(mean[-1]) if len(mean) else None
                export.write_manifest(out / "class_nodes.json", name, files, {"layer": "cp"}, {"final_mean": ends}, info)
                continue
            for i, trace in enumerate(traces):
                tag = f"{name}_{i}"
                if name == "modularity":
                    h = A.modularity_histogram(trace, layer)
                    f = export.write_histogram_csv(out / f"{tag}.csv", h.counts)
                    export.write_manifest(out / f"{tag}.json", name, [f], {"bins": h.counts.shape[0]}, {"mass": h.mass}, info)
                elif name == "timelag":
                    h = A.timelag_histogram(trace, layer, band)
                    f = export.write_histogram_csv(out / f"{tag}.csv", h.counts)
                    export.write_manifest(out / f"{tag}.json", name, [f], {"band": band}, {"mass": h.mass}, info)
                elif name in ("spikes", "powerlaw"):
                    dists = A.spike_size_distribution(trace, layer, thresholds)
                    files, results = [], {}
                    for th, dist in dists.items():
                        if name == "spikes":
                            files.append(export.write_series_csv(out / f"{tag}_t{th:g}.csv", dist.sizes, dist.frequencies, ("size", "frequency")))
                        else:
                            try:
                                fit = A.powerlaw_fit(dist.sizes, dist.frequencies)
                                results[str(th)] = {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2, "regime": fit.regime}
                            except ValueError as exc:
                                results[str(th)] = {"error": str(exc)}
                            files.append(export.write_series_csv(out / f"{tag}_t{th:g}.csv", dist.log_x, dist.log_y, ("size", "density")))
                    export.write_manifest(out / f"{tag}.json", name, files, {"thresholds": thresholds}, results, info)
                elif name == "cp_sign":
                    rep = A.cp_sign_analysis(trace)
                    f = export.write_table_csv(
                        out / f"{tag}.csv",
                        {"step": np.arange(len(rep.spikes)), "spikes": rep.spikes, "positive": rep.positive_mean, "negative": rep.negative_mean},
                    )
                    export.write_manifest(out / f"{tag}.json", name, [f], {"layer": "cp"}, rep.summary(), info)
                elif name == "eq23_oracle":
                    table = A.activity_table(trace, layer)
                    spec, agn = A.brute_force_activity(trace, layer)
                    dev = float(np.nanmax(np.abs(np.concatenate([(table.specific - spec).ravel(), (table.agnostic - agn).ravel()]))))
                    print(f"activity oracle {args.traces[i]} layer {layer}: max abs deviation {dev:.3e}")
                    export.write_manifest(out / f"{tag}.json", name, [], {}, {"max_abs_deviation": dev}, info)
        except (TraceError, KeyError) as exc:
            skipped.append(f"{name}: {exc}")
        except ValueError as exc:
            skipped.append(f"{name}: {exc}")
    for line in skipped:
        print(f"SKIPPED {line}", file=sys.stderr)
    return EXIT_RUNTIME if skipped else EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(args.dtype, args.instances, fault=args.inject_fault)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_dataset(args) -> int:
    if args.action == "synthesize":
        ds = synthetic_glyphs(args.classes, args.per_class, seed=args.seed, domain=args.domain)
        root = save_image_folder(ds, args.out)
        print(f"wrote {len(ds)} images in {ds.num_classes} classes to {root}")
        return EXIT_OK
    path = resolve_data_path(args.path, "path")
    split = None if args.split == "none" else tuple(int(v) for v in args.split.split(","))
    ds = load_image_folder(path, split_spec=split)
    counts = ds.counts()
    _emit(
        {
            "path": str(path),
            "classes": ds.num_classes,
            "images": len(ds),
            "in_shape": list(ds.in_shape),
            "per_class_min": int(counts.min()),
            "per_class_max": int(counts.max()),
            "excluded": ds.meta.get("excluded", []),
            "split": list(split) if split else None,
        }
    )
    return EXIT_OK


COMMANDS = {
    "meta-train": cmd_meta_train,
    "transfer": cmd_transfer,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "dataset": cmd_dataset,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
