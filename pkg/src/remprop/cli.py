"""Command-line entry point: generate, propagate, evaluate, ablate, noise-report, oracle-check.

Every command writes its outputs plus a run_manifest.json capturing the argv,
resolved configuration, input hashes, and seeds needed to reproduce the run.
stdout carries one machine-readable JSON summary; logs go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .acquisition import ViewSimulationParams, build_method_config
from .core import DatasetManifest, NodeStore, load_dataset, save_dataset
from .errors import InvalidConfig, RempropError, UnknownMethod
from .pipeline import run_method
from .propagation import PropagationConfig, PropagationResult, propagate
from .synth import (
    PROFILES,
    SyntheticSpec,
    brute_force_propagate,
    generate_synthetic_dataset,
    propagation_noise_report,
    random_instance,
    reminiscence_ablation,
)

log = logging.getLogger("remprop")

_PROP_FLAGS = (
    "threshold",
    "max_iterations",
    "convergence_ratio",
    "update_mode",
    "node_order",
    "tie_break",
    "ratio_denominator",
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit 1 with usage on stderr."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="remprop", description=__doc__)
    parser.add_argument("--version", action="version", version=f"remprop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_prop_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="JSON file with propagation settings; flags win")
        p.add_argument("--threshold", type=float)
        p.add_argument("--max-iterations", type=int)
        p.add_argument("--convergence-ratio", type=float)
        p.add_argument("--update-mode", choices=["sequential", "batch"])
        p.add_argument("--node-order", choices=["manifest_order", "node_id_lexicographic"])
        p.add_argument("--tie-break", choices=["indicator_lexicographic"])
        p.add_argument("--ratio-denominator", choices=["all_reminiscence", "labeled_reminiscence"])
        p.add_argument("--threads", type=int, default=1)

    def add_view_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--simulate-views", type=int, default=0, metavar="A",
                       help="extra perturbation views per seed (0 disables)")
        p.add_argument("--view-sigma", type=float, default=0.05)
        p.add_argument("--view-rotation-dim", type=int, default=0)
        p.add_argument("--view-seed", type=int, default=0)

    g = sub.add_parser("generate", help="write a synthetic dataset (manifest + embedding blob)")
    g.add_argument("--profile", choices=sorted(PROFILES), default="separable")
    g.add_argument("--spec", type=Path, help="JSON overrides for the profile's generator fields")
    g.add_argument("--rng-seed", type=int)
    g.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("propagate", help="run label propagation and write the pass trail")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--method", choices=["direct", "passive", "pga", "supervised"], default="pga")
    p.add_argument("--out", type=Path, required=True)
    add_prop_flags(p)
    add_view_flags(p)

    e = sub.add_parser("evaluate", help="run a method end to end and score grounding")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--method", choices=["direct", "passive", "pga", "supervised"], default="pga")
    e.add_argument("--out", type=Path, required=True)
    add_prop_flags(e)
    add_view_flags(e)

    a = sub.add_parser("ablate", help="grounding accuracy vs reminiscence size")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--sizes", type=str, default="0,25,100,400", help="comma-separated scene counts")
    a.add_argument("--trials", type=int, default=3)
    a.add_argument("--method", action="append", dest="methods",
                   choices=["direct", "passive", "pga", "supervised"],
                   help="repeatable; default pga")
    a.add_argument("--rng-seed", type=int, default=0)
    a.add_argument("--out", type=Path, required=True)
    add_prop_flags(a)

    n = sub.add_parser("noise-report", help="how often noisy boxes get pseudo-labeled, per method")
    n.add_argument("--data", type=Path, required=True)
    n.add_argument("--methods", type=str, default="pga,passive")
    n.add_argument("--out", type=Path, required=True)
    add_prop_flags(n)

    o = sub.add_parser("oracle-check", help="engine vs brute-force reference on random instances")
    o.add_argument("--instances", type=int, default=200)
    o.add_argument("--max-nodes", type=int, default=50)
    o.add_argument("--max-indicators", type=int, default=5)
    o.add_argument("--rng-seed", type=int, default=0)
    o.add_argument("--out", type=Path, required=True)

    return parser


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prop_config(args: argparse.Namespace) -> PropagationConfig:
    values = {}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise InvalidConfig("--config file must hold a JSON object")
        unknown = set(doc) - set(_PROP_FLAGS)
        if unknown:
            raise InvalidConfig(f"--config file has unknown keys {sorted(unknown)}")
        values.update(doc)
    for name in _PROP_FLAGS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return PropagationConfig(**values)


def _view_params(args: argparse.Namespace) -> ViewSimulationParams | None:
    if getattr(args, "simulate_views", 0) <= 0:
        return None
    return ViewSimulationParams(
        views_per_object=args.simulate_views,
        perturbation_sigma=args.view_sigma,
        rotation_subspace_dim=args.view_rotation_dim,
        rng_seed=args.view_seed,
    )


def _write_run_manifest(
    out_dir: Path,
    command: str,
    argv: list[str],
    config: dict,
    inputs: list[Path],
    outputs: list[Path],
    seeds: dict,
    t_start: float,
) -> Path:
    doc = {
        "tool": "remprop",
        "version": __version__,
        "command": command,
        "argv": argv,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": sorted(str(p.relative_to(out_dir)) for p in outputs),
        "rng_seeds": seeds,
        "started_utc": datetime.now(timezone.utc).isoformat(),
        "wall_seconds": round(time.perf_counter() - t_start, 3),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _load_data(args: argparse.Namespace) -> tuple[DatasetManifest, list[Path]]:
    data_dir = Path(args.data)
    manifest = load_dataset(data_dir)
    log.info(
        "loaded %s: %d scenes, %d embeddings, %d indicators, %d test queries",
        data_dir,
        len(manifest.scenes),
        manifest.embeddings.shape[0],
        len(manifest.personal_objects),
        len(manifest.test_queries),
    )
    return manifest, [data_dir / "manifest.json", data_dir / manifest.embedding_blob_ref]


def _empty_result(store: NodeStore, config: PropagationConfig) -> PropagationResult:
    return PropagationResult(final_store=store, passes=[], converged=True, iterations_used=0, config=config)


def _cmd_generate(args: argparse.Namespace, argv: list[str]) -> int:
    t0 = time.perf_counter()
    overrides: dict = {}
    if args.spec:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise InvalidConfig("--spec file must hold a JSON object")
        overrides.update(doc)
    if args.rng_seed is not None:
        overrides["rng_seed"] = args.rng_seed
    try:
        spec = PROFILES[args.profile](**overrides)
    except TypeError as exc:
        raise InvalidConfig(f"bad generator field: {exc}") from exc

    log.info("generating profile %r with rng_seed %d", args.profile, spec.rng_seed)
    manifest = generate_synthetic_dataset(spec)
    out = Path(args.out)
    manifest_path, blob_path = save_dataset(manifest, out)
    outputs = [manifest_path, blob_path]
    mpath = _write_run_manifest(
        out, "generate", argv, spec.__dict__ | {"profile": args.profile},
        [args.spec] if args.spec else [], outputs, {"rng_seed": spec.rng_seed}, t0,
    )
    _emit(
        {
            "command": "generate",
            "out": str(out),
            "scenes": len(manifest.scenes),
            "nodes": int(sum(len(s.boxes) for s in manifest.scenes)),
            "indicators": len(manifest.personal_objects),
            "test_queries": len(manifest.test_queries),
            "run_manifest": str(mpath),
        }
    )
    return 0


def _cmd_propagate(args: argparse.Namespace, argv: list[str]) -> int:
    from .acquisition import build_method_store
    from .report import convergence_figure

    t0 = time.perf_counter()
    config = _prop_config(args)
    method = build_method_config(args.method)
    manifest, inputs = _load_data(args)
    store = build_method_store(manifest, method, simulated_views=_view_params(args))
    if method.use_propagation:
        result = propagate(store, config, workers=args.threads)
    else:
        result = _empty_result(store, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result_path = out / "result.json"
    result_path.write_text(result.to_json(), encoding="utf-8")
    outputs = [result_path]
    if result.passes:
        fig_path = out / "convergence.png"
        convergence_figure(result, fig_path)
        outputs.append(fig_path)
    mpath = _write_run_manifest(
        out, "propagate", argv,
        {"method": args.method, "propagation": config.to_dict(), "threads": args.threads},
        inputs, outputs, {"view_seed": args.view_seed}, t0,
    )
    _emit(
        {
            "command": "propagate",
            "method": args.method,
            "converged": result.converged,
            "iterations_used": result.iterations_used,
            "labels_assigned": sum(p.labels_assigned for p in result.passes),
            "labeled_total": store.labeled_count(),
            "out": str(out),
            "run_manifest": str(mpath),
        }
    )
    return 0


def _cmd_evaluate(args: argparse.Namespace, argv: list[str]) -> int:
    from .report import eval_figure, write_eval_csv

    t0 = time.perf_counter()
    config = _prop_config(args)
    manifest, inputs = _load_data(args)
    run = run_method(manifest, args.method, config, simulated_views=_view_params(args), workers=args.threads)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []
    for name, rep in {**run.split_reports, "overall": run.overall}.items():
        jpath = out / f"eval_{name}.json"
        jpath.write_text(rep.to_json(), encoding="utf-8")
        cpath = out / f"eval_{name}.csv"
        write_eval_csv(rep, cpath)
        outputs += [jpath, cpath]
    if run.propagation is not None:
        rpath = out / "result.json"
        rpath.write_text(run.propagation.to_json(), encoding="utf-8")
        outputs.append(rpath)
    fig_path = out / "eval_summary.png"
    eval_figure(run.split_reports, fig_path)
    outputs.append(fig_path)
    mpath = _write_run_manifest(
        out, "evaluate", argv,
        {"method": args.method, "propagation": config.to_dict(), "threads": args.threads},
        inputs, outputs, {"view_seed": args.view_seed}, t0,
    )
    _emit(
        {
            "command": "evaluate",
            "method": args.method,
            "overall_iou50": run.overall.iou_at_50,
            "overall_iou80": run.overall.iou_at_80,
            "splits": {
                k: {"iou50": r.iou_at_50, "iou80": r.iou_at_80, "n": r.n_queries}
                for k, r in run.split_reports.items()
            },
            "labeled_count": run.labeled_count,
            "out": str(out),
            "run_manifest": str(mpath),
        }
    )
    return 0


def _cmd_ablate(args: argparse.Namespace, argv: list[str]) -> int:
    from .report import ablation_figure, write_ablation_csv

    t0 = time.perf_counter()
    config = _prop_config(args)
    manifest, inputs = _load_data(args)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise InvalidConfig(f"--sizes must be comma-separated integers: {args.sizes!r}") from exc
    methods = args.methods or ["pga"]
    configs = [build_method_config(m) for m in methods]
    report = reminiscence_ablation(
        manifest, sizes, args.trials, configs,
        prop_config=config, rng_seed=args.rng_seed, workers=args.threads,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for m in methods:
        cpath = out / ("ablation.csv" if len(methods) == 1 else f"ablation_{m}.csv")
        write_ablation_csv(report, cpath, method=m)
        outputs.append(cpath)
    jpath = out / "ablation.json"
    jpath.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs.append(jpath)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    for (size, trial, method), text in report.overall_reports.items():
        rpath = runs_dir / f"eval_size{size}_trial{trial}_{method}.json"
        rpath.write_text(text, encoding="utf-8")
        outputs.append(rpath)
    fig_path = out / "ablation.png"
    ablation_figure(report, fig_path)
    outputs.append(fig_path)
    mpath = _write_run_manifest(
        out, "ablate", argv,
        {"sizes": sizes, "trials": args.trials, "methods": methods,
         "propagation": config.to_dict(), "threads": args.threads},
        inputs, outputs, {"rng_seed": args.rng_seed}, t0,
    )
    _emit(
        {
            "command": "ablate",
            "sizes": sizes,
            "trials": args.trials,
            "means": report.means,
            "out": str(out),
            "run_manifest": str(mpath),
        }
    )
    return 0


def _cmd_noise_report(args: argparse.Namespace, argv: list[str]) -> int:
    from .report import noise_figure, write_noise_csv

    t0 = time.perf_counter()
    config = _prop_config(args)
    manifest, inputs = _load_data(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise InvalidConfig("--methods must name at least one method")
    reports = {}
    for name in methods:
        method = build_method_config(name)
        if not method.use_propagation:
            raise InvalidConfig(f"noise-report needs a propagating method, got {name!r}")
        run = run_method(manifest, method, config, workers=args.threads)
        reports[name] = propagation_noise_report(run.propagation, manifest)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / "noise_report.json"
    jpath.write_text(
        json.dumps({m: r.to_json_dict() for m, r in reports.items()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    cpath = out / "noise_report.csv"
    write_noise_csv(reports, cpath)
    fig_path = out / "noise_report.png"
    noise_figure(reports, fig_path)
    outputs = [jpath, cpath, fig_path]
    mpath = _write_run_manifest(
        out, "noise-report", argv,
        {"methods": methods, "propagation": config.to_dict(), "threads": args.threads},
        inputs, outputs, {}, t0,
    )
    _emit(
        {
            "command": "noise-report",
            "methods": {
                m: {
                    "ambiguous_labeled_rate": r.ambiguous_labeled_rate,
                    "invalid_labeled_rate": r.invalid_labeled_rate,
                }
                for m, r in reports.items()
            },
            "out": str(out),
            "run_manifest": str(mpath),
        }
    )
    return 0


def _cmd_oracle_check(args: argparse.Namespace, argv: list[str]) -> int:
    t0 = time.perf_counter()
    if args.instances < 1:
        raise InvalidConfig("--instances must be >= 1")
    mismatches = []
    for i in range(args.instances):
        seed = args.rng_seed * 1_000_003 + i
        _, _, drawn_config = random_instance(seed, max_nodes=args.max_nodes, max_indicators=args.max_indicators)
        for mode in ("sequential", "batch"):
            config = PropagationConfig(**{**drawn_config.to_dict(), "update_mode": mode})
            nodes_a, inds_a, _ = random_instance(seed, max_nodes=args.max_nodes, max_indicators=args.max_indicators)
            nodes_b, inds_b, _ = random_instance(seed, max_nodes=args.max_nodes, max_indicators=args.max_indicators)
            engine = propagate(NodeStore(nodes_a, inds_a), config)
            oracle = brute_force_propagate(NodeStore(nodes_b, inds_b), config)
            if engine.to_json() != oracle.to_json():
                mismatches.append({"instance_seed": seed, "update_mode": mode})

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "instances": args.instances,
        "modes": ["sequential", "batch"],
        "mismatches": mismatches,
        "ok": not mismatches,
        "elapsed_seconds": round(time.perf_counter() - t0, 3),
    }
    jpath = out / "oracle_check.json"
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_manifest(
        out, "oracle-check", argv,
        {"instances": args.instances, "max_nodes": args.max_nodes, "max_indicators": args.max_indicators},
        [], [jpath], {"rng_seed": args.rng_seed}, t0,
    )
    _emit({"command": "oracle-check", "ok": not mismatches, "instances": args.instances,
           "mismatches": len(mismatches), "out": str(out)})
    return 0 if not mismatches else 1


_COMMANDS = {
    "generate": _cmd_generate,
    "propagate": _cmd_propagate,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "noise-report": _cmd_noise_report,
    "oracle-check": _cmd_oracle_check,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, os.environ.get("REMPROP_LOG", "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        return _COMMANDS[args.command](args, argv)
    except (UnknownMethod, InvalidConfig) as exc:
        log.error("%s", exc)
        print(f"remprop {args.command}: {exc}", file=sys.stderr)
        return 1
    except RempropError as exc:
        log.error("%s", exc)
        print(f"remprop {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        print(f"remprop {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
