"""Command-line entry point: dataset generation and import, baselines,
training, evaluation, sweeps, and report/plot emission.

All commands write file artifacts only; there is no interactive surface.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, storage
from .aggregator import load_aggregator, save_aggregator
from .baselines import run_baselines
from .data import Domain, FeatureDataset, SnippetSequence, sample_few_shot_split, window_snippets
from .relations import sample_relation_tuples
from .sdfm import compute_source_statistics
from .synthetic import DomainShiftSpec, generate_pair
from .trainer import ExperimentConfig, evaluate, train

OUT_ROOT_ENV = "RELAMIX_OUT"


def _default_out(command: str) -> Path:
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / command


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        config = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        config = ExperimentConfig()
    overrides = {}
    for attr, key in (
        ("seed", "seed"),
        ("epochs", "epochs"),
        ("negatives", "negatives_pool"),
        ("cdia_positives", "cdia_positives"),
        ("per_class_synth", "per_class_synth"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        config = ExperimentConfig.from_dict({**config.to_dict(), **overrides})
    if getattr(args, "ablate", None):
        config = config.with_ablations(args.ablate.split(","))
    return config


def _run_manifest(out_dir: Path, config: ExperimentConfig, inputs: dict, outputs: list, t0: float):
    manifest = {
        "artifact_version": __version__,
        "config_hash": config.digest(),
        "config": config.to_dict(),
        "input_digests": {name: storage.digest_directory(p) for name, p in inputs.items()},
        "outputs": sorted(str(p) for p in outputs),
        "wall_clock_seconds": round(time.time() - t0, 3),
    }
    _write_json_atomic(out_dir / "run_manifest.json", manifest)


def cmd_gen_synth(args) -> int:
    out = Path(args.out or _default_out("gen-synth"))
    shift = DomainShiftSpec(
        rotation_strength=args.rotation,
        bias_strength=args.bias,
        noise_std=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    source, pool, test = generate_pair(
        class_count=args.classes,
        per_class_source=args.per_class_source,
        per_class_target=args.per_class_target,
        snippet_count=args.snippets,
        dim=args.dim,
        shift=shift,
        target_train_fraction=args.target_train_fraction,
        center_collapse=args.center_collapse,
    )
    storage.write_dataset(source, out / "source")
    storage.write_dataset(pool, out / "target_pool")
    storage.write_dataset(test, out / "target_test")
    print(f"wrote {len(source)}/{len(pool)}/{len(test)} sequences under {out}")
    return 0


def cmd_import(args) -> int:
    src = Path(args.src)
    manifest_path = src / "manifest.json"
    if not manifest_path.is_file():
        raise storage.DatasetFormatError(f"manifest missing in {src}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    sequences = []
    for entry in manifest["samples"]:
        frames = storage.read_payload(src / entry["file"])
        snippets = window_snippets(frames, args.window, args.stride, args.pad)
        sequences.append(
            SnippetSequence(
                sample_id=entry["sample_id"],
                label=entry["label"],
                domain=Domain(entry["domain"]),
                features=snippets.astype(np.float32),
            )
        )
    dataset = FeatureDataset(sequences, class_count=manifest["class_count"])
    out = Path(args.out or _default_out("import"))
    storage.write_dataset(dataset, out)
    print(
        f"imported {len(dataset)} sequences -> {out} "
        f"(snippets={dataset.snippet_count}, dim={dataset.dim})"
    )
    return 0


def cmd_stats(args) -> int:
    source = storage.read_dataset(args.data)
    stats = compute_source_statistics(source)
    sequences = []
    for c in range(stats.class_count):
        for kind, tensor in (("mean", stats.mean), ("std", stats.std)):
            sequences.append(
                SnippetSequence(
                    sample_id=f"{kind}_c{c:03d}",
                    label=c,
                    domain=Domain.SOURCE,
                    features=tensor[c].astype(np.float32),
                )
            )
    out = Path(args.out or _default_out("stats"))
    storage.write_dataset(FeatureDataset(sequences, stats.class_count), out)
    print(f"wrote per-class statistics for {stats.class_count} classes to {out}")
    return 0


def cmd_baseline(args) -> int:
    source = storage.read_dataset(args.source)
    test = storage.read_dataset(args.test)
    reports = run_baselines(source, test, seed=args.seed or 0, metric=args.metric)
    out = Path(args.out or _default_out("baseline"))
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "method": r.method,
            "accuracy": r.accuracy,
            "seed": r.seed,
            "per_k_accuracy": r.per_k_accuracy,
        }
        for r in reports
    ]
    _write_json_atomic(out / "baselines.json", {"reports": rows})
    with open(out / "baselines.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "accuracy"])
        for r in reports:
            writer.writerow([r.method, f"{r.accuracy:.4f}"])
    for r in reports:
        print(f"{r.method:>18}: {r.accuracy:6.2f}%")
    return 0


def _train_single(
    source: FeatureDataset,
    pool: FeatureDataset,
    test: FeatureDataset | None,
    config: ExperimentConfig,
    out_dir: Path,
    input_paths: dict,
) -> float | None:
    t0 = time.time()
    out_dir.mkdir(parents=True, exist_ok=True)
    split = sample_few_shot_split(pool, config.shot_count, config.seed)
    fewshot = pool.subset(split.all_ids())
    result = train(source, fewshot, config, run_dir=out_dir)
    save_aggregator(result.model, out_dir / "checkpoint")
    accuracy = None
    if test is not None:
        accuracy, per_class = evaluate(
            result.model, test, plan_seed=config.seed, tuples_per_scale=config.tuples_per_scale
        )
        _write_json_atomic(
            out_dir / "accuracy.json",
            {
                "accuracy": accuracy,
                "per_class": {str(k): v for k, v in per_class.items()},
                "shot_count": config.shot_count,
                "seed": config.seed,
            },
        )
    outputs = [p for p in out_dir.iterdir() if p.name != "run_manifest.json"]
    _run_manifest(out_dir, config, input_paths, outputs, t0)
    return accuracy


def _input_paths(args) -> dict:
    inputs = {"source": args.source, "target_pool": args.target_pool}
    if getattr(args, "test", None):
        inputs["target_test"] = args.test
    return inputs


def cmd_train(args) -> int:
    source = storage.read_dataset(args.source)
    pool = storage.read_dataset(args.target_pool)
    test = storage.read_dataset(args.test) if args.test else None
    config = _load_config(args)
    if args.shots is not None:
        shots = [int(s) for s in args.shots.split(",")]
        if len(shots) != 1:
            raise ValueError("train takes a single --shots value; use sweep for grids")
        config = ExperimentConfig.from_dict({**config.to_dict(), "shot_count": shots[0]})
    out = Path(args.out) if args.out else _default_out("train") / config.digest()
    accuracy = _train_single(source, pool, test, config, out, _input_paths(args))
    print(f"trained {config.epochs} epochs; checkpoint at {out / 'checkpoint'}")
    if accuracy is not None:
        print(f"target test accuracy: {accuracy:.2f}%")
    return 0


def cmd_eval(args) -> int:
    model = load_aggregator(args.checkpoint)
    test = storage.read_dataset(args.test)
    accuracy, per_class = evaluate(
        model, test, plan_seed=args.plan_seed, tuples_per_scale=args.tuples_per_scale
    )
    payload = {"accuracy": accuracy, "per_class": {str(k): v for k, v in per_class.items()}}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json_atomic(out / "accuracy.json", payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _sweep_cell(source_path, pool_path, test_path, config_dict, run_dir) -> float:
    """One isolated (shot, seed) run; safe to execute in a worker process."""
    source = storage.read_dataset(source_path)
    pool = storage.read_dataset(pool_path)
    test = storage.read_dataset(test_path)
    config = ExperimentConfig.from_dict(config_dict)
    inputs = {"source": source_path, "target_pool": pool_path, "target_test": test_path}
    return _train_single(source, pool, test, config, Path(run_dir), inputs)


def cmd_sweep(args) -> int:
    base = _load_config(args)
    shots = [int(s) for s in (args.shots or "1,5,10,20").split(",")]
    seeds = [int(s) for s in (args.seeds or "0,1,2").split(",")]
    out = Path(args.out or _default_out("sweep"))
    out.mkdir(parents=True, exist_ok=True)

    grid = []
    for shot in shots:
        for seed in seeds:
            config = {**base.to_dict(), "shot_count": shot, "seed": seed}
            run_dir = out / f"run_s{shot:02d}_seed{seed:03d}"
            grid.append((shot, seed, config, run_dir))

    cells: dict[int, list[float]] = {shot: [] for shot in shots}
    if args.parallel > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        # spawn, not fork: the parent's torch thread pools do not survive forking
        with ProcessPoolExecutor(
            max_workers=args.parallel, mp_context=mp.get_context("spawn")
        ) as pool_exec:
            futures = {
                pool_exec.submit(
                    _sweep_cell, args.source, args.target_pool, args.test, config, str(run_dir)
                ): (shot, seed)
                for shot, seed, config, run_dir in grid
            }
            results = {key: f.result() for f, key in futures.items()}
        for shot, seed, _, _ in grid:
            accuracy = results[(shot, seed)]
            cells[shot].append(accuracy)
            print(f"shot={shot} seed={seed}: {accuracy:.2f}%")
    else:
        for shot, seed, config, run_dir in grid:
            accuracy = _sweep_cell(args.source, args.target_pool, args.test, config, str(run_dir))
            cells[shot].append(accuracy)
            print(f"shot={shot} seed={seed}: {accuracy:.2f}%")

    rows = []
    for shot in shots:
        accs = np.array(cells[shot])
        rows.append(
            {
                "shot_count": shot,
                "mean_accuracy": float(accs.mean()),
                "std_accuracy": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
                "accuracies": [float(a) for a in accs],
            }
        )
    _write_json_atomic(out / "sweep_results.json", {"rows": rows, "seeds": seeds})
    with open(out / "sweep_results.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["shot_count", "mean_accuracy", "std_accuracy"])
        for row in rows:
            writer.writerow(
                [row["shot_count"], f"{row['mean_accuracy']:.4f}", f"{row['std_accuracy']:.4f}"]
            )
    _plot_sweep(rows, out / "accuracy_vs_shots.png")
    print(f"sweep complete: {len(shots) * len(seeds)} runs under {out}")
    return 0


def _plot_sweep(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    shots = [r["shot_count"] for r in rows]
    means = [r["mean_accuracy"] for r in rows]
    stds = [r["std_accuracy"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(shots, means, yerr=stds, marker="o", capsize=3)
    ax.set_xlabel("shots per class")
    ax.set_ylabel("target test accuracy (%)")
    ax.set_xscale("log")
    ax.set_xticks(shots)
    ax.set_xticklabels([str(s) for s in shots])
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def cmd_report(args) -> int:
    root = Path(args.runs)
    accuracy_files = sorted(root.rglob("accuracy.json"))
    if not accuracy_files:
        raise FileNotFoundError(f"no runs found under {root}")
    by_shot: dict[int, list[float]] = {}
    for path in accuracy_files:
        payload = json.loads(path.read_text())
        by_shot.setdefault(int(payload["shot_count"]), []).append(float(payload["accuracy"]))
    rows = []
    for shot in sorted(by_shot):
        accs = np.array(by_shot[shot])
        rows.append(
            {
                "shot_count": shot,
                "runs": len(accs),
                "mean_accuracy": float(accs.mean()),
                "std_accuracy": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
            }
        )
    out = Path(args.out or root)
    out.mkdir(parents=True, exist_ok=True)
    _write_json_atomic(out / "report.json", {"rows": rows})
    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["shot_count", "runs", "mean_accuracy", "std_accuracy"])
        for row in rows:
            writer.writerow(
                [row["shot_count"], row["runs"], f"{row['mean_accuracy']:.4f}", f"{row['std_accuracy']:.4f}"]
            )
    for row in rows:
        print(
            f"shot {row['shot_count']:>3}: {row['mean_accuracy']:6.2f}% "
            f"± {row['std_accuracy']:.2f} over {row['runs']} runs"
        )
    return 0


def cmd_relation_sets(args) -> int:
    from math import comb

    total = comb(args.length, args.scale)
    count = total if args.count is None else args.count
    for t in sample_relation_tuples(args.length, args.scale, count, seed=args.seed or 0):
        print(" ".join(str(i) for i in t))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relamix",
        description="Few-shot domain adaptation experiment harness on snippet features",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a paired source/target dataset")
    p.add_argument("--out", default=None)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class-source", type=int, default=100)
    p.add_argument("--per-class-target", type=int, default=40)
    p.add_argument("--snippets", type=int, default=5)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--rotation", type=float, default=0.5)
    p.add_argument("--bias", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-train-fraction", type=float, default=0.5)
    p.add_argument("--center-collapse", type=float, default=0.0)
    p.set_defaults(handler=cmd_gen_synth)

    p = sub.add_parser("import", help="window raw frame-feature streams into a snippet dataset")
    p.add_argument("--src", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--pad", type=int, default=8)
    p.set_defaults(handler=cmd_import)

    p = sub.add_parser("stats", help="dump per-class snippet statistics of a source dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("baseline", help="run the statistical baselines")
    p.add_argument("--source", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_baseline)

    def add_train_args(p):
        p.add_argument("--source", required=True)
        p.add_argument("--target-pool", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--per-class-synth", type=int, default=None, dest="per_class_synth")
        p.add_argument("--ablate", default=None, help="comma list: rd_mhsa,scale_mhsa,rd,sdfm,cdia")
        p.add_argument("--negatives", choices=["mixed", "source_only"], default=None)
        p.add_argument(
            "--cdia-positives", choices=["prototypes", "permuted"], default=None,
            dest="cdia_positives",
        )
        p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="train one model")
    add_train_args(p)
    p.add_argument("--test", default=None)
    p.add_argument("--shots", default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--plan-seed", type=int, default=0)
    p.add_argument("--tuples-per-scale", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep", help="train over a shot x seed grid and plot the trend")
    add_train_args(p)
    p.add_argument("--test", required=True)
    p.add_argument("--shots", default="1,5,10,20")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--parallel", type=int, default=1, help="concurrent (shot, seed) cells")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("report", help="aggregate accuracy over finished runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("relation-sets", help="dump relation tuples for a sequence length")
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_relation_sets)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
