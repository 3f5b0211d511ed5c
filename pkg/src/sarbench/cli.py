"""Command line driver.

Subcommands: ``generate`` (build the benchmark datasets), ``augment``
(offline augmentation preview as PGM images), ``train``, ``eval``,
``ablate`` (built-in comparison grid), and ``bench`` (augmentation
throughput).  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .augment import RandomizationConfig, augment_batch, sample_params
from .dataset import load_dataset
from .harness import (
    AblationGrid,
    BenchmarkConfig,
    GridRow,
    build_benchmark,
    generate_benchmark,
    prepare_test_images,
    robustness_rows,
    run_grid,
    table_ablation_rows,
    write_metrics,
)
from .nn import load_model, save_model
from .pipeline import (
    Ensemble,
    ExperimentConfig,
    evaluate,
    make_predictor,
    train_model,
    write_predictions,
    write_train_log,
)
from .scene import default_sensor, qpm_scale
from .seeding import derive_seed

__all__ = ["cli_dispatch", "main"]


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary PGM (P5), 8 bits per pixel."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError(f"{args.config}: config must be a JSON object")
    return doc


def _benchmark_from(doc: dict) -> BenchmarkConfig:
    return BenchmarkConfig.from_dict(doc.get("benchmark", {}))


def _require_out(args) -> Path:
    if args.out is None:
        raise ValueError("this command needs --out <dir>")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_generate(args) -> int:
    doc = _load_config(args)
    out = _require_out(args)
    manifest = generate_benchmark(_benchmark_from(doc), args.seed, out)
    print(f"wrote {sum(manifest.split_counts.values())} records to {out}")
    return 0


def _cmd_augment(args) -> int:
    doc = _load_config(args)
    out = _require_out(args)
    count = int(doc.get("count", 16))
    rand = RandomizationConfig(
        **{k: tuple(v) if isinstance(v, list) else v for k, v in doc.get("randomization", {}).items()}
    )
    if "dataset_dir" in doc:
        ds = load_dataset(doc["dataset_dir"], doc.get("split", "train"))
        signatures = [ds.signature_at(i) for i in range(min(count, len(ds)))]
    else:
        train, _ = build_benchmark(_benchmark_from(doc), args.seed)
        signatures = [train.signature_at(i) for i in range(min(count, len(train)))]
    images = augment_batch(signatures, rand, epoch_seed=args.seed, parallelism=1)
    for i, img in enumerate(images):
        write_pgm(out / f"augmented_{i:04d}.pgm", np.round(img * 255.0).astype(np.uint8))
    print(f"wrote {len(images)} preview images to {out}")
    return 0


def _cmd_train(args) -> int:
    doc = _load_config(args)
    out = _require_out(args)
    if "dataset_dir" not in doc or "experiment" not in doc:
        raise ValueError("train config needs 'dataset_dir' and 'experiment'")
    config = ExperimentConfig.from_dict(doc["experiment"])
    train_ds = load_dataset(doc["dataset_dir"], "train")
    for member in range(config.bag_size):
        seed = derive_seed(args.seed, 7, member)
        model, logs = train_model(config, train_ds, seed)
        save_model(model, out / f"model_{member:02d}.sarm")
        write_train_log(logs, out / f"train_log_{member:02d}.csv")
        print(f"member {member}: final loss {logs[-1].mean_loss:.4f}, "
              f"train acc {logs[-1].train_accuracy:.4f}")
    return 0


def _cmd_eval(args) -> int:
    doc = _load_config(args)
    out = _require_out(args)
    if "dataset_dir" not in doc:
        raise ValueError("eval config needs 'dataset_dir'")
    test_ds = load_dataset(doc["dataset_dir"], doc.get("split", "test"))
    bench = _benchmark_from(doc)
    prepared = prepare_test_images(test_ds, bench, derive_seed(args.seed, 12))

    if "models" in doc:
        paths = [Path(p) for p in doc["models"]]
    elif "model_dir" in doc:
        paths = sorted(Path(doc["model_dir"]).glob("model_*.sarm"))
    else:
        raise ValueError("eval config needs 'models' or 'model_dir'")
    if not paths:
        raise ValueError("no model checkpoints found")
    ensemble = Ensemble([load_model(p) for p in paths], seeds=[0] * len(paths))
    ttda = int(doc.get("ttda_variants", 0))
    predictor = make_predictor(ensemble, ttda_variants=ttda, seed=derive_seed(args.seed, 8))

    probs = predictor(prepared.images[:, None, :, :])
    write_predictions(probs, prepared.labels, out / "predictions.csv")
    result = evaluate(lambda _batch: probs, prepared)
    lines = ["metric,value", f"overall_acc,{result.accuracy:.4f}"]
    for name, acc in zip(test_ds.class_names, result.per_class_accuracy):
        lines.append(f"{name}_acc,{acc:.4f}")
    (out / "eval_summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"overall accuracy {result.accuracy:.4f} over {len(prepared.labels)} records")
    return 0


def _cmd_ablate(args) -> int:
    doc = _load_config(args)
    out = _require_out(args)
    bench = _benchmark_from(doc)
    epochs = int(doc.get("epochs", 10))
    replicates = int(doc.get("replicates", 1))
    kind = doc.get("rows", "table")
    if kind == "table":
        rows = table_ablation_rows(bench, epochs=epochs, bag_size=int(doc.get("bag_size", 10)))
    elif kind == "robustness":
        rows = robustness_rows(bench, epochs=epochs)
    else:
        raise ValueError(f"unknown rows kind {kind!r} (use 'table' or 'robustness')")
    grid = AblationGrid(
        rows=[GridRow(n, c) for n, c in rows],
        replicates=replicates,
        benchmark=bench,
        seed=args.seed,
    )
    report = run_grid(grid)
    files = write_metrics(report, out)
    for row in report.rows:
        status = "FAILED " + row.error if row.failed else f"mean acc {row.mean:.4f}"
        print(f"{row.name}: {status}")
    print(f"wrote {len(files)} metric files to {out}")
    return 0


def _cmd_bench(args) -> int:
    from .augment import (
        add_thermal_noise,
        brightpoint_dropout,
        circular_shift,
        generate_clutter,
        resample_resolution,
    )
    from .scene import Scatterer, ScattererTarget, ViewGeometry, render_signature

    doc = _load_config(args)
    n_images = int(doc.get("count", 400))
    parallelism = int(doc.get("parallelism", 4))
    sensor = default_sensor(128, 128)
    rng = np.random.default_rng(args.seed)
    scatterers = tuple(
        Scatterer(float(x), float(y), float(a), float(p))
        for x, y, a, p in zip(
            rng.uniform(-8, 8, 40), rng.uniform(-8, 8, 40),
            rng.uniform(0.2, 1.0, 40), rng.uniform(0, 2 * np.pi, 40),
        )
    )
    sig = render_signature(ScattererTarget(scatterers, 0), sensor, ViewGeometry(17.0, 0.0))
    config = RandomizationConfig()

    # End-to-end throughput.
    warm = augment_batch([sig] * 16, config, epoch_seed=0, parallelism=parallelism)
    t0 = time.perf_counter()
    augment_batch([sig] * n_images, config, epoch_seed=args.seed, parallelism=parallelism)
    elapsed = time.perf_counter() - t0
    per_minute = 60.0 * n_images / elapsed

    # Per-stage timing on one representative parameter draw.
    params = sample_params(config, np.random.default_rng(args.seed))
    reps = 50
    stages = {}
    img = sig.image.astype(np.complex64)
    t0 = time.perf_counter()
    for _ in range(reps):
        resample_resolution(img, sensor, params.range_resolution, params.cross_range_resolution)
    stages["resample"] = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        brightpoint_dropout(img, 0.5, 0.5, np.random.default_rng(1))
    stages["brightpoint_dropout"] = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        clutter = generate_clutter(128, 128, params.clutter_level_db, params.clutter_gamma_shape, rng)
    stages["clutter"] = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        add_thermal_noise(img, params.thermal_noise_db, rng)
    stages["thermal_noise"] = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        circular_shift(img, params.dx, params.dy)
    stages["circular_shift"] = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        qpm_scale(np.abs(img + clutter))
    stages["magnitude_qpm"] = (time.perf_counter() - t0) / reps

    print("metric,value")
    print(f"images_per_minute,{per_minute:.1f}")
    print(f"parallelism,{parallelism}")
    print(f"image_size,{sensor.image_height}x{sensor.image_width}")
    for name, sec in stages.items():
        print(f"stage_{name}_ms,{sec * 1e3:.3f}")
    del warm
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "bench": _cmd_bench,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sarbench",
        description="Sim-to-real robustness workbench for SAR target recognition.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "render the benchmark datasets to --out",
        "augment": "write augmented preview images (PGM) to --out",
        "train": "train the configured experiment on a generated dataset",
        "eval": "evaluate checkpoints on the pseudo-measured test split",
        "ablate": "run a built-in comparison grid and write metrics CSVs",
        "bench": "print augmentation throughput and stage timings as CSV",
    }
    for name in _COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", type=str, default=None, help="output directory")
    return parser


def cli_dispatch(argv: list[str]) -> int:
    """Parse and run; returns the process exit code instead of raising."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))
