"""Experiment driver: mismatch benchmark, comparison grids, metrics files.

The benchmark deliberately mismatches train and test: training images are
clean renders of the class prototypes on one azimuth grid; test images are
renders of perturbed variants (rotated turret, jittered scatterers) on an
offset azimuth grid, composited with clutter, noise, and a random position
offset the trainer cannot know.  That is the desk-scale stand-in for
training on synthetic data and testing on measurements.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .augment import AugmentationParams, RandomizationConfig, compose_augmented
from .dataset import (
    DatasetManifest,
    GeometryGrid,
    SarDataset,
    VariantPolicy,
    class_variant,
    generate_dataset,
    render_records,
)
from .errors import ValidationError
from .nn import ModelConfig
from .pipeline import (
    EvalResult,
    ExperimentConfig,
    PreparedDataset,
    ScheduleConfig,
    evaluate,
    make_predictor,
    train_ensemble,
)
from .scene import SensorModel, make_class_prototypes
from .seeding import derive_seed, rng_for

__all__ = [
    "BenchmarkConfig",
    "GridRow",
    "AblationGrid",
    "RowMetrics",
    "MetricsReport",
    "build_benchmark",
    "generate_benchmark",
    "prepare_test_images",
    "experiment_model",
    "robustness_rows",
    "table_ablation_rows",
    "run_grid",
    "write_metrics",
]


@dataclass(frozen=True)
class BenchmarkConfig:
    """The deliberate train/test mismatch benchmark, desk scale by default."""

    n_classes: int = 10
    scatterer_count_range: tuple[int, int] = (24, 40)
    footprint_m: float = 4.0
    image_height: int = 32
    image_width: int = 32
    train_azimuth_step_deg: float = 10.0
    test_azimuth_offset_deg: float = 5.0
    train_depressions_deg: tuple[float, ...] = (17.0,)
    test_depressions_deg: tuple[float, ...] = (15.0,)
    # Mismatch dials (variant construction for the test split).
    position_jitter_sigma_m: float = 0.08
    amplitude_jitter_rel: float = 0.2
    turret_rotation_max_deg: float = 45.0
    # Pseudo-measurement appearance of the test images.
    test_clutter_level_db: float = -15.0
    test_clutter_gamma_shape: float = 4.0
    test_noise_db: float = -20.0
    test_shift_range_px: tuple[int, int] = (-5, 5)
    target_height_m: float = 2.5
    version: int = 1

    def sensor(self) -> SensorModel:
        return SensorModel(image_height=self.image_height, image_width=self.image_width)

    def train_grid(self) -> GeometryGrid:
        az = tuple(np.arange(0.0, 360.0, self.train_azimuth_step_deg))
        return GeometryGrid(az, self.train_depressions_deg)

    def test_grid(self) -> GeometryGrid:
        az = tuple(
            (a + self.test_azimuth_offset_deg) % 360.0
            for a in np.arange(0.0, 360.0, self.train_azimuth_step_deg)
        )
        return GeometryGrid(az, self.test_depressions_deg)

    def variant_policy(self) -> VariantPolicy:
        return VariantPolicy(
            position_jitter_sigma=self.position_jitter_sigma_m,
            amplitude_jitter_rel=self.amplitude_jitter_rel,
            turret_rotation_max_deg=self.turret_rotation_max_deg,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchmarkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {
            k: tuple(v) if isinstance(v, list) else v for k, v in doc.items() if k in known
        }
        return cls(**kwargs)


def _benchmark_parts(config: BenchmarkConfig, seed: int):
    prototypes = make_class_prototypes(
        config.n_classes,
        config.scatterer_count_range,
        config.footprint_m,
        seed=derive_seed(seed, 10),
        sensor=config.sensor(),
    )
    return prototypes, config.train_grid(), config.test_grid(), config.sensor()


def build_benchmark(config: BenchmarkConfig, seed: int) -> tuple[SarDataset, SarDataset]:
    """In-memory benchmark: (clean train split, mismatched test split)."""
    prototypes, train_grid, test_grid, sensor = _benchmark_parts(config, seed)
    train = render_records(prototypes, train_grid, sensor, config.target_height_m)
    variants = [
        class_variant(p, config.variant_policy(), derive_seed(seed, 11)) for p in prototypes
    ]
    test = render_records(variants, test_grid, sensor, config.target_height_m)
    return train, test


def generate_benchmark(config: BenchmarkConfig, seed: int, out_dir: Path) -> DatasetManifest:
    """Same construction as :func:`build_benchmark`, written to disk."""
    prototypes, train_grid, test_grid, sensor = _benchmark_parts(config, seed)
    return generate_dataset(
        prototypes,
        train_grid,
        test_grid,
        sensor,
        config.variant_policy(),
        derive_seed(seed, 11),
        out_dir,
        config.target_height_m,
    )


def prepare_test_images(
    test: SarDataset, config: BenchmarkConfig, seed: int
) -> PreparedDataset:
    """Composite the test split into pseudo-measured images, one fixed
    realization per record: fixed clutter and noise levels, a random
    circular offset, native resolution, no bright-point dropout."""
    sensor = test.sensor
    lo, hi = config.test_shift_range_px
    images = np.empty(test.signatures.shape, dtype=np.float32)
    for i in range(len(test)):
        rng = rng_for(seed, 20, i)
        params = AugmentationParams(
            range_resolution=sensor.range_resolution,
            cross_range_resolution=sensor.cross_range_resolution,
            clutter_level_db=config.test_clutter_level_db,
            clutter_gamma_shape=config.test_clutter_gamma_shape,
            thermal_noise_db=config.test_noise_db,
            dx=int(rng.integers(lo, hi, endpoint=True)),
            dy=int(rng.integers(lo, hi, endpoint=True)),
            brightpoint_enabled=False,
            brightpoint_threshold_ratio=0.5,
            brightpoint_drop_fraction=0.5,
            dropout_seed=0,
        )
        images[i] = compose_augmented(test.signature_at(i), params, rng)
    return PreparedDataset(images, test.labels.copy())


# ---------------------------------------------------------------------------
# experiment rows


def experiment_model(config: BenchmarkConfig, width_multiplier: float = 1.0) -> ModelConfig:
    """The desk-scale experiment network for this benchmark's image size."""
    return ModelConfig(
        input_hw=(config.image_height, config.image_width),
        n_classes=config.n_classes,
        stages=((8, 2), (16, 2), (32, 2)),
        skip_connections=True,
        dropout_rate=0.4,
        norm=True,
        width_multiplier=width_multiplier,
    )


def _desk_schedule() -> ScheduleConfig:
    return ScheduleConfig(lr_max=0.05)


def robustness_rows(
    benchmark: BenchmarkConfig, epochs: int = 90, attack_epsilon: float = 0.25
) -> list[tuple[str, ExperimentConfig]]:
    """The directional comparison: bare baseline up to shift + DR + AT.

    Single models (no bagging), no test-time augmentation; "dr" rows hold
    the target centered (zero shift range) so the shift contribution is
    measured separately.  The attack budget is scaled down for these
    32x32 images; the stock AttackConfig default stays at 2.0.
    """
    base = ExperimentConfig(
        model=experiment_model(benchmark),
        epochs=epochs,
        batch_size=64,
        schedule=_desk_schedule(),
        bag_size=1,
        ttda_variants=0,
    )
    dr_no_shift = RandomizationConfig(shift_range_px=(0, 0))
    dr_shift = RandomizationConfig()
    attack = AttackConfig(kind="fgsm_l2", epsilon=attack_epsilon)
    return [
        ("baseline", base),
        ("shift", replace(base, random_shift_only=True)),
        ("dr", replace(base, randomization=dr_no_shift)),
        ("dr_at", replace(base, randomization=dr_no_shift, adversarial_training=True, attack=attack)),
        ("dr_at_shift", replace(base, randomization=dr_shift, adversarial_training=True, attack=attack)),
    ]


def table_ablation_rows(
    benchmark: BenchmarkConfig, epochs: int = 10, bag_size: int = 10
) -> list[tuple[str, ExperimentConfig]]:
    """The full ablation ladder: every published-row combination of
    bagging, the wide model, random shift, domain randomization,
    adversarial training, and test-time augmentation, down to the bare
    baseline."""
    def cfg(width=1.0, shift_only=False, dr=False, at=False, bag=1, ttda=0):
        return ExperimentConfig(
            model=experiment_model(benchmark, width_multiplier=width),
            randomization=RandomizationConfig() if dr else None,
            random_shift_only=shift_only,
            adversarial_training=at,
            attack=AttackConfig() if at else None,
            epochs=epochs,
            batch_size=128,
            schedule=_desk_schedule(),
            bag_size=bag,
            ttda_variants=ttda,
        )

    return [
        ("bag_wide_shift_dr_at_ttda", cfg(width=2.0, dr=True, at=True, bag=bag_size, ttda=20)),
        ("bag_wide_shift_dr_at", cfg(width=2.0, dr=True, at=True, bag=bag_size)),
        ("wide_shift_dr_at", cfg(width=2.0, dr=True, at=True)),
        ("shift_dr_at", cfg(dr=True, at=True)),
        ("shift_dr", cfg(dr=True)),
        ("shift", cfg(shift_only=True)),
        ("bare", cfg()),
    ]


@dataclass(frozen=True)
class GridRow:
    name: str
    config: ExperimentConfig


@dataclass
class AblationGrid:
    rows: list[GridRow]
    replicates: int
    benchmark: BenchmarkConfig
    seed: int

    def __post_init__(self):
        names = [r.name for r in self.rows]
        if len(set(names)) != len(names):
            raise ValidationError("grid row names must be unique")
        if self.replicates < 1:
            raise ValidationError("replicates must be >= 1")


@dataclass
class RowMetrics:
    name: str
    accuracies: list[float]
    per_class: np.ndarray | None  # (replicates, K)
    confusion: np.ndarray | None  # (K, K), first replicate
    runtimes_s: list[float]
    failed: bool = False
    error: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def min(self) -> float:
        return float(np.min(self.accuracies)) if self.accuracies else float("nan")

    @property
    def max(self) -> float:
        return float(np.max(self.accuracies)) if self.accuracies else float("nan")


@dataclass
class MetricsReport:
    rows: list[RowMetrics]
    class_names: list[str]
    total_runtime_s: float


def _run_row(
    row: GridRow, replicate: int, train: SarDataset, test_prep: PreparedDataset, seed: int
) -> tuple[float, np.ndarray, np.ndarray]:
    ensemble, _ = train_ensemble(row.config, train, seed)
    predictor = make_predictor(
        ensemble,
        ttda_variants=row.config.ttda_variants,
        shift_range=(-5, 5),
        seed=derive_seed(seed, 9),
    )
    result: EvalResult = evaluate(predictor, test_prep)
    return result.accuracy, result.per_class_accuracy, result.confusion


def run_grid(
    grid: AblationGrid,
    train: SarDataset | None = None,
    test_prep: PreparedDataset | None = None,
) -> MetricsReport:
    """Train and evaluate every row; a failed row is recorded, not fatal."""
    t_start = time.perf_counter()
    if train is None or test_prep is None:
        train, test = build_benchmark(grid.benchmark, grid.seed)
        test_prep = prepare_test_images(test, grid.benchmark, derive_seed(grid.seed, 12))
    rows: list[RowMetrics] = []
    for ri, row in enumerate(grid.rows):
        accs, runtimes, per_class_rows = [], [], []
        confusion = None
        failed, error = False, ""
        for rep in range(grid.replicates):
            rep_seed = derive_seed(grid.seed, 13, ri, rep)
            t0 = time.perf_counter()
            try:
                acc, per_class, conf = _run_row(row, rep, train, test_prep, rep_seed)
            except Exception as e:  # noqa: BLE001 - row isolation is the contract
                failed, error = True, f"{type(e).__name__}: {e}"
                break
            runtimes.append(time.perf_counter() - t0)
            accs.append(acc)
            per_class_rows.append(per_class)
            if confusion is None:
                confusion = conf
        rows.append(
            RowMetrics(
                name=row.name,
                accuracies=accs,
                per_class=np.stack(per_class_rows) if per_class_rows else None,
                confusion=confusion,
                runtimes_s=runtimes,
                failed=failed,
                error=error,
            )
        )
    return MetricsReport(rows, train.class_names, time.perf_counter() - t_start)


def write_metrics(report: MetricsReport, out_dir: Path) -> list[Path]:
    """Deterministic CSVs: per-replicate metrics, a summary, and one
    confusion matrix file per row.  Floats are fixed at 4 decimals."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    header = "row_name,replicate,overall_acc,runtime_s" + "".join(
        f",{c}_acc" for c in report.class_names
    )
    lines = [header]
    for row in report.rows:
        for rep, acc in enumerate(row.accuracies):
            cells = "".join(f",{v:.4f}" for v in row.per_class[rep])
            lines.append(f"{row.name},{rep},{acc:.4f},{row.runtimes_s[rep]:.4f}{cells}")
        if row.failed:
            blanks = "".join("," for _ in report.class_names)
            lines.append(f"{row.name},failed,nan,nan{blanks}")
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(metrics_path)

    lines = ["row_name,mean_acc,min_acc,max_acc,runtime_s_total,failed"]
    for row in report.rows:
        lines.append(
            f"{row.name},{row.mean:.4f},{row.min:.4f},{row.max:.4f},"
            f"{sum(row.runtimes_s):.4f},{int(row.failed)}"
        )
    summary_path = out_dir / "summary.csv"
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(summary_path)

    for row in report.rows:
        if row.confusion is None:
            continue
        lines = ["true_class," + ",".join(report.class_names)]
        for r, name in enumerate(report.class_names):
            lines.append(name + "," + ",".join(str(int(v)) for v in row.confusion[r]))
        path = out_dir / f"confusion_{row.name}.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    return written
