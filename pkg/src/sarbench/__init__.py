"""sarbench: sim-to-real robustness workbench for SAR target recognition.

Synthesizes point-scatterer SAR imagery, applies domain-randomization
augmentation at throughput, trains a micro-CNN with L2-budget single-step
adversarial training and the standard regularizer stack, and measures
robustness under deliberate train/test ground-truth mismatch.
"""

from .attacks import AttackConfig, fgsm_l2, pgd_linf
from .augment import (
    AugmentationParams,
    RandomizationConfig,
    add_thermal_noise,
    augment_batch,
    brightpoint_dropout,
    circular_shift,
    compose_augmented,
    generate_clutter,
    resample_resolution,
    sample_params,
)
from .dataset import (
    DatasetManifest,
    GeometryGrid,
    SarDataset,
    VariantPolicy,
    generate_dataset,
    load_dataset,
    render_records,
)
from .errors import (
    DatasetIOError,
    EmptyTargetError,
    TrainingDivergedError,
    ValidationError,
)
from .harness import (
    AblationGrid,
    BenchmarkConfig,
    GridRow,
    MetricsReport,
    build_benchmark,
    generate_benchmark,
    prepare_test_images,
    robustness_rows,
    run_grid,
    table_ablation_rows,
    write_metrics,
)
from .nn import (
    LossConfig,
    Model,
    ModelConfig,
    OneCycleSchedule,
    input_gradient,
    load_model,
    loss_and_gradients,
    mixup_batch,
    one_cycle_at,
    save_model,
    sgd_step,
    softmax,
)
from .pipeline import (
    Ensemble,
    EpochLog,
    EvalResult,
    ExperimentConfig,
    PreparedDataset,
    ScheduleConfig,
    bag_predict,
    evaluate,
    make_predictor,
    prepare_plain_images,
    train_ensemble,
    train_model,
    ttda_predict,
)
from .psf import TaylorPsf, taylor_coefficients, taylor_psf, taylor_window_value
from .scene import (
    Scatterer,
    ScattererTarget,
    SensorModel,
    Substructure,
    TargetSignature,
    ViewGeometry,
    compute_shadow_mask,
    default_sensor,
    make_class_prototypes,
    perturb_variant,
    qpm_scale,
    render_signature,
    rotate_xy,
)
from .seeding import derive_seed, rng_for

__version__ = "0.1.0"
