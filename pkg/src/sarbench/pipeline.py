"""Training and inference orchestration.

One experiment = one :class:`ExperimentConfig`: a model shape, the technique
switches (label smoothing, mixup, cosine loss, Gaussian input noise, feature
dropout, adversarial training, shift-only augmentation), the randomization
ranges, and the optimizer schedule.  Every epoch draws fresh augmentation
parameters per image, so the network never sees the same rendering twice.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, fgsm_l2, pgd_linf
from .augment import RandomizationConfig, augment_batch, circular_shift
from .dataset import SarDataset
from .errors import TrainingDivergedError, ValidationError
from .nn import (
    LossConfig,
    Model,
    ModelConfig,
    OneCycleSchedule,
    loss_and_gradients,
    mixup_batch,
    one_cycle_at,
    sgd_step,
    softmax,
)
from .scene import qpm_scale
from .seeding import derive_seed, rng_for

__all__ = [
    "ScheduleConfig",
    "ExperimentConfig",
    "Ensemble",
    "EpochLog",
    "PreparedDataset",
    "EvalResult",
    "prepare_plain_images",
    "train_model",
    "train_ensemble",
    "predict_proba",
    "bag_predict",
    "ttda_predict",
    "make_predictor",
    "evaluate",
    "write_train_log",
    "write_predictions",
]


@dataclass(frozen=True)
class ScheduleConfig:
    """One-cycle shape; total steps are derived from epochs times batches."""

    lr_max: float = 0.05
    lr_div: float = 10.0
    lr_final_div: float = 100.0
    momentum_max: float = 0.95
    momentum_min: float = 0.85
    peak_fraction: float = 0.3


@dataclass(frozen=True)
class ExperimentConfig:
    """A complete training recipe; flags compose freely."""

    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig(
        label_smoothing_alpha=0.1, gaussian_input_noise_sigma=0.05, mixup_alpha=0.2
    )
    attack: AttackConfig | None = None
    randomization: RandomizationConfig | None = None
    label_smoothing: bool = False
    mixup: bool = False
    cosine_loss: bool = False
    gaussian_noise: bool = False
    dropout: bool = False
    adversarial_training: bool = False
    random_shift_only: bool = False
    epochs: int = 150
    batch_size: int = 128
    weight_decay: float = 1e-4
    schedule: ScheduleConfig = ScheduleConfig()
    bag_size: int = 10
    ttda_variants: int = 20
    master_seed: int = 0
    augment_parallelism: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.bag_size < 1:
            raise ValidationError("epochs, batch_size and bag_size must be >= 1")
        if self.ttda_variants < 0:
            raise ValidationError("ttda_variants must be >= 0")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")

    def effective_loss(self) -> LossConfig:
        """The LossConfig actually used, derived from the technique flags."""
        return LossConfig(
            kind="cosine" if self.cosine_loss else "cross_entropy",
            label_smoothing_alpha=self.loss.label_smoothing_alpha if self.label_smoothing else 0.0,
            gaussian_input_noise_sigma=(
                self.loss.gaussian_input_noise_sigma if self.gaussian_noise else 0.0
            ),
            mixup_alpha=self.loss.mixup_alpha if self.mixup else 0.0,
        )

    def effective_model(self) -> ModelConfig:
        return replace(
            self.model, dropout_rate=self.model.dropout_rate if self.dropout else 0.0
        )

    def to_dict(self) -> dict:
        doc = {
            "model": self.model.to_dict(),
            "loss": dataclasses.asdict(self.loss),
            "attack": dataclasses.asdict(self.attack) if self.attack else None,
            "randomization": dataclasses.asdict(self.randomization) if self.randomization else None,
            "schedule": dataclasses.asdict(self.schedule),
        }
        for name in (
            "label_smoothing", "mixup", "cosine_loss", "gaussian_noise", "dropout",
            "adversarial_training", "random_shift_only", "epochs", "batch_size",
            "weight_decay", "bag_size", "ttda_variants", "master_seed",
            "augment_parallelism",
        ):
            doc[name] = getattr(self, name)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        def tupled(d):
            return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}

        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in doc.items() if k in known}
        kwargs["model"] = ModelConfig.from_dict(doc["model"])
        kwargs["loss"] = LossConfig(**doc["loss"])
        kwargs["attack"] = AttackConfig(**doc["attack"]) if doc.get("attack") else None
        kwargs["randomization"] = (
            RandomizationConfig(**tupled(doc["randomization"])) if doc.get("randomization") else None
        )
        kwargs["schedule"] = ScheduleConfig(**doc["schedule"])
        return cls(**kwargs)


@dataclass
class Ensemble:
    """Independently trained model snapshots whose predictions are averaged."""

    models: list[Model]
    seeds: list[int]

    def __post_init__(self):
        if not self.models:
            raise ValidationError("ensemble must be nonempty")
        k = self.models[0].n_classes
        if any(m.n_classes != k for m in self.models):
            raise ValidationError("ensemble members disagree on class count")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    mean_loss: float
    train_accuracy: float
    lr: float
    momentum: float


@dataclass
class PreparedDataset:
    """Network-ready images in [0, 1] with their labels."""

    images: np.ndarray  # (N, H, W) float32
    labels: np.ndarray  # (N,)


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray  # (K,)
    confusion: np.ndarray  # (K, K) rows = true class


def prepare_plain_images(dataset: SarDataset) -> np.ndarray:
    """Raw rendered inputs: quarter-power scaled magnitudes in [0, 1]."""
    out = np.empty(dataset.signatures.shape, dtype=np.float32)
    for i in range(len(dataset)):
        out[i] = qpm_scale(np.abs(dataset.signatures[i])) / np.float32(255.0)
    return out


def _epoch_images(
    config: ExperimentConfig,
    dataset: SarDataset,
    signatures: list,
    plain: np.ndarray | None,
    seed: int,
    epoch: int,
) -> np.ndarray:
    """The training images for one epoch under the configured augmentation."""
    if config.randomization is not None and not config.random_shift_only:
        return augment_batch(
            signatures,
            config.randomization,
            epoch_seed=derive_seed(seed, 1, epoch),
            parallelism=config.augment_parallelism,
        )
    if config.random_shift_only:
        lo, hi = (
            config.randomization.shift_range_px if config.randomization else (-5, 5)
        )
        out = np.empty_like(plain)
        for i in range(len(plain)):
            rng = rng_for(seed, 1, epoch, i)
            dx = int(rng.integers(lo, hi, endpoint=True))
            dy = int(rng.integers(lo, hi, endpoint=True))
            out[i] = circular_shift(plain[i], dx, dy)
        return out
    return plain


def predict_proba(model: Model, batch: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode class probabilities for a (N,1,H,W) batch."""
    chunks = [
        softmax(model.forward(batch[i : i + batch_size]))
        for i in range(0, len(batch), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def train_model(
    config: ExperimentConfig, train_dataset: SarDataset, seed: int
) -> tuple[Model, list[EpochLog]]:
    """Train one model; returns the model and the per-epoch log.

    A non-finite loss or parameter aborts with the offending epoch index.
    """
    if len(train_dataset) == 0:
        raise ValidationError("training dataset is empty")
    eff_loss = config.effective_loss()
    model = Model(config.effective_model(), seed=derive_seed(seed, 0))
    attack = config.attack or AttackConfig()

    n = len(train_dataset)
    k = model.n_classes
    targets_all = np.eye(k, dtype=np.float32)[train_dataset.labels]
    signatures = [train_dataset.signature_at(i) for i in range(n)]
    needs_plain = config.randomization is None or config.random_shift_only
    plain = prepare_plain_images(train_dataset) if needs_plain else None

    steps_per_epoch = math.ceil(n / config.batch_size)
    schedule = OneCycleSchedule(
        total_steps=config.epochs * steps_per_epoch,
        lr_max=config.schedule.lr_max,
        lr_div=config.schedule.lr_div,
        lr_final_div=config.schedule.lr_final_div,
        momentum_max=config.schedule.momentum_max,
        momentum_min=config.schedule.momentum_min,
        peak_fraction=config.schedule.peak_fraction,
    )

    logs: list[EpochLog] = []
    gstep = 0
    for epoch in range(config.epochs):
        images = _epoch_images(config, train_dataset, signatures, plain, seed, epoch)
        x_all = images[:, None, :, :]
        order = rng_for(seed, 2, epoch).permutation(n)
        losses = []
        lr = momentum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = x_all[idx]
            tb = targets_all[idx]
            if eff_loss.gaussian_input_noise_sigma > 0.0:
                noise = rng_for(seed, 4, gstep).standard_normal(xb.shape, dtype=np.float32)
                xb = np.clip(xb + eff_loss.gaussian_input_noise_sigma * noise, 0.0, 1.0)
            if eff_loss.mixup_alpha > 0.0:
                mix_rng = rng_for(seed, 5, gstep)
                perm = mix_rng.permutation(len(xb))
                xb, tb = mixup_batch(xb, tb, xb[perm], tb[perm], eff_loss.mixup_alpha, mix_rng)
            if config.adversarial_training:
                if attack.kind == "fgsm_l2":
                    xb = fgsm_l2(model, xb, tb, attack.epsilon, eff_loss, attack.sign_first)
                else:
                    xb = pgd_linf(
                        model, xb, tb, attack.epsilon, attack.pgd_steps,
                        attack.step_size(), eff_loss, rng=rng_for(seed, 6, gstep),
                    )
            loss, grads = loss_and_gradients(
                model, xb, tb, eff_loss, train_mode=True, rng=rng_for(seed, 3, gstep)
            )
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            lr, momentum = one_cycle_at(schedule, gstep)
            sgd_step(model, grads, lr, momentum, config.weight_decay)
            losses.append(loss)
            gstep += 1

        for arr in model.params.values():
            if not np.all(np.isfinite(arr)):
                raise TrainingDivergedError(epoch)
        probs = predict_proba(model, x_all)
        acc = float(np.mean(probs.argmax(axis=1) == train_dataset.labels))
        logs.append(EpochLog(epoch, float(np.mean(losses)), acc, lr, momentum))
    return model, logs


def train_ensemble(
    config: ExperimentConfig, train_dataset: SarDataset, seed: int
) -> tuple[Ensemble, list[list[EpochLog]]]:
    """Train ``bag_size`` independent members with derived seeds."""
    models, logs, seeds = [], [], []
    for member in range(config.bag_size):
        member_seed = derive_seed(seed, 7, member)
        m, log = train_model(config, train_dataset, member_seed)
        models.append(m)
        logs.append(log)
        seeds.append(member_seed)
    return Ensemble(models, seeds), logs


def bag_predict(ensemble: Ensemble | list[Model], batch: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the member softmax outputs."""
    models = ensemble.models if isinstance(ensemble, Ensemble) else list(ensemble)
    if not models:
        raise ValidationError("bag_predict needs a nonempty ensemble")
    k = models[0].n_classes
    if any(m.n_classes != k for m in models):
        raise ValidationError("ensemble members disagree on class count")
    acc = predict_proba(models[0], batch)
    for m in models[1:]:
        acc = acc + predict_proba(m, batch)
    return acc / len(models)


def ttda_predict(
    predictor: Model | Ensemble,
    image: np.ndarray,
    n_variants: int = 20,
    shift_range: tuple[int, int] = (-5, 5),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Average prediction over randomly shifted copies of one test image."""
    if rng is None:
        rng = np.random.default_rng(0)
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    lo, hi = shift_range
    variants = np.stack(
        [
            circular_shift(img, int(rng.integers(lo, hi, endpoint=True)),
                           int(rng.integers(lo, hi, endpoint=True)))
            for _ in range(n_variants)
        ]
    )
    probs = _probs_of(predictor, variants[:, None, :, :])
    return probs.mean(axis=0)


def _probs_of(predictor, batch4d: np.ndarray) -> np.ndarray:
    if isinstance(predictor, Ensemble) or isinstance(predictor, list):
        return bag_predict(predictor, batch4d)
    if isinstance(predictor, Model):
        return predict_proba(predictor, batch4d)
    return predictor(batch4d)


def make_predictor(
    model_or_ensemble: Model | Ensemble,
    ttda_variants: int = 0,
    shift_range: tuple[int, int] = (-5, 5),
    seed: int = 0,
):
    """A batch -> probabilities callable, optionally with test-time shifts.

    TTDA draws use an rng derived from (seed, record index) so evaluation
    is reproducible.
    """
    if ttda_variants <= 0:
        return lambda batch: _probs_of(model_or_ensemble, batch)

    def predict(batch):
        rows = [
            ttda_predict(
                model_or_ensemble, batch[i], ttda_variants, shift_range, rng_for(seed, 8, i)
            )
            for i in range(len(batch))
        ]
        return np.stack(rows)

    return predict


def evaluate(predictor, test_dataset: PreparedDataset) -> EvalResult:
    """Overall accuracy, per-class accuracies, and the confusion matrix."""
    if len(test_dataset.labels) == 0:
        raise ValidationError("test dataset is empty")
    probs = _probs_of(predictor, test_dataset.images[:, None, :, :])
    pred = probs.argmax(axis=1)
    k = probs.shape[1]
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (test_dataset.labels, pred), 1)
    row_sums = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion), row_sums, out=np.zeros(k, dtype=float), where=row_sums > 0
    )
    overall = float(np.trace(confusion) / confusion.sum())
    return EvalResult(overall, per_class, confusion)


def write_train_log(logs: list[EpochLog], path) -> None:
    lines = ["epoch,mean_loss,train_accuracy,lr,momentum"]
    for row in logs:
        lines.append(
            f"{row.epoch},{row.mean_loss:.6f},{row.train_accuracy:.6f},"
            f"{row.lr:.6f},{row.momentum:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_predictions(probs: np.ndarray, labels: np.ndarray, path) -> None:
    """Predictions CSV: record_id, true/predicted class, then K probabilities."""
    k = probs.shape[1]
    header = "record_id,true_class,predicted_class," + ",".join(
        f"prob_{j}" for j in range(k)
    )
    lines = [header]
    pred = probs.argmax(axis=1)
    for i in range(len(labels)):
        cells = ",".join(f"{p:.6f}" for p in probs[i])
        lines.append(f"{i},{int(labels[i])},{int(pred[i])},{cells}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
