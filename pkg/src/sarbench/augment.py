"""Runtime domain-randomization augmentation.

Turns (signature, shadow mask) pairs into randomized training images, one
fresh parameter draw per image per epoch.  The pipeline order is fixed:
resolution degradation acts on the coherent signature, bright-point dropout
follows, clutter and thermal noise are composited, and the circular shift
moves the whole composite so the target travels relative to the clutter
realization.  The result is quarter-power scaled and normalized to [0, 1].
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import ValidationError
from .psf import taylor_psf
from .scene import SensorModel, TargetSignature, qpm_scale
from .seeding import derive_seed

__all__ = [
    "RandomizationConfig",
    "AugmentationParams",
    "sample_params",
    "generate_clutter",
    "add_thermal_noise",
    "resample_resolution",
    "brightpoint_dropout",
    "circular_shift",
    "compose_augmented",
    "augment_batch",
]


@dataclass(frozen=True)
class RandomizationConfig:
    """Value ranges for every randomized knob; defaults are the stock ranges."""

    range_resolution_range: tuple[float, float] = (0.203125, 0.35)
    cross_range_resolution_range: tuple[float, float] = (0.21, 0.35)
    clutter_level_range_db: tuple[float, float] = (-20.0, -5.0)
    clutter_gamma_shape_range: tuple[float, float] = (2.0, 10.0)
    thermal_noise_range_db: tuple[float, float] = (-25.0, -15.0)
    shift_range_px: tuple[int, int] = (-5, 5)
    brightpoint_dropout_enabled: bool = True
    brightpoint_threshold_ratio: float = 0.5
    brightpoint_drop_fraction: float = 0.5

    def __post_init__(self):
        for name in (
            "range_resolution_range",
            "cross_range_resolution_range",
            "clutter_level_range_db",
            "clutter_gamma_shape_range",
            "thermal_noise_range_db",
            "shift_range_px",
        ):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
                raise ValidationError(f"{name} must be a finite ordered range, got ({lo}, {hi})")
        if self.clutter_gamma_shape_range[0] <= 0:
            raise ValidationError("gamma shape range must be positive")
        if not 0.0 <= self.brightpoint_threshold_ratio <= 1.0:
            raise ValidationError("brightpoint threshold ratio must be in [0, 1]")
        if not 0.0 <= self.brightpoint_drop_fraction <= 1.0:
            raise ValidationError("brightpoint drop fraction must be in [0, 1]")


@dataclass(frozen=True)
class AugmentationParams:
    """One concrete draw of every knob: a complete augmentation recipe."""

    range_resolution: float
    cross_range_resolution: float
    clutter_level_db: float
    clutter_gamma_shape: float
    thermal_noise_db: float
    dx: int
    dy: int
    brightpoint_enabled: bool
    brightpoint_threshold_ratio: float
    brightpoint_drop_fraction: float
    dropout_seed: int


def sample_params(config: RandomizationConfig, rng: np.random.Generator) -> AugmentationParams:
    """Draw each scalar uniformly from its range, shifts from the integer interval."""
    lo, hi = config.shift_range_px
    return AugmentationParams(
        range_resolution=float(rng.uniform(*config.range_resolution_range)),
        cross_range_resolution=float(rng.uniform(*config.cross_range_resolution_range)),
        clutter_level_db=float(rng.uniform(*config.clutter_level_range_db)),
        clutter_gamma_shape=float(rng.uniform(*config.clutter_gamma_shape_range)),
        thermal_noise_db=float(rng.uniform(*config.thermal_noise_range_db)),
        dx=int(rng.integers(lo, hi, endpoint=True)),
        dy=int(rng.integers(lo, hi, endpoint=True)),
        brightpoint_enabled=config.brightpoint_dropout_enabled,
        brightpoint_threshold_ratio=config.brightpoint_threshold_ratio,
        brightpoint_drop_fraction=config.brightpoint_drop_fraction,
        dropout_seed=int(rng.integers(0, 2**62)),
    )


def generate_clutter(
    height: int, width: int, level_db: float, gamma_shape: float, rng: np.random.Generator
) -> np.ndarray:
    """Complex clutter field with gamma-distributed power and uniform phase.

    Per-pixel power ~ Gamma(k=gamma_shape, theta=P/k) with mean P equal to
    ``10**(level_db/10)``; the amplitude is sqrt(power).
    """
    if gamma_shape <= 0:
        raise ValidationError(f"gamma shape must be > 0, got {gamma_shape}")
    mean_power = 10.0 ** (level_db / 10.0)
    power = rng.standard_gamma(gamma_shape, size=(height, width), dtype=np.float32)
    power *= np.float32(mean_power / gamma_shape)
    phase = rng.random(size=(height, width), dtype=np.float32)
    phase *= np.float32(2.0 * np.pi)
    return (np.sqrt(power) * (np.cos(phase) + 1j * np.sin(phase))).astype(np.complex64)


def add_thermal_noise(
    image: np.ndarray, noise_db: float | None, rng: np.random.Generator
) -> np.ndarray:
    """Add circular complex Gaussian noise with per-pixel power 10**(db/10).

    ``noise_db=None`` means the noise stage is off; the input is returned
    unchanged.
    """
    if noise_db is None:
        return image
    sigma = np.float32(np.sqrt(10.0 ** (noise_db / 10.0) / 2.0))
    real = rng.standard_normal(image.shape, dtype=np.float32)
    imag = rng.standard_normal(image.shape, dtype=np.float32)
    return image + sigma * (real + 1j * imag).astype(np.complex64)


def _axis_window_ratio(n, spacing, native_res, target_res, psf):
    if target_res == native_res:
        return np.ones(n)
    freqs = scipy.fft.fftfreq(n, d=spacing)
    band_new = psf.band_cycles(target_res)
    band_native = psf.band_cycles(native_res)
    ratio = np.zeros(n)
    inside = np.abs(freqs) <= band_new / 2.0
    ratio[inside] = psf.window_at(freqs[inside], target_res) / psf.window_at(
        freqs[inside], native_res
    )
    return ratio


def resample_resolution(
    signature: np.ndarray,
    from_sensor: SensorModel,
    to_range_res: float,
    to_cross_res: float,
) -> np.ndarray:
    """Degrade the signature to a coarser resolution, keeping pixel spacing.

    Implemented in the spatial-frequency domain: the native Taylor band
    window is replaced by the narrower window of the target resolution.
    Only degradation is allowed (``to_res >= native``).
    """
    if to_range_res < from_sensor.range_resolution or to_cross_res < from_sensor.cross_range_resolution:
        raise ValidationError(
            f"can only degrade resolution: requested ({to_range_res}, {to_cross_res}) m, "
            f"native ({from_sensor.range_resolution}, {from_sensor.cross_range_resolution}) m"
        )
    if (
        to_range_res == from_sensor.range_resolution
        and to_cross_res == from_sensor.cross_range_resolution
    ):
        return signature.copy()

    psf = taylor_psf(from_sensor.taylor_sidelobe_db, from_sensor.taylor_nbar)
    H, W = signature.shape
    r_rows = _axis_window_ratio(H, from_sensor.range_spacing, from_sensor.range_resolution,
                                to_range_res, psf)
    r_cols = _axis_window_ratio(W, from_sensor.cross_range_spacing,
                                from_sensor.cross_range_resolution, to_cross_res, psf)
    spectrum = scipy.fft.fft2(signature)
    spectrum *= r_rows[:, None].astype(spectrum.real.dtype)
    spectrum *= r_cols[None, :].astype(spectrum.real.dtype)
    return scipy.fft.ifft2(spectrum).astype(signature.dtype)


def brightpoint_dropout(
    signature: np.ndarray,
    drop_fraction: float,
    threshold_ratio: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zero a random subset of the bright points of the signature.

    Bright points are the pixels whose magnitude exceeds ``threshold_ratio``
    times the image maximum; exactly ``floor(drop_fraction * count)`` of
    them are zeroed.  Every other pixel is returned bit-unchanged.
    """
    out = signature.copy()
    mag = np.abs(signature)
    peak = mag.max() if mag.size else 0.0
    if peak == 0.0:
        return out
    bright = np.flatnonzero(mag > threshold_ratio * peak)
    n_drop = int(np.floor(drop_fraction * len(bright)))
    if n_drop > 0:
        chosen = rng.choice(len(bright), size=n_drop, replace=False)
        out.reshape(-1)[bright[chosen]] = 0
    return out


def circular_shift(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Toroidal shift by (dx columns, dy rows); every pixel value survives."""
    if not (isinstance(dx, (int, np.integer)) and isinstance(dy, (int, np.integer))):
        raise ValidationError(f"shift offsets must be integers, got ({dx!r}, {dy!r})")
    return np.roll(image, (int(dy), int(dx)), axis=(0, 1))


def compose_augmented(
    signature: TargetSignature,
    params: AugmentationParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run the full randomization pipeline; returns float32 in [0, 1].

    Stage order: resolution degradation, bright-point dropout, clutter
    composite (clutter suppressed inside the shadow mask), thermal noise,
    circular shift of the whole composite, magnitude, quarter-power scaling
    to [0, 1].
    """
    img = signature.image.astype(np.complex64, copy=True)
    img = resample_resolution(
        img, signature.sensor, params.range_resolution, params.cross_range_resolution
    )
    if params.brightpoint_enabled:
        img = brightpoint_dropout(
            img,
            params.brightpoint_drop_fraction,
            params.brightpoint_threshold_ratio,
            np.random.default_rng(params.dropout_seed),
        )

    H, W = img.shape
    clutter = generate_clutter(H, W, params.clutter_level_db, params.clutter_gamma_shape, rng)
    clutter[signature.shadow_mask] = 0
    composite = img + clutter
    composite = add_thermal_noise(composite, params.thermal_noise_db, rng)
    composite = circular_shift(composite, params.dx, params.dy)
    return (qpm_scale(np.abs(composite)) / np.float32(255.0)).astype(np.float32)


def _augment_one(signature: TargetSignature, config: RandomizationConfig, item_seed: int):
    rng = np.random.default_rng(item_seed)
    params = sample_params(config, rng)
    return compose_augmented(signature, params, rng)


def augment_batch(
    signatures: list[TargetSignature],
    config: RandomizationConfig,
    epoch_seed: int,
    parallelism: int = 1,
) -> np.ndarray:
    """Augment a batch with one fresh draw per item; output order matches input.

    The per-item seed is a pure function of (epoch_seed, index), so results
    are bit-identical for any ``parallelism``.
    """
    if not signatures:
        raise ValidationError("augment_batch needs a nonempty batch")
    seeds = [derive_seed(epoch_seed, i) for i in range(len(signatures))]
    if parallelism <= 1:
        images = [_augment_one(s, config, seed) for s, seed in zip(signatures, seeds)]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            images = list(pool.map(_augment_one, signatures, [config] * len(signatures), seeds))
    return np.stack(images)
