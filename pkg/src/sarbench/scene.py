"""Point-scatterer scene model and signature renderer.

A target is a labeled cloud of point scatterers standing in for a CAD model.
Rendering places each scatterer's Taylor-weighted PSF on the image grid at
its (possibly rotated) position, summed coherently.  The geometric shadow is
the down-range extension of the target's convex footprint.

Conventions
-----------
* Image axis 0 is range (y, meters), axis 1 is cross-range (x, meters).
* Pixel (H//2, W//2) sits at scene coordinate (0, 0).
* ``azimuth_deg`` rotates scatterer positions counterclockwise in the scene
  plane before rendering, so rotating a target by ``t`` degrees is identical
  to viewing it at ``azimuth + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import EmptyTargetError, ValidationError
from .psf import taylor_psf

__all__ = [
    "Scatterer",
    "Substructure",
    "ScattererTarget",
    "SensorModel",
    "ViewGeometry",
    "TargetSignature",
    "default_sensor",
    "rotate_xy",
    "render_signature",
    "compute_shadow_mask",
    "qpm_scale",
    "make_class_prototypes",
    "perturb_variant",
]


@dataclass(frozen=True)
class Scatterer:
    """One ideal point reflector: position (m), sqrt-RCS amplitude, phase."""

    x: float
    y: float
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"scatterer position not finite: ({self.x}, {self.y})")
        if not math.isfinite(self.amplitude) or self.amplitude < 0:
            raise ValidationError(f"scatterer amplitude must be finite and >= 0, got {self.amplitude}")
        if not math.isfinite(self.phase):
            raise ValidationError(f"scatterer phase not finite: {self.phase}")


@dataclass(frozen=True)
class Substructure:
    """A named, rigidly movable subset of a target (e.g. a turret)."""

    name: str
    indices: tuple[int, ...]
    pivot: tuple[float, float]


@dataclass(frozen=True)
class ScattererTarget:
    """A labeled scatterer cloud with optional articulated substructures."""

    scatterers: tuple[Scatterer, ...]
    class_label: int
    substructures: tuple[Substructure, ...] = ()

    def __post_init__(self):
        n = len(self.scatterers)
        seen: set[int] = set()
        for sub in self.substructures:
            idx = set(sub.indices)
            if not idx or min(idx) < 0 or max(idx) >= n:
                raise ValidationError(f"substructure {sub.name!r} indexes outside the scatterer list")
            if idx & seen:
                raise ValidationError(f"substructure {sub.name!r} overlaps another substructure")
            seen |= idx

    def positions(self) -> np.ndarray:
        return np.array([(s.x, s.y) for s in self.scatterers], dtype=float).reshape(-1, 2)

    def amplitudes(self) -> np.ndarray:
        return np.array([s.amplitude for s in self.scatterers], dtype=float)

    def phases(self) -> np.ndarray:
        return np.array([s.phase for s in self.scatterers], dtype=float)


@dataclass(frozen=True)
class SensorModel:
    """Imaging-chain description: resolution, sampling, window, image size."""

    range_resolution: float = 0.203125
    cross_range_resolution: float = 0.21
    range_spacing: float = 0.17
    cross_range_spacing: float = 0.17
    taylor_sidelobe_db: float = -35.0
    taylor_nbar: int = 4
    image_height: int = 128
    image_width: int = 128

    def __post_init__(self):
        if self.image_height <= 0 or self.image_width <= 0:
            raise ValidationError("image dimensions must be positive")
        for spacing, res, axis in (
            (self.range_spacing, self.range_resolution, "range"),
            (self.cross_range_spacing, self.cross_range_resolution, "cross-range"),
        ):
            if spacing <= 0 or res <= 0:
                raise ValidationError(f"{axis} spacing/resolution must be positive")
            if spacing > res:
                raise ValidationError(f"{axis} spacing {spacing} exceeds resolution {res}")


def default_sensor(image_height: int = 128, image_width: int = 128) -> SensorModel:
    """The stock sensor: native resolution at the randomization range minima."""
    return SensorModel(image_height=image_height, image_width=image_width)


@dataclass(frozen=True)
class ViewGeometry:
    """Collection geometry: depression in (0, 90] deg, azimuth in [0, 360)."""

    depression_deg: float
    azimuth_deg: float

    def __post_init__(self):
        if not 0.0 < self.depression_deg <= 90.0:
            raise ValidationError(f"depression must be in (0, 90], got {self.depression_deg}")
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise ValidationError(f"azimuth must be in [0, 360), got {self.azimuth_deg}")


@dataclass(frozen=True)
class TargetSignature:
    """A rendered complex signature plus its geometric shadow mask."""

    image: np.ndarray
    shadow_mask: np.ndarray
    sensor: SensorModel
    geometry: ViewGeometry
    class_label: int

    def __post_init__(self):
        if self.image.shape != self.shadow_mask.shape:
            raise ValidationError(
                f"image {self.image.shape} and mask {self.shadow_mask.shape} shapes differ"
            )
        if not np.all(np.isfinite(self.image)):
            raise ValidationError("signature image contains non-finite values")


def rotate_xy(x, y, angle_deg: float):
    """Rotate scene coordinates counterclockwise by ``angle_deg``."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return c * np.asarray(x) - s * np.asarray(y), s * np.asarray(x) + c * np.asarray(y)


def _validated_arrays(target: ScattererTarget):
    if len(target.scatterers) == 0:
        raise EmptyTargetError("target has no scatterers")
    pos = target.positions()
    amp = target.amplitudes()
    if not np.all(np.isfinite(pos)):
        raise ValidationError("scatterer positions contain non-finite values")
    if not np.all(np.isfinite(amp)) or np.any(amp < 0):
        raise ValidationError("scatterer amplitudes must be finite and >= 0")
    return pos, amp, target.phases()


def _pixel_axes(sensor: SensorModel):
    rows_m = (np.arange(sensor.image_height) - sensor.image_height // 2) * sensor.range_spacing
    cols_m = (np.arange(sensor.image_width) - sensor.image_width // 2) * sensor.cross_range_spacing
    return rows_m, cols_m


def render_signature(
    target: ScattererTarget,
    sensor: SensorModel,
    geometry: ViewGeometry,
    target_height_m: float = 2.5,
) -> TargetSignature:
    """Render the coherent signature of ``target`` as seen by ``sensor``.

    The image is the sum over scatterers of amplitude * exp(i phase) times a
    separable Taylor-weighted sinc PSF centered on the rotated scatterer
    position.  The PSF peak is 1, so an on-grid unit scatterer produces peak
    magnitude 1.  The shadow mask comes from :func:`compute_shadow_mask`
    assuming a target height of ``target_height_m``.
    """
    pos, amp, phase = _validated_arrays(target)
    xs, ys = rotate_xy(pos[:, 0], pos[:, 1], geometry.azimuth_deg)

    psf = taylor_psf(sensor.taylor_sidelobe_db, sensor.taylor_nbar)
    band_r = psf.band_cycles(sensor.range_resolution)
    band_c = psf.band_cycles(sensor.cross_range_resolution)
    rows_m, cols_m = _pixel_axes(sensor)

    # Separable PSF: (K,H) x (K,W), summed coherently over scatterers.
    p_rows = psf.value((rows_m[None, :] - ys[:, None]) * band_r)
    p_cols = psf.value((cols_m[None, :] - xs[:, None]) * band_c)
    coeff = amp * np.exp(1j * phase)
    image = (coeff[:, None] * p_rows).T @ p_cols

    mask = compute_shadow_mask(target, sensor, geometry, target_height_m)
    return TargetSignature(image, mask, sensor, geometry, target.class_label)


def _lower_profile(px: np.ndarray, py: np.ndarray) -> dict[int, float]:
    """Max footprint row per integer column over the convex hull of points."""
    pts = np.unique(np.stack([px, py], axis=1), axis=0).astype(float)
    if len(pts) == 1:
        return {int(pts[0, 0]): float(pts[0, 1])}
    if len(pts) == 2:
        edges = [(pts[0], pts[1])]
    else:
        try:
            hull = ConvexHull(pts)
            verts = pts[hull.vertices]
            edges = [(verts[i], verts[(i + 1) % len(verts)]) for i in range(len(verts))]
        except QhullError:
            # Collinear points: the hull degenerates to a segment.
            order = np.lexsort((pts[:, 1], pts[:, 0]))
            edges = [(pts[order[0]], pts[order[-1]])]

    profile: dict[int, float] = {}
    for (x0, y0), (x1, y1) in edges:
        lo, hi = (x0, x1) if x0 <= x1 else (x1, x0)
        for c in range(math.ceil(lo), math.floor(hi) + 1):
            if x1 == x0:
                y = max(y0, y1)
            else:
                y = y0 + (c - x0) * (y1 - y0) / (x1 - x0)
            if c not in profile or y > profile[c]:
                profile[c] = y
    return profile


def compute_shadow_mask(
    target: ScattererTarget,
    sensor: SensorModel,
    geometry: ViewGeometry,
    target_height_m: float,
) -> np.ndarray:
    """Geometric shadow: footprint extended down-range by h / tan(depression).

    The extension length is quantized to ``ceil(length / range_spacing)``
    pixels.  Pixels within one resolution cell of any scatterer are carved
    out so target returns are never shadow-masked.
    """
    pos, _, _ = _validated_arrays(target)
    xs, ys = rotate_xy(pos[:, 0], pos[:, 1], geometry.azimuth_deg)
    H, W = sensor.image_height, sensor.image_width
    mask = np.zeros((H, W), dtype=bool)

    if geometry.depression_deg >= 90.0:
        return mask
    length_m = target_height_m / math.tan(math.radians(geometry.depression_deg))
    n_px = math.ceil(length_m / sensor.range_spacing)
    if n_px <= 0:
        return mask

    px = np.round(xs / sensor.cross_range_spacing).astype(int) + W // 2
    py = np.round(ys / sensor.range_spacing).astype(int) + H // 2
    for col, ymax in _lower_profile(px, py).items():
        if 0 <= col < W:
            r0 = math.floor(ymax) + 1
            r1 = min(r0 + n_px, H)
            if r1 > max(r0, 0):
                mask[max(r0, 0):r1, col] = True

    # Keep-out: one resolution cell around every scatterer.
    rows_m, cols_m = _pixel_axes(sensor)
    dr = (rows_m[:, None] - ys[None, :]) / sensor.range_resolution
    dc = (cols_m[:, None] - xs[None, :]) / sensor.cross_range_resolution
    keepout = (dr[:, None, :] ** 2 + dc[None, :, :] ** 2 <= 1.0).any(axis=2)
    return mask & ~keepout


def qpm_scale(image: np.ndarray) -> np.ndarray:
    """Quarter-power magnitude display scaling to 8 bits.

    ``d = round(255 * (p / p_max) ** 0.25)`` with ``p`` the pixel power and
    round-half-up quantization; an all-zero image maps to all zeros.
    """
    img = np.asarray(image)
    if np.iscomplexobj(img):
        raise ValidationError("qpm_scale expects a magnitude image, not complex")
    if img.size and np.any(img < 0):
        raise ValidationError("magnitudes must be >= 0")
    power = img.astype(np.float64) ** 2
    p_max = power.max() if power.size else 0.0
    if p_max == 0.0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.floor(255.0 * (power / p_max) ** 0.25 + 0.5).astype(np.uint8)


def make_class_prototypes(
    n_classes: int,
    scatterer_count_range: tuple[int, int] = (24, 40),
    footprint_m: float = 4.0,
    seed: int = 0,
    sensor: SensorModel | None = None,
) -> list[ScattererTarget]:
    """Draw one prototype target per class, deterministically from ``seed``.

    Each prototype carries a "turret" substructure of 20..40% of its
    scatterers, chosen as the nearest neighbors of a random anchor so the
    substructure is spatially coherent.  Scatterer phases are frozen into
    the prototype to fix the coherent interference pattern.
    """
    if n_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {n_classes}")
    lo, hi = scatterer_count_range
    if lo < 3 or hi < lo:
        raise ValidationError(f"bad scatterer count range {scatterer_count_range}")
    cell = max(
        (sensor or default_sensor()).range_resolution,
        (sensor or default_sensor()).cross_range_resolution,
    )
    if footprint_m < cell:
        raise ValidationError(f"footprint {footprint_m} m is smaller than one resolution cell {cell} m")

    rng = np.random.default_rng(seed)
    half = footprint_m / 2.0
    prototypes = []
    for label in range(n_classes):
        n = int(rng.integers(lo, hi, endpoint=True))
        xy = rng.uniform(-half, half, size=(n, 2))
        # Mostly moderate returns plus a few dominant reflectors, so target
        # peaks sit 10-15 dB above the strongest clutter the randomization
        # can draw (vehicle-like contrast).
        amp = rng.uniform(0.3, 1.2, size=n)
        n_bright = max(2, n // 8)
        bright = rng.choice(n, size=n_bright, replace=False)
        amp[bright] *= rng.uniform(2.5, 4.0, size=n_bright)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n)

        anchor = int(rng.integers(n))
        frac = rng.uniform(0.2, 0.4)
        k = int(np.clip(round(frac * n), max(1, math.ceil(0.2 * n)), max(1, math.floor(0.4 * n))))
        order = np.argsort(np.hypot(xy[:, 0] - xy[anchor, 0], xy[:, 1] - xy[anchor, 1]))
        turret = tuple(sorted(int(i) for i in order[:k]))
        pivot = (float(np.mean(xy[turret, 0])), float(np.mean(xy[turret, 1])))

        scatterers = tuple(
            Scatterer(float(x), float(y), float(a), float(p))
            for (x, y), a, p in zip(xy, amp, phase)
        )
        prototypes.append(
            ScattererTarget(scatterers, label, (Substructure("turret", turret, pivot),))
        )
    return prototypes


def perturb_variant(
    target: ScattererTarget,
    position_jitter_sigma: float = 0.0,
    amplitude_jitter_rel: float = 0.0,
    substructure_rotation_deg: float = 0.0,
    seed: int = 0,
) -> ScattererTarget:
    """A geometry-mismatched variant of ``target``.

    Substructures rotate rigidly about their pivots; positions get
    independent Gaussian jitter; amplitudes get log-normal jitter with log
    sigma ``amplitude_jitter_rel``.  All-zero magnitudes return the target
    unchanged bit for bit.
    """
    pos, amp, phase = _validated_arrays(target)
    pos = pos.copy()
    amp = amp.copy()
    rng = np.random.default_rng(seed)

    if substructure_rotation_deg != 0.0:
        for sub in target.substructures:
            idx = list(sub.indices)
            px, py = sub.pivot
            rx, ry = rotate_xy(pos[idx, 0] - px, pos[idx, 1] - py, substructure_rotation_deg)
            pos[idx, 0] = rx + px
            pos[idx, 1] = ry + py
    if position_jitter_sigma > 0.0:
        pos += rng.normal(0.0, position_jitter_sigma, size=pos.shape)
    if amplitude_jitter_rel > 0.0:
        amp *= np.exp(rng.normal(0.0, amplitude_jitter_rel, size=amp.shape))

    scatterers = tuple(
        Scatterer(float(x), float(y), float(a), float(p))
        for (x, y), a, p in zip(pos, amp, phase)
    )
    return replace(target, scatterers=scatterers)
