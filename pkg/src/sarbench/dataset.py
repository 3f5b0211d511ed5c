"""Dataset container: SARD binary splits plus a JSON manifest.

Binary layout (little-endian): magic ``SARD``, u32 version=1, u32 record
count, u32 height, u32 width, then per record: u32 class id, f32 azimuth,
f32 depression, H*W*2 f32 complex signature (real/imag interleaved), and
H*W u8 shadow mask.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetIOError, ValidationError
from .scene import (
    ScattererTarget,
    SensorModel,
    TargetSignature,
    ViewGeometry,
    perturb_variant,
    render_signature,
)
from .seeding import rng_for

__all__ = [
    "GeometryGrid",
    "VariantPolicy",
    "DatasetManifest",
    "SarDataset",
    "class_variant",
    "render_records",
    "generate_dataset",
    "load_dataset",
    "write_split",
    "read_split",
]

_MAGIC = b"SARD"
_VERSION = 1


@dataclass(frozen=True)
class GeometryGrid:
    """The (azimuth x depression) collection grid for one split."""

    azimuths_deg: tuple[float, ...]
    depressions_deg: tuple[float, ...]

    def __post_init__(self):
        if not self.azimuths_deg or not self.depressions_deg:
            raise ValidationError("geometry grid must be nonempty")

    def __len__(self):
        return len(self.azimuths_deg) * len(self.depressions_deg)


@dataclass(frozen=True)
class VariantPolicy:
    """Mismatch dials applied to test-split targets, one draw per class."""

    position_jitter_sigma: float = 0.0
    amplitude_jitter_rel: float = 0.0
    turret_rotation_max_deg: float = 0.0

    def is_identity(self) -> bool:
        return (
            self.position_jitter_sigma == 0.0
            and self.amplitude_jitter_rel == 0.0
            and self.turret_rotation_max_deg == 0.0
        )


@dataclass
class DatasetManifest:
    classes: list[str]
    split_counts: dict[str, int]
    split_grids: dict[str, GeometryGrid]
    seed: int
    sensor: SensorModel
    target_height_m: float = 2.5
    version: int = 1

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "classes": self.classes,
            "seed": self.seed,
            "target_height_m": self.target_height_m,
            "sensor": dataclasses.asdict(self.sensor),
            "splits": {
                name: {
                    "count": self.split_counts[name],
                    "azimuths_deg": list(self.split_grids[name].azimuths_deg),
                    "depressions_deg": list(self.split_grids[name].depressions_deg),
                }
                for name in sorted(self.split_counts)
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(
            classes=list(doc["classes"]),
            split_counts={k: v["count"] for k, v in doc["splits"].items()},
            split_grids={
                k: GeometryGrid(tuple(v["azimuths_deg"]), tuple(v["depressions_deg"]))
                for k, v in doc["splits"].items()
            },
            seed=doc["seed"],
            sensor=SensorModel(**doc["sensor"]),
            target_height_m=doc.get("target_height_m", 2.5),
            version=doc["version"],
        )


@dataclass
class SarDataset:
    """One split held in memory as dense arrays, record order preserved."""

    signatures: np.ndarray  # (N, H, W) complex64
    masks: np.ndarray  # (N, H, W) bool
    labels: np.ndarray  # (N,) int64
    azimuths_deg: np.ndarray  # (N,) float32
    depressions_deg: np.ndarray  # (N,) float32
    class_names: list[str]
    sensor: SensorModel

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def signature_at(self, i: int) -> TargetSignature:
        return TargetSignature(
            self.signatures[i],
            self.masks[i],
            self.sensor,
            ViewGeometry(float(self.depressions_deg[i]), float(self.azimuths_deg[i])),
            int(self.labels[i]),
        )


def class_variant(proto: ScattererTarget, policy: VariantPolicy, seed: int) -> ScattererTarget:
    """The perturbed stand-in for the physically measured vehicle."""
    rng = rng_for(seed, proto.class_label)
    rot = 0.0
    if policy.turret_rotation_max_deg != 0.0:
        rot = float(
            rng.uniform(-policy.turret_rotation_max_deg, policy.turret_rotation_max_deg)
        )
    return perturb_variant(
        proto,
        position_jitter_sigma=policy.position_jitter_sigma,
        amplitude_jitter_rel=policy.amplitude_jitter_rel,
        substructure_rotation_deg=rot,
        seed=int(rng.integers(0, 2**62)),
    )


def render_records(
    targets: list[ScattererTarget],
    grid: GeometryGrid,
    sensor: SensorModel,
    target_height_m: float = 2.5,
) -> SarDataset:
    """Render every (target, depression, azimuth) combination, in that order."""
    n = len(targets) * len(grid)
    H, W = sensor.image_height, sensor.image_width
    signatures = np.empty((n, H, W), dtype=np.complex64)
    masks = np.empty((n, H, W), dtype=bool)
    labels = np.empty(n, dtype=np.int64)
    azimuths = np.empty(n, dtype=np.float32)
    depressions = np.empty(n, dtype=np.float32)

    i = 0
    for target in targets:
        for dep in grid.depressions_deg:
            for az in grid.azimuths_deg:
                sig = render_signature(target, sensor, ViewGeometry(dep, az), target_height_m)
                signatures[i] = sig.image.astype(np.complex64)
                masks[i] = sig.shadow_mask
                labels[i] = target.class_label
                azimuths[i] = az
                depressions[i] = dep
                i += 1
    class_names = [f"class_{t.class_label:02d}" for t in sorted(targets, key=lambda t: t.class_label)]
    return SarDataset(signatures, masks, labels, azimuths, depressions, class_names, sensor)


def write_split(path: Path, ds: SarDataset) -> None:
    path = Path(path)
    H, W = ds.sensor.image_height, ds.sensor.image_width
    try:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<IIII", _VERSION, len(ds), H, W))
            for i in range(len(ds)):
                try:
                    f.write(struct.pack("<Iff", int(ds.labels[i]), float(ds.azimuths_deg[i]),
                                        float(ds.depressions_deg[i])))
                    f.write(np.ascontiguousarray(ds.signatures[i], dtype="<c8").tobytes())
                    f.write(np.ascontiguousarray(ds.masks[i], dtype=np.uint8).tobytes())
                except OSError as e:
                    raise DatasetIOError(f"writing record {i} of {path}: {e}") from e
    except OSError as e:
        raise DatasetIOError(f"writing {path}: {e}") from e


def read_split(path: Path, sensor: SensorModel, class_names: list[str]) -> SarDataset:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DatasetIOError(f"reading {path}: {e}") from e
    if blob[:4] != _MAGIC:
        raise DatasetIOError(f"{path}: bad magic {blob[:4]!r}")
    version, count, H, W = struct.unpack_from("<IIII", blob, 4)
    if version != _VERSION:
        raise DatasetIOError(f"{path}: unsupported version {version}")
    rec_bytes = 12 + H * W * 8 + H * W
    if len(blob) != 20 + count * rec_bytes:
        raise DatasetIOError(f"{path}: truncated file ({len(blob)} bytes for {count} records)")

    signatures = np.empty((count, H, W), dtype=np.complex64)
    masks = np.empty((count, H, W), dtype=bool)
    labels = np.empty(count, dtype=np.int64)
    azimuths = np.empty(count, dtype=np.float32)
    depressions = np.empty(count, dtype=np.float32)
    off = 20
    for i in range(count):
        try:
            label, az, dep = struct.unpack_from("<Iff", blob, off)
            off += 12
            sig = np.frombuffer(blob, dtype="<c8", count=H * W, offset=off).reshape(H, W)
            off += H * W * 8
            mask = np.frombuffer(blob, dtype=np.uint8, count=H * W, offset=off).reshape(H, W)
            off += H * W
        except (struct.error, ValueError) as e:
            raise DatasetIOError(f"reading record {i} of {path}: {e}") from e
        labels[i] = label
        azimuths[i] = az
        depressions[i] = dep
        signatures[i] = sig
        masks[i] = mask.astype(bool)
    return SarDataset(signatures, masks, labels, azimuths, depressions, class_names,
                      sensor)


def generate_dataset(
    prototypes: list[ScattererTarget],
    train_grid: GeometryGrid,
    test_grid: GeometryGrid,
    sensor: SensorModel,
    variant_policy: VariantPolicy,
    seed: int,
    out_dir: Path,
    target_height_m: float = 2.5,
) -> DatasetManifest:
    """Render and store the benchmark: clean prototypes for training, perturbed
    per-class variants (the deliberate ground-truth mismatch) for testing."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train = render_records(prototypes, train_grid, sensor, target_height_m)
    variants = [class_variant(p, variant_policy, seed) for p in prototypes]
    test = render_records(variants, test_grid, sensor, target_height_m)

    manifest = DatasetManifest(
        classes=train.class_names,
        split_counts={"train": len(train), "test": len(test)},
        split_grids={"train": train_grid, "test": test_grid},
        seed=seed,
        sensor=sensor,
        target_height_m=target_height_m,
    )
    write_split(out_dir / "train.sard", train)
    write_split(out_dir / "test.sard", test)
    (out_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_dataset(dataset_dir: Path, split: str) -> SarDataset:
    """Load one split, verifying the stored record count against the manifest."""
    dataset_dir = Path(dataset_dir)
    manifest = DatasetManifest.from_json((dataset_dir / "manifest.json").read_text(encoding="utf-8"))
    if split not in manifest.split_counts:
        raise DatasetIOError(f"split {split!r} not in manifest ({sorted(manifest.split_counts)})")
    ds = read_split(dataset_dir / f"{split}.sard", manifest.sensor, manifest.classes)
    if len(ds) != manifest.split_counts[split]:
        raise DatasetIOError(
            f"{split}: manifest says {manifest.split_counts[split]} records, file has {len(ds)}"
        )
    return ds
