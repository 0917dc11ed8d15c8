##############################################################################
# data.py
# Radiograph simulation, the planted-signal dataset, splits and augmentation
##############################################################################
"""
Two-view synthetic radiographs.

Each subject is a procedurally generated torso volume, projected to a
frontal and a lateral view with `parallel_project`. Two features are then
painted in image space:

- a Gaussian blob in the frontal view,
- a top-to-bottom intensity ramp in the lateral view.

A subject is positive exactly when the blob is present *and* the ramp rises
toward the bottom, so either view alone is only partly informative while both
views together determine the label. A per-subject brightness offset moves
the pixel mean of both views independently of the label.
"""
import concurrent.futures
import dataclasses
import enum
import logging
import math
import os
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy
import torch
import torch.nn.functional as F
from scipy import ndimage

from bimamba import metrics
from bimamba._cgroup_cpu_count import loader_worker_count
from bimamba._exceptions import ContractError, ShapeError
from bimamba.io_formats import (
    ManifestEntry,
    read_manifest,
    read_pgm,
    write_manifest,
    write_pgm,
)

__all__ = [
    "ProjectionAxis",
    "LabeledSample",
    "SplitManifest",
    "SynthConfig",
    "CalibrationReport",
    "AugmentParams",
    "line_integral",
    "normalize_image",
    "parallel_project",
    "torso_volume",
    "synth_subject",
    "synth_dataset",
    "stratified_split",
    "calibration_report",
    "blob_contrast",
    "ramp_contrast",
    "oracle_score",
    "sample_augment",
    "apply_augment",
    "augment",
    "save_dataset",
    "load_dataset",
]

logger = logging.getLogger(__name__)

MIN_SUBJECTS = 10
MANIFEST_NAME = "manifest.tsv"
SPLITS = ("train", "val", "test")

# Keeps the split stream independent of the label stream for a given seed
_SPLIT_STREAM = 0x5B117


class ProjectionAxis(enum.Enum):
    # Volumes are indexed (z, y, x): superior-inferior, anterior-posterior,
    # left-right.
    FRONTAL = 1
    LATERAL = 2

    @classmethod
    def parse(cls, value: Union["ProjectionAxis", str]) -> "ProjectionAxis":
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(
                f"Unknown projection axis {value!r},"
                " expected frontal or lateral"
            ) from None


class LabeledSample(NamedTuple):
    frontal: numpy.ndarray
    lateral: numpy.ndarray
    label: int
    subject_id: str


@dataclasses.dataclass
class SplitManifest:
    train: List[str]
    val: List[str]
    test: List[str]
    fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        seen = set()
        for split in SPLITS:
            ids = set(getattr(self, split))
            if ids & seen:
                raise ContractError(
                    f"Subjects appear in more than one split:"
                    f" {sorted(ids & seen)[:5]}"
                )
            seen |= ids

    def split_of(self) -> Dict[str, str]:
        return {
            subject: split
            for split in SPLITS
            for subject in getattr(self, split)
        }

    def select(
        self, samples: Sequence[LabeledSample], split: str
    ) -> List[LabeledSample]:
        wanted = set(getattr(self, split))
        return [s for s in samples if s.subject_id in wanted]

    def entries(self, samples: Sequence[LabeledSample]) -> List[ManifestEntry]:
        splits = self.split_of()
        return [
            ManifestEntry(s.subject_id, splits[s.subject_id], s.label)
            for s in samples
        ]


@dataclasses.dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    positive_fraction: float = 0.3
    blob_amplitude: float = 0.15
    ramp_amplitude: float = 0.10
    brightness_jitter: float = 0.08
    voxel_noise: float = 0.1
    fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ContractError(
                f"Synthetic images must be at least 8x8,"
                f" got {self.height}x{self.width}"
            )
        if not 0.0 < self.positive_fraction < 1.0:
            raise ContractError("positive_fraction must lie in (0, 1)")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ContractError(
                f"Split fractions {self.fractions} do not sum to 1"
            )

    @property
    def blob_sigma(self) -> float:
        return self.height / 10.0

    @property
    def blob_center(self) -> Tuple[float, float]:
        return 0.4 * (self.height - 1), 0.3 * (self.width - 1)

    @property
    def feature_probability(self) -> float:
        # Independent blob and ramp features, each present with probability
        # p, give p * p positives.
        return math.sqrt(self.positive_fraction)


def line_integral(volume: numpy.ndarray, axis) -> numpy.ndarray:
    """Mean voxel value along the projection axis, before normalization."""
    volume = numpy.asarray(volume, dtype=numpy.float64)
    if volume.ndim != 3 or min(volume.shape) < 1:
        raise ShapeError(f"Expected a nonempty 3-D volume, got {volume.shape}")
    return volume.mean(axis=ProjectionAxis.parse(axis).value)


def normalize_image(image: numpy.ndarray) -> numpy.ndarray:
    """Min-max normalization to [0, 1]; constant images map to 0.5."""
    low, high = float(image.min()), float(image.max())
    if not high > low:
        return numpy.full(image.shape, 0.5, dtype=numpy.float32)
    return ((image - low) / (high - low)).astype(numpy.float32)


def parallel_project(volume: numpy.ndarray, axis) -> numpy.ndarray:
    """
    Simulates a radiograph by parallel projection.

    Frontal images are ``(Dz, Dx)`` and lateral images ``(Dz, Dy)``.
    """
    return normalize_image(line_integral(volume, axis))


def torso_volume(
    rng: numpy.random.Generator, height: int, width: int, noise: float = 0.1
) -> numpy.ndarray:
    """
    An ellipsoid body with two low-density lung ellipsoids and smoothed
    voxel noise, shaped ``(height, width, width)``.
    """
    z, y, x = numpy.meshgrid(
        (numpy.arange(height) + 0.5) / height - 0.5,
        (numpy.arange(width) + 0.5) / width - 0.5,
        (numpy.arange(width) + 0.5) / width - 0.5,
        indexing="ij",
    )
    radii = rng.uniform([0.44, 0.30, 0.40], [0.49, 0.38, 0.47])
    body = (z / radii[0]) ** 2 + (y / radii[1]) ** 2 + (x / radii[2]) ** 2
    volume = numpy.where(body <= 1.0, 1.0, 0.0)
    lung_radii = rng.uniform([0.22, 0.18, 0.12], [0.26, 0.22, 0.15])
    for side in (-1.0, 1.0):
        lung = (
            ((z + 0.08) / lung_radii[0]) ** 2
            + (y / lung_radii[1]) ** 2
            + ((x - side * 0.2) / lung_radii[2]) ** 2
        )
        volume = numpy.where(lung <= 1.0, 0.3, volume)
    texture = ndimage.gaussian_filter(
        rng.normal(size=volume.shape), sigma=1.5
    )
    return (volume + noise * texture * (volume > 0)).astype(numpy.float32)


def _blob(config: SynthConfig, center: Tuple[float, float]) -> numpy.ndarray:
    rows, cols = numpy.mgrid[0 : config.height, 0 : config.width]
    r2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    return config.blob_amplitude * numpy.exp(-r2 / (2 * config.blob_sigma**2))


def _ramp(config: SynthConfig, rising: bool) -> numpy.ndarray:
    # Vertical, so a horizontal flip leaves the label intact
    slope = numpy.linspace(-1.0, 1.0, config.height)[:, None]
    if not rising:
        slope = -slope
    return numpy.broadcast_to(
        config.ramp_amplitude * slope, (config.height, config.width)
    )


def _subject_rng(seed: int, index: int) -> numpy.random.Generator:
    return numpy.random.default_rng(numpy.random.SeedSequence([seed, index]))


def synth_subject(
    seed: int,
    index: int,
    has_blob: bool,
    ramp_rises: bool,
    config: Optional[SynthConfig] = None,
) -> LabeledSample:
    """
    Generates one subject from its own rng stream, derived from
    ``(seed, index)``, so subjects can be produced in any order.
    """
    config = config or SynthConfig()
    rng = _subject_rng(seed, index)
    volume = torso_volume(rng, config.height, config.width, config.voxel_noise)
    frontal = 0.2 + 0.5 * parallel_project(volume, ProjectionAxis.FRONTAL)
    lateral = 0.2 + 0.5 * parallel_project(volume, ProjectionAxis.LATERAL)

    jitter = rng.uniform(-1.0, 1.0, size=2) * config.height / 32
    if has_blob:
        center = numpy.add(config.blob_center, jitter)
        frontal = frontal + _blob(config, tuple(center))
    lateral = lateral + _ramp(config, ramp_rises)

    offset = rng.uniform(-config.brightness_jitter, config.brightness_jitter)
    frontal = numpy.clip(frontal + offset, 0.0, 1.0).astype(numpy.float32)
    lateral = numpy.clip(lateral + offset, 0.0, 1.0).astype(numpy.float32)
    return LabeledSample(
        frontal, lateral, int(has_blob and ramp_rises), f"s{index:05d}"
    )


def _plant_features(
    rng: numpy.random.Generator, n: int, config: SynthConfig
) -> List[Tuple[bool, bool]]:
    # Exactly round(fraction * n) positives; negatives take the remaining
    # feature combinations in proportion to their independent probabilities.
    n_pos = int(round(config.positive_fraction * n))
    p = config.feature_probability
    negative_kinds = [(True, False), (False, True), (False, False)]
    weights = numpy.array([p * (1 - p), (1 - p) * p, (1 - p) ** 2])
    kinds = rng.choice(3, size=n - n_pos, p=weights / weights.sum())
    features = [(True, True)] * n_pos + [negative_kinds[k] for k in kinds]
    order = rng.permutation(n)
    return [features[i] for i in order]


def _split_share(fraction: float, count: int) -> int:
    # Floor of the share; from three subjects up, a nonzero fraction gets one
    share = math.floor(fraction * count + 1e-9)
    if fraction > 0 and count >= 3:
        share = max(share, 1)
    return share


def stratified_split(
    samples: Sequence[LabeledSample],
    seed: int,
    fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> SplitManifest:
    """
    Subject-level train/val/test split, stratified by label.

    Per label, val and test take the floor of their fraction and train takes
    the rest. A label with at least three subjects puts one or more in val
    and in test whenever their fractions are nonzero.
    """
    rng = numpy.random.default_rng([seed, _SPLIT_STREAM])
    splits: Dict[str, List[str]] = {name: [] for name in SPLITS}
    for label in (0, 1):
        ids = [s.subject_id for s in samples if s.label == label]
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_val = _split_share(fractions[1], len(ids))
        n_test = _split_share(fractions[2], len(ids))
        n_train = len(ids) - n_val - n_test
        splits["train"] += ids[:n_train]
        splits["val"] += ids[n_train : n_train + n_val]
        splits["test"] += ids[n_train + n_val :]
    return SplitManifest(
        sorted(splits["train"]),
        sorted(splits["val"]),
        sorted(splits["test"]),
        tuple(fractions),
    )


def synth_dataset(
    seed: int, n_subjects: int, config: Optional[SynthConfig] = None
) -> Tuple[List[LabeledSample], SplitManifest]:
    """
    Builds the planted-signal dataset. Deterministic per seed; subjects are
    generated concurrently, each from its own rng stream.
    """
    config = config or SynthConfig()
    if n_subjects < MIN_SUBJECTS:
        raise ContractError(
            f"synth_dataset needs at least {MIN_SUBJECTS} subjects,"
            f" got {n_subjects}"
        )
    features = _plant_features(
        numpy.random.default_rng(seed), n_subjects, config
    )
    with concurrent.futures.ThreadPoolExecutor(
        max_workers=loader_worker_count(), thread_name_prefix="BiMambaSynth"
    ) as executor:
        samples = list(
            executor.map(
                lambda args: synth_subject(seed, args[0], *args[1], config),
                enumerate(features),
            )
        )
    manifest = stratified_split(samples, seed, config.fractions)
    positives = sum(s.label for s in samples)
    logger.info(
        f"Synthesized {n_subjects} subjects ({positives} positive):"
        f" {len(manifest.train)}/{len(manifest.val)}/{len(manifest.test)}"
        " train/val/test"
    )
    return samples, manifest


class CalibrationReport(NamedTuple):
    frontal_mean_auroc: float
    lateral_mean_auroc: float
    oracle_auroc: float


def blob_contrast(frontal: numpy.ndarray, config: SynthConfig) -> float:
    """Mean inside the nominal blob disk minus the mean of a ring around it."""
    rows, cols = numpy.mgrid[0 : frontal.shape[0], 0 : frontal.shape[1]]
    center = config.blob_center
    r = numpy.hypot(rows - center[0], cols - center[1]) / config.blob_sigma
    return float(frontal[r <= 1.0].mean() - frontal[(r >= 2) & (r <= 3)].mean())


def ramp_contrast(lateral: numpy.ndarray) -> float:
    """Bottom half mean minus top half mean."""
    half = lateral.shape[0] // 2
    return float(lateral[-half:].mean() - lateral[:half].mean())


def _midrange_scaled(values: numpy.ndarray) -> numpy.ndarray:
    low, high = float(values.min()), float(values.max())
    if not high > low:
        return numpy.zeros_like(values)
    return (values - 0.5 * (low + high)) / (high - low)


def oracle_score(
    samples: Sequence[LabeledSample], config: Optional[SynthConfig] = None
) -> numpy.ndarray:
    """
    Hand-built two-view classifier that knows where the features live.

    The anatomy shifts both contrasts by a subject-dependent amount, so each
    feature is thresholded halfway across its range over `samples`; a
    subject scores high only when both features clear their threshold.
    """
    config = config or SynthConfig()
    blob = numpy.array([blob_contrast(s.frontal, config) for s in samples])
    ramp = numpy.array([ramp_contrast(s.lateral) for s in samples])
    return numpy.minimum(_midrange_scaled(blob), _midrange_scaled(ramp))


def calibration_report(
    samples: Sequence[LabeledSample], config: Optional[SynthConfig] = None
) -> CalibrationReport:
    config = config or SynthConfig()
    labels = [s.label for s in samples]
    report = CalibrationReport(
        metrics.auroc([float(s.frontal.mean()) for s in samples], labels),
        metrics.auroc([float(s.lateral.mean()) for s in samples], labels),
        metrics.auroc(oracle_score(samples, config), labels),
    )
    logger.info(
        f"Calibration: frontal mean AUROC {report.frontal_mean_auroc:.3f},"
        f" lateral mean AUROC {report.lateral_mean_auroc:.3f},"
        f" two-view oracle AUROC {report.oracle_auroc:.3f}"
    )
    return report


class AugmentParams(NamedTuple):
    """A crop box in pixels and a horizontal flip, shared by both views."""

    top: int
    left: int
    height: int
    width: int
    flip: bool

    @classmethod
    def identity(cls, height: int, width: int) -> "AugmentParams":
        return cls(0, 0, height, width, False)

    def is_identity(self, height: int, width: int) -> bool:
        return self == self.identity(height, width)


def sample_augment(
    rng: numpy.random.Generator,
    height: int,
    width: int,
    aspect_range: Tuple[float, float] = (0.75, 1.3),
    area_range: Tuple[float, float] = (0.7, 1.0),
) -> AugmentParams:
    """
    Draws a crop with aspect ratio (width / height) uniform in
    `aspect_range` and area fraction uniform in `area_range`, plus a fair
    coin for the flip.
    """
    area = rng.uniform(*area_range) * height * width
    aspect = rng.uniform(*aspect_range)
    crop_w = math.sqrt(area * aspect)
    crop_h = math.sqrt(area / aspect)
    # One factor shrinks both sides of an oversized crop
    scale = min(1.0, width / crop_w, height / crop_h)
    crop_w = int(min(width, max(1, round(crop_w * scale))))
    crop_h = int(min(height, max(1, round(crop_h * scale))))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    flip = bool(rng.random() < 0.5)
    return AugmentParams(top, left, crop_h, crop_w, flip)


def _crop_resize(image: numpy.ndarray, params: AugmentParams) -> numpy.ndarray:
    height, width = image.shape
    crop = image[
        params.top : params.top + params.height,
        params.left : params.left + params.width,
    ]
    if crop.shape != image.shape:
        resized = F.interpolate(
            torch.from_numpy(numpy.ascontiguousarray(crop))[None, None],
            size=(height, width),
            mode="bilinear",
            align_corners=False,
        )
        crop = resized[0, 0].numpy()
    if params.flip:
        crop = crop[:, ::-1]
    return numpy.clip(crop, 0.0, 1.0).astype(numpy.float32)


def apply_augment(
    sample: LabeledSample, params: AugmentParams
) -> LabeledSample:
    """Applies one crop and flip to both views; the label is untouched."""
    if sample.frontal.shape != sample.lateral.shape:
        raise ShapeError(
            f"Views differ in shape: {sample.frontal.shape}"
            f" vs {sample.lateral.shape}"
        )
    if params.is_identity(*sample.frontal.shape):
        return sample
    return sample._replace(
        frontal=_crop_resize(sample.frontal, params),
        lateral=_crop_resize(sample.lateral, params),
    )


def augment(
    sample: LabeledSample, rng: numpy.random.Generator
) -> LabeledSample:
    return apply_augment(sample, sample_augment(rng, *sample.frontal.shape))


def save_dataset(
    directory: Union[str, os.PathLike],
    samples: Sequence[LabeledSample],
    manifest: SplitManifest,
) -> None:
    """Writes ``<subject>_frontal.pgm``, ``<subject>_lateral.pgm`` and
    ``manifest.tsv``."""
    os.makedirs(directory, exist_ok=True)
    for sample in samples:
        write_pgm(
            os.path.join(directory, f"{sample.subject_id}_frontal.pgm"),
            sample.frontal,
        )
        write_pgm(
            os.path.join(directory, f"{sample.subject_id}_lateral.pgm"),
            sample.lateral,
        )
    write_manifest(
        os.path.join(directory, MANIFEST_NAME), manifest.entries(samples)
    )


def load_dataset(
    directory: Union[str, os.PathLike]
) -> Tuple[List[LabeledSample], SplitManifest]:
    entries = read_manifest(os.path.join(directory, MANIFEST_NAME))
    if not entries:
        raise ContractError(f"Empty manifest in {directory}")
    samples = []
    splits: Dict[str, List[str]] = {name: [] for name in SPLITS}
    for entry in entries:
        frontal = read_pgm(
            os.path.join(directory, f"{entry.subject_id}_frontal.pgm")
        )
        lateral = read_pgm(
            os.path.join(directory, f"{entry.subject_id}_lateral.pgm")
        )
        if frontal.shape != lateral.shape:
            raise ShapeError(
                f"Subject {entry.subject_id}: view shapes differ"
                f" ({frontal.shape} vs {lateral.shape})"
            )
        samples.append(
            LabeledSample(frontal, lateral, entry.label, entry.subject_id)
        )
        splits[entry.split].append(entry.subject_id)
    total = len(entries)
    fractions = tuple(len(splits[name]) / total for name in SPLITS)
    return samples, SplitManifest(
        splits["train"], splits["val"], splits["test"], fractions
    )
