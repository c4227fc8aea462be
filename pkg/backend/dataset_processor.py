import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from errors import DatasetError, NumericalError
from models import DatasetManifest, ManifestEntry, SynthSpec
from random_streams import rng_for

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
HEATMAP_MAGIC = "HM1"
MAX_REDRAWS = 100
BASE_FLOOR = 60      # Inlier intensities lie in [BASE_FLOOR, BASE_CEILING]
BASE_CEILING = 200   # so stripe and brightness corruptions change every targeted pixel


@dataclass
class Sample:
    """A grayscale image in [0, 1] with its label and optional anomaly mask"""
    image: np.ndarray
    label: int
    mask: Optional[np.ndarray] = None
    sample_id: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DatasetError(f"sample {self.sample_id}: label must be 0 or 1, got {self.label}")
        if self.image.ndim != 2:
            raise DatasetError(f"sample {self.sample_id}: image must be 2-D, got shape {self.image.shape}")
        if not (np.all(self.image >= 0.0) and np.all(self.image <= 1.0)):
            raise DatasetError(f"sample {self.sample_id}: image values outside [0, 1]")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise DatasetError(
                    f"sample {self.sample_id}: mask shape {self.mask.shape} != image shape {self.image.shape}"
                )
            if not np.all((self.mask == 0) | (self.mask == 1)):
                raise DatasetError(f"sample {self.sample_id}: mask must be 0/1 valued")
            if self.label == 0 and self.mask.any():
                raise DatasetError(f"sample {self.sample_id}: inlier carries a nonempty mask")


@dataclass
class ClassDataset:
    """Splits of one anomaly class, loaded in memory"""
    class_name: str
    train: List[Sample]
    val: List[Sample] = field(default_factory=list)
    val_outliers: List[Sample] = field(default_factory=list)
    test: List[Sample] = field(default_factory=list)

    def __post_init__(self):
        if not self.train:
            raise DatasetError(f"class {self.class_name}: train split is empty")
        for sample in self.train + self.val:
            if sample.label != 0:
                raise DatasetError(f"sample {sample.sample_id}: train and validation hold inliers only")
        labels = {s.label for s in self.test}
        if 1 not in labels:
            raise DatasetError("test split requires outliers")
        if 0 not in labels:
            raise DatasetError("test split requires inliers")
        shapes = {s.image.shape for s in self.train + self.val + self.val_outliers + self.test}
        if len(shapes) != 1:
            raise DatasetError(f"class {self.class_name}: mixed image shapes {sorted(shapes)}")

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.train[0].image.shape

    def train_matrix(self) -> np.ndarray:
        return np.stack([s.image.reshape(-1) for s in self.train])

    def validation_matrix(self) -> np.ndarray:
        """Inlier validation samples; falls back to the train split when none exist"""
        samples = self.val or self.train
        return np.stack([s.image.reshape(-1) for s in samples])

    def tuning_set(self) -> Tuple[np.ndarray, np.ndarray]:
        """Validation inliers plus validation outliers, with labels"""
        samples = (self.val or self.train) + self.val_outliers
        return np.stack([s.image.reshape(-1) for s in samples]), np.array([s.label for s in samples])

    def test_matrix(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.stack([s.image.reshape(-1) for s in self.test]), np.array([s.label for s in self.test])

    def splits(self) -> Dict[str, List[Sample]]:
        return {"train": self.train, "val": self.val, "val_outliers": self.val_outliers, "test": self.test}


# --- Graymap IO -----------------------------------------------------------

def write_graymap(path: Union[str, Path], pixels: np.ndarray):
    """Write an 8-bit binary portable graymap (P5)"""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def read_graymap(path: Union[str, Path]) -> np.ndarray:
    """Read an 8-bit graymap as a uint8 (H, W) array"""
    try:
        with Image.open(path) as image:
            if image.mode != "L":
                raise DatasetError(f"{path}: expected 8-bit grayscale, got mode {image.mode}")
            return np.array(image, dtype=np.uint8)
    except (FileNotFoundError, UnidentifiedImageError) as e:
        raise DatasetError(f"cannot read graymap {path}: {e}") from e


# --- Synthetic anomaly classes --------------------------------------------

def _base_image(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    """Random soft blobs plus one stroke over a constant floor, as uint8"""
    height, width = shape
    rows, cols = np.mgrid[0:height, 0:width]
    canvas = np.zeros(shape)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        sigma = rng.uniform(1.0, max(height, width) / 4.0 + 1.0)
        canvas += rng.uniform(0.5, 1.0) * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma ** 2))
    (y0, x0), (y1, x1) = rng.uniform(0, 1, size=(2, 2)) * [height - 1, width - 1]
    for t in np.linspace(0.0, 1.0, 2 * max(height, width)):
        canvas[int(round(y0 + t * (y1 - y0))), int(round(x0 + t * (x1 - x0)))] += 0.6
    canvas = np.clip(canvas, 0.0, 1.0)
    return np.round(BASE_FLOOR + canvas * (BASE_CEILING - BASE_FLOOR)).astype(np.uint8)


def _stripe(spec: SynthSpec, rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    out = base.copy()
    out[:spec.stripe_width, :] = 255
    return out


def _dotted_line(spec: SynthSpec, rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    height, width = base.shape
    out = base.copy()
    (y0, x0), (y1, x1) = rng.uniform(0, 1, size=(2, 2)) * [height - 1, width - 1]
    for t in np.linspace(0.0, 1.0, spec.dot_count):
        out[int(round(y0 + t * (y1 - y0))), int(round(x0 + t * (x1 - x0)))] = 255
    return out


def _brightness(spec: SynthSpec, rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    offset = max(1, int(round(spec.brightness_offset * 255)))
    return np.clip(base.astype(np.int32) + offset, 0, 255).astype(np.uint8)


def _spatter_noise(spec: SynthSpec, rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    out = base.copy()
    out[rng.random(base.shape) < spec.noise_probability] = 255
    return out


CORRUPTIONS: Dict[str, Callable[[SynthSpec, np.random.Generator, np.ndarray], np.ndarray]] = {
    "stripe": _stripe,
    "dotted_line": _dotted_line,
    "brightness": _brightness,
    "spatter_noise": _spatter_noise,
}


def _cartoon_point(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    point = rng.normal(spec.cartoon_mean, spec.cartoon_std)
    return np.round(np.clip(point, 0.0, 1.0) * 255).astype(np.uint8).reshape(1, 2)


def _cartoon_outlier(spec: SynthSpec, base: np.ndarray, axis: int) -> np.ndarray:
    values = base.astype(np.float64) / 255
    values[0, axis] = np.clip(values[0, axis] + spec.cartoon_shift, 0.0, 1.0)
    return np.round(values * 255).astype(np.uint8)


def _inlier(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "cartoon2d":
        return _cartoon_point(spec, rng)
    return _base_image(rng, spec.image_size)


def _outlier(spec: SynthSpec, base_rng: np.random.Generator, corruption_rng: np.random.Generator,
             index: int, sample_id: str) -> Tuple[np.ndarray, np.ndarray]:
    """Corrupted copy of a fresh base image and the mask of changed pixels"""
    for attempt in range(MAX_REDRAWS):
        base = _inlier(spec, base_rng)
        if spec.kind == "cartoon2d":
            corrupted = _cartoon_outlier(spec, base, index % 2)
        else:
            corrupted = CORRUPTIONS[spec.kind](spec, corruption_rng, base)
        mask = (corrupted != base).astype(np.uint8)
        if mask.any():
            return corrupted, mask
        logger.warning("Corruption left %s unchanged; redrawing (attempt %d)", sample_id, attempt + 1)
    raise DatasetError(f"sample {sample_id}: corruption changed no pixel in {MAX_REDRAWS} draws")


def _to_sample(pixels: np.ndarray, label: int, mask: Optional[np.ndarray], sample_id: str) -> Sample:
    return Sample(image=pixels.astype(np.float64) / 255, label=label, mask=mask, sample_id=sample_id)


def generate_synthetic(spec: SynthSpec, out_dir: Optional[Union[str, Path]] = None
                       ) -> Tuple[DatasetManifest, ClassDataset]:
    """
    Generate one synthetic anomaly class.

    Inliers are base images (or 2-D points for cartoon2d); outliers are
    corrupted copies whose mask marks exactly the changed pixels. Every
    draw comes from seeded streams, so the output is a function of spec.

    Args:
        spec: Generation recipe
        out_dir: If given, graymaps and manifest.json are written there

    Returns:
        Tuple of (manifest, in-memory dataset)
    """
    base_rng = rng_for(spec.seed, f"{spec.kind}/base")
    corruption_rng = rng_for(spec.seed, f"{spec.kind}/corruption")
    raw: Dict[str, List[Tuple[str, np.ndarray, int, Optional[np.ndarray]]]] = {}

    def inliers(split: str, count: int, start: int = 0):
        return [(f"{split}_{start + i:04d}", _inlier(spec, base_rng), 0, None) for i in range(count)]

    def outliers(split: str, count: int, start: int = 0):
        rows = []
        for i in range(count):
            sample_id = f"{split}_{start + i:04d}"
            pixels, mask = _outlier(spec, base_rng, corruption_rng, i, sample_id)
            rows.append((sample_id, pixels, 1, mask))
        return rows

    n_test_inliers = spec.n_test // 2
    raw["train"] = inliers("train", spec.n_train)
    raw["val"] = inliers("val", spec.n_val)
    raw["val_outliers"] = outliers("valout", spec.n_val_outliers)
    raw["test"] = inliers("test", n_test_inliers) + outliers("test", spec.n_test - n_test_inliers, n_test_inliers)

    splits = {name: [_to_sample(p, label, m, sid) for sid, p, label, m in rows] for name, rows in raw.items()}
    dataset = ClassDataset(class_name=spec.kind, **splits)

    entries = {
        name: [ManifestEntry(image=f"images/{sid}.pgm", label=label,
                             mask=None if m is None else f"masks/{sid}.pgm")
               for sid, _, label, m in rows]
        for name, rows in raw.items()
    }
    manifest = DatasetManifest(class_name=spec.kind, **entries)

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        for rows in raw.values():
            for sample_id, pixels, _, mask in rows:
                write_graymap(out_dir / "images" / f"{sample_id}.pgm", pixels)
                if mask is not None:
                    write_graymap(out_dir / "masks" / f"{sample_id}.pgm", mask * 255)
        (out_dir / MANIFEST_FILE).write_text(manifest.model_dump_json(by_alias=True, indent=2))
        logger.info("Wrote synthetic class %s to %s", spec.kind, out_dir)

    return manifest, dataset


# --- Manifest loading -----------------------------------------------------

def _load_entry(root: Path, entry: ManifestEntry) -> Sample:
    sample_id = Path(entry.image).stem
    image_path = root / entry.image
    if not image_path.exists():
        raise DatasetError(f"sample {sample_id}: missing image file {image_path}")
    pixels = read_graymap(image_path)
    mask = None
    if entry.mask is not None:
        mask_path = root / entry.mask
        if not mask_path.exists():
            raise DatasetError(f"sample {sample_id}: missing mask file {mask_path}")
        mask = (read_graymap(mask_path) >= 128).astype(np.uint8)
    return _to_sample(pixels, entry.label, mask, sample_id)


def load_manifest(path: Union[str, Path]) -> ClassDataset:
    """Load a manifest (file or directory containing manifest.json) and every sample it lists"""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    try:
        manifest = DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DatasetError(f"{path}: malformed manifest: {e}") from e

    root = path.parent
    splits = {
        "train": [_load_entry(root, e) for e in manifest.train],
        "val": [_load_entry(root, e) for e in manifest.val],
        "val_outliers": [_load_entry(root, e) for e in manifest.val_outliers],
        "test": [_load_entry(root, e) for e in manifest.test],
    }
    dataset = ClassDataset(class_name=manifest.class_name, **splits)
    logger.info("Loaded class %s: %d train, %d val, %d val outliers, %d test",
                dataset.class_name, len(dataset.train), len(dataset.val),
                len(dataset.val_outliers), len(dataset.test))
    return dataset


# --- Heatmaps -------------------------------------------------------------

def render_heatmap(values: np.ndarray) -> np.ndarray:
    """Rectify and scale so the maximum maps to 255; all-zero maps stay black"""
    rectified = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    peak = rectified.max() if rectified.size else 0.0
    if peak <= 0.0:
        return np.zeros(rectified.shape, dtype=np.uint8)
    return np.round(rectified / peak * 255).astype(np.uint8)


def write_heatmap(heatmap, path: Union[str, Path]) -> List[Path]:
    """
    Write the raw sidecar (<path>.hm) and an 8-bit rendering (<path>.pgm).

    The sidecar is the ASCII header "HM1 <H> <W>\\n" followed by row-major
    little-endian float32 values.
    """
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"heatmap for {path} has non-finite values")
    values = np.atleast_2d(values)
    height, width = values.shape
    path = Path(path)
    sidecar = path.with_suffix(".hm")
    rendering = path.with_suffix(".pgm")
    header = f"{HEATMAP_MAGIC} {height} {width}\n".encode("ascii")
    sidecar.write_bytes(header + values.astype("<f4").tobytes())
    write_graymap(rendering, render_heatmap(values))
    return [sidecar, rendering]


def read_heatmap(path: Union[str, Path]) -> np.ndarray:
    """Read an HM1 sidecar back as a float32 (H, W) array"""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    parts = raw[:newline].decode("ascii", errors="replace").split() if newline >= 0 else []
    if len(parts) != 3 or parts[0] != HEATMAP_MAGIC:
        raise DatasetError(f"{path}: not an {HEATMAP_MAGIC} heatmap sidecar")
    height, width = int(parts[1]), int(parts[2])
    payload = raw[newline + 1:]
    if len(payload) != 4 * height * width:
        raise DatasetError(f"{path}: expected {height * width} values, found {len(payload) // 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(height, width).copy()
