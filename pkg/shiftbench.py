"""
Synthetic Shift Benchmark
=========================

Deterministic stand-in for a micrograph classification task:

- ``gen_base``      K procedural texture families (blob, rod, plate, sphere, crack)
- ``apply_aging``   feature-level shift: progressive erosion + roughening of the motifs
- ``apply_detector`` statistical-level shift: blur, gamma, contrast, offset, noise
- ``split_5050``    class-stratified edit/test halves

Every generator is a pure function of its parameters and seed.  Datasets
persist in a small checksummed container (see ``save_dataset``).
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.ndimage import gaussian_filter, grey_erosion

from checkpoint import Reader, atomic_write_bytes, seal, text_block, unseal
from errors import FormatError, UsageError
from models import AGING_DURATIONS, ShiftKind, ShiftSpec
from tensor import Tensor

logger = logging.getLogger(__name__)

Split = Literal["train", "val", "pool"]

IMAGE_SIZE = 32
BACKGROUND_NOISE = 0.03

# g(60) == AGING_SEVERITY; g is linear in D
AGING_SEVERITY = 0.7
ROUGHNESS_GAIN = 0.6
ROUGHNESS_SIGMA = 1.0

# fixed collection-style change applied to confounded aging sets
CONFOUNDED_CONTRAST = 1.3
CONFOUNDED_OFFSET = 0.12

DATASET_MAGIC = b"SHEDDATA"
DATASET_VERSION = 1

MOTIFS = ("blob", "rod", "plate", "sphere", "crack")


def derive_seed(seed: int, *keys) -> int:
    """Independent child seed for (seed, keys...); stable across runs and platforms."""
    entropy = [int(seed) % (1 << 63)] + [zlib.crc32(str(k).encode("utf-8")) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


# ──────────────────────────────────────────────
# Dataset
# ──────────────────────────────────────────────

@dataclass
class SynthDataset:
    """Labeled set: images (n, 1, 32, 32) in [0, 1] for the bench, integer labels in [0, K)."""
    images: Tensor
    labels: np.ndarray
    seed: int
    class_count: int
    split: Split
    name: str
    spec: Optional[ShiftSpec] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim < 2 or self.images.shape[0] != len(self.labels):
            raise UsageError(f"dataset {self.name!r}: images {self.images.shape} vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise UsageError(f"dataset {self.name!r}: labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @cached_property
    def dataset_id(self) -> str:
        """Content-derived id: regenerating the same set gives the same id."""
        crc = zlib.crc32(np.ascontiguousarray(self.images.data, dtype="<f8").tobytes())
        crc = zlib.crc32(np.ascontiguousarray(self.labels, dtype="<i8").tobytes(), crc)
        return f"{self.name}:{self.split}:{len(self)}:{crc:08x}"

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices: Sequence[int], split: Split, name: str) -> "SynthDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SynthDataset(
            images=Tensor(self.images.data[idx]),
            labels=self.labels[idx].copy(),
            seed=self.seed,
            class_count=self.class_count,
            split=split,
            name=name,
            spec=self.spec,
        )

    def with_images(self, images: np.ndarray, spec: Optional[ShiftSpec]) -> "SynthDataset":
        return SynthDataset(
            images=Tensor(images, copy=False),
            labels=self.labels.copy(),
            seed=self.seed,
            class_count=self.class_count,
            split=self.split,
            name=self.name,
            spec=spec,
        )


# ──────────────────────────────────────────────
# Texture motifs
# ──────────────────────────────────────────────

_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)


def _blob(rng: np.random.Generator, scale: float) -> np.ndarray:
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for _ in range(rng.integers(3, 6)):
        cy, cx = rng.uniform(4, IMAGE_SIZE - 4, size=2)
        s = rng.uniform(1.5, 3.0) * scale
        img += 0.8 * np.exp(-((_XX - cx) ** 2 + (_YY - cy) ** 2) / (2 * s * s))
    return img


def _rod(rng: np.random.Generator, scale: float) -> np.ndarray:
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(6, IMAGE_SIZE - 6, size=2)
        theta = rng.uniform(0, np.pi)
        half = rng.uniform(5, 10) * scale
        width = 0.9 * scale
        c, s = np.cos(theta), np.sin(theta)
        along = c * (_XX - cx) + s * (_YY - cy)
        across = -s * (_XX - cx) + c * (_YY - cy)
        rod = np.exp(-across ** 2 / (2 * width * width)) * (np.abs(along) <= half)
        img = np.maximum(img, 0.9 * rod)
    return img


def _plate(rng: np.random.Generator, scale: float) -> np.ndarray:
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for _ in range(rng.integers(2, 4)):
        h, w = (rng.uniform(5, 10, size=2) * scale).astype(int)
        y0 = rng.integers(0, max(1, IMAGE_SIZE - h))
        x0 = rng.integers(0, max(1, IMAGE_SIZE - w))
        img[y0:y0 + h, x0:x0 + w] = np.maximum(img[y0:y0 + h, x0:x0 + w], rng.uniform(0.55, 0.75))
    return img


def _sphere(rng: np.random.Generator, scale: float) -> np.ndarray:
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(5, IMAGE_SIZE - 5, size=2)
        r = rng.uniform(3.0, 6.0) * scale
        d2 = ((_XX - cx) ** 2 + (_YY - cy) ** 2) / (r * r)
        img = np.maximum(img, np.sqrt(np.clip(1.0 - d2, 0.0, None)))
    return img


def _crack(rng: np.random.Generator, scale: float) -> np.ndarray:
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), 0.75)
    for _ in range(rng.integers(2, 4)):
        y, x = rng.uniform(0, IMAGE_SIZE, size=2)
        heading = rng.uniform(0, 2 * np.pi)
        for _ in range(rng.integers(20, 40)):
            heading += rng.normal(0, 0.4)
            y += np.sin(heading) * scale
            x += np.cos(heading) * scale
            yi, xi = int(y) % IMAGE_SIZE, int(x) % IMAGE_SIZE
            img[yi, xi] = 0.1
    return gaussian_filter(img, sigma=0.5)


_MOTIF_FNS: Dict[str, Callable[[np.random.Generator, float], np.ndarray]] = {
    "blob": _blob,
    "rod": _rod,
    "plate": _plate,
    "sphere": _sphere,
    "crack": _crack,
}


def motif_name(label: int) -> str:
    """Family for class k; classes past the fifth reuse families at a larger scale."""
    return MOTIFS[label % len(MOTIFS)]


def _render(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    images = np.empty((len(labels), 1, IMAGE_SIZE, IMAGE_SIZE))
    for i, label in enumerate(labels):
        scale = 1.0 + 0.5 * (int(label) // len(MOTIFS))
        img = _MOTIF_FNS[motif_name(int(label))](rng, scale)
        img = img + rng.normal(0.0, BACKGROUND_NOISE, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return images


# ──────────────────────────────────────────────
# Generators
# ──────────────────────────────────────────────

def train_size(n: int) -> int:
    """round(0.8 n), halves rounded up."""
    return (8 * n + 5) // 10


def gen_base(class_count: int, n: int, seed: int) -> Tuple[SynthDataset, SynthDataset]:
    """K texture families, n images, 80/20 class-balanced train/val split."""
    if class_count < 2:
        raise UsageError(f"need at least 2 classes, got {class_count}")
    if n < class_count:
        raise UsageError(f"dataset size {n} is smaller than class count {class_count}")

    # cyclic labels keep every prefix and suffix balanced within ±1
    labels = np.arange(n, dtype=np.int64) % class_count
    images = _render(labels, np.random.default_rng(derive_seed(seed, "base")))
    full = SynthDataset(Tensor(images, copy=False), labels, seed, class_count, "pool", "base")
    cut = train_size(n)
    train = full.subset(np.arange(cut), "train", "base")
    val = full.subset(np.arange(cut, n), "val", "base")
    logger.info(f"✅ Generated base dataset: K={class_count}, train={len(train)}, val={len(val)}, seed={seed}")
    return train, val


def gen_pool(
    class_count: int,
    n: int,
    seed: int,
    classes: Optional[Sequence[int]] = None,
    name: str = "pool",
) -> SynthDataset:
    """Unshifted concept pool drawn from ``classes`` (all classes by default)."""
    classes = list(range(class_count)) if classes is None else sorted(set(int(c) for c in classes))
    if not classes or any(not 0 <= c < class_count for c in classes):
        raise UsageError(f"pool classes {classes} not within [0, {class_count})")
    if n < len(classes):
        raise UsageError(f"pool size {n} is smaller than its {len(classes)} classes")
    labels = np.asarray(classes, dtype=np.int64)[np.arange(n) % len(classes)]
    images = _render(labels, np.random.default_rng(derive_seed(seed, "pool", name)))
    return SynthDataset(Tensor(images, copy=False), labels, seed, class_count, "pool", name)


def aging_magnitude(duration: int) -> float:
    """g(D): 0 at D=0, strictly increasing, AGING_SEVERITY at 60 days."""
    if duration not in AGING_DURATIONS:
        raise UsageError(f"unsupported aging duration {duration}; expected one of {AGING_DURATIONS}")
    return AGING_SEVERITY * duration / 60.0


def apply_aging(d: SynthDataset, duration: int, confounded: bool = False, seed: int = 0) -> SynthDataset:
    """Class-preserving morphological perturbation of magnitude g(D)."""
    g = aging_magnitude(duration)
    spec = ShiftSpec(kind=ShiftKind.AGING, duration=duration, magnitude=g, confounded=confounded, seed=seed)
    if g == 0.0 and not confounded:
        return d.with_images(d.images.data.copy(), spec)

    x = d.images.data
    if g > 0.0:
        rng = np.random.default_rng(derive_seed(seed, "aging", duration))
        eroded = grey_erosion(x, size=(1, 1, 3, 3))
        rough = gaussian_filter(rng.normal(size=x.shape), sigma=(0, 0, ROUGHNESS_SIGMA, ROUGHNESS_SIGMA))
        x = ((1.0 - g) * x + g * eroded) * (1.0 + ROUGHNESS_GAIN * g * rough)
    if confounded:
        x = (x - 0.5) * CONFOUNDED_CONTRAST + 0.5 + CONFOUNDED_OFFSET
    return d.with_images(np.clip(x, 0.0, 1.0), spec)


def apply_detector(d: SynthDataset, spec: ShiftSpec) -> SynthDataset:
    """Global photometric transform + noise, identical in distribution across classes."""
    try:
        spec = ShiftSpec.model_validate(spec.model_dump())
    except ValidationError as e:
        raise UsageError(f"detector spec out of range: {e.errors()[0]['msg']}") from None
    if spec.kind != ShiftKind.DETECTOR:
        raise UsageError(f"apply_detector needs a detector spec, got {spec.kind.value}")
    if spec.is_identity_detector:
        return d.with_images(d.images.data.copy(), spec)

    x = d.images.data.copy()
    if spec.blur_radius > 0:
        x = gaussian_filter(x, sigma=(0, 0, spec.blur_radius, spec.blur_radius))
    if spec.gamma != 1.0:
        x = np.clip(x, 0.0, 1.0) ** spec.gamma
    if spec.contrast_gain != 1.0:
        x = (x - 0.5) * spec.contrast_gain + 0.5
    if spec.brightness_offset != 0.0:
        x = x + spec.brightness_offset
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(derive_seed(spec.seed, "detector-noise"))
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    return d.with_images(np.clip(x, 0.0, 1.0), spec)


def split_5050(d: SynthDataset, seed: int) -> Tuple[SynthDataset, SynthDataset]:
    """Class-stratified (edit_train, edit_test) halves; odd remainders alternate sides."""
    if len(d) < 2:
        raise UsageError(f"cannot split dataset {d.name!r} with {len(d)} example(s)")
    rng = np.random.default_rng(derive_seed(seed, "split", d.name))
    train_idx: List[int] = []
    test_idx: List[int] = []
    extra_to_test = True
    for label in range(d.class_count):
        members = np.flatnonzero(d.labels == label)
        if not len(members):
            continue
        members = rng.permutation(members)
        half = len(members) // 2
        if len(members) % 2:
            cut = half if extra_to_test else half + 1
            extra_to_test = not extra_to_test
        else:
            cut = half
        train_idx.extend(members[:cut].tolist())
        test_idx.extend(members[cut:].tolist())
    return (
        d.subset(sorted(train_idx), "train", f"{d.name}/edit_train"),
        d.subset(sorted(test_idx), "val", f"{d.name}/edit_test"),
    )


# ──────────────────────────────────────────────
# Dataset container
# ──────────────────────────────────────────────
#
#   magic "SHEDDATA" | version u32 | header JSON block | images f64 LE | labels i64 LE | crc32
#
# header: {"name", "split", "seed", "class_count", "count", "shape", "spec"}

def dump_dataset(d: SynthDataset) -> bytes:
    header = {
        "name": d.name,
        "split": d.split,
        "seed": d.seed,
        "class_count": d.class_count,
        "count": len(d),
        "shape": list(d.images.shape[1:]),
        "spec": d.spec.model_dump(mode="json") if d.spec else None,
    }
    body = [
        DATASET_MAGIC,
        (DATASET_VERSION).to_bytes(4, "little"),
        text_block(json.dumps(header, sort_keys=True)),
        np.ascontiguousarray(d.images.data, dtype="<f8").tobytes(),
        np.ascontiguousarray(d.labels, dtype="<i8").tobytes(),
    ]
    return seal(b"".join(body))


def parse_dataset(buf: bytes) -> SynthDataset:
    reader = unseal(buf, DATASET_MAGIC, DATASET_VERSION, "dataset")
    try:
        header = json.loads(reader.text())
        count = int(header["count"])
        shape = tuple(int(s) for s in header["shape"])
        if count < 0 or len(shape) != 3 or min(shape, default=0) < 1:
            raise FormatError(f"dataset: bad extents count={count} shape={shape}")
        images = reader.array("<f8", (count,) + shape).astype(np.float64)
        labels = reader.array("<i8", (count,)).astype(np.int64)
        reader.done()
        spec = ShiftSpec.model_validate(header["spec"]) if header["spec"] is not None else None
        split = header["split"]
        if split not in ("train", "val", "pool"):
            raise FormatError(f"dataset: unknown split tag {split!r}")
        if not np.all(np.isfinite(images)):
            raise FormatError("dataset: non-finite pixel values")
        return SynthDataset(
            Tensor(images, copy=False), labels, int(header["seed"]), int(header["class_count"]),
            split, str(header["name"]), spec,
        )
    except (KeyError, TypeError, ValueError, ValidationError, UsageError) as e:
        raise FormatError(f"dataset: invalid header ({e.__class__.__name__}: {e})") from None


def save_dataset(d: SynthDataset, path: Union[str, Path]) -> Path:
    atomic_write_bytes(path, dump_dataset(d))
    return Path(path)


def load_dataset(path: Union[str, Path]) -> SynthDataset:
    return parse_dataset(Path(path).read_bytes())


# ──────────────────────────────────────────────
# Bench layout
# ──────────────────────────────────────────────

@dataclass
class ShiftBench:
    """Base train/val plus one aging pool per duration and an optional detector pool."""
    base_train: SynthDataset
    base_val: SynthDataset
    aging: Dict[int, SynthDataset] = field(default_factory=dict)
    detector: Optional[SynthDataset] = None

    def targets(self) -> Dict[str, SynthDataset]:
        """Edit targets by name: ``aging:<D>`` and ``detector``."""
        out = {f"aging:{D}": ds for D, ds in sorted(self.aging.items())}
        if self.detector is not None:
            out["detector"] = self.detector
        return out


def gen_bench(
    class_count: int,
    base_size: int,
    aging_sizes: Dict[int, int],
    aging_classes: Iterable[int],
    detector_size: int,
    detector_spec: Optional[ShiftSpec],
    seed: int,
    confounded: Iterable[int] = (),
) -> ShiftBench:
    base_train, base_val = gen_base(class_count, base_size, seed)
    aging_classes = list(aging_classes)
    confounded = set(confounded)
    aging = {}
    for D in sorted(aging_sizes):
        pool = gen_pool(class_count, aging_sizes[D], derive_seed(seed, "aging-pool", D), aging_classes, f"aging_{D}")
        aging[D] = apply_aging(pool, D, confounded=D in confounded, seed=derive_seed(seed, "aging-morph", D))
        logger.info(f"✅ Aging pool D={D}: {len(aging[D])} images (g={aging_magnitude(D):.3f})")
    detector = None
    if detector_size > 0 and detector_spec is not None:
        pool = gen_pool(class_count, detector_size, derive_seed(seed, "detector-pool"), None, "detector")
        detector = apply_detector(pool, detector_spec)
        logger.info(f"✅ Detector pool: {len(detector)} images")
    return ShiftBench(base_train, base_val, aging, detector)


def save_bench(bench: ShiftBench, directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    written = [
        save_dataset(bench.base_train, directory / "base_train.ds"),
        save_dataset(bench.base_val, directory / "base_val.ds"),
    ]
    for D, ds in sorted(bench.aging.items()):
        written.append(save_dataset(ds, directory / f"aging_{D}.ds"))
    if bench.detector is not None:
        written.append(save_dataset(bench.detector, directory / "detector.ds"))
    logger.info(f"📊 Wrote {len(written)} dataset files to {directory}")
    return written


def load_bench(directory: Union[str, Path]) -> ShiftBench:
    directory = Path(directory)
    for required in ("base_train.ds", "base_val.ds"):
        if not (directory / required).is_file():
            raise UsageError(f"dataset directory {directory} has no {required} (run gen-data first)")
    aging = {}
    for path in directory.glob("aging_*.ds"):
        try:
            D = int(path.stem.split("_", 1)[1])
        except ValueError:
            raise FormatError(f"unexpected dataset file name {path.name}") from None
        aging[D] = load_dataset(path)
    detector_path = directory / "detector.ds"
    return ShiftBench(
        base_train=load_dataset(directory / "base_train.ds"),
        base_val=load_dataset(directory / "base_val.ds"),
        aging=dict(sorted(aging.items())),
        detector=load_dataset(detector_path) if detector_path.is_file() else None,
    )


@dataclass
class EditSplits:
    """Per-target halves used by editing and search."""
    edit_train: SynthDataset
    edit_test: SynthDataset


def edit_splits(bench: ShiftBench, seed: int) -> Dict[str, EditSplits]:
    return {name: EditSplits(*split_5050(ds, seed)) for name, ds in bench.targets().items()}
