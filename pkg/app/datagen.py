# app/datagen.py
"""
Module: datagen.py

Procedural source/target image domains, the 90-degree rotation used by the
pretext task, and IDX binary input/output.

The generated dataset ("shifted shapes") draws K glyph classes on a colored
background. Every glyph is rotationally asymmetric, so the rotation applied
to an image can be read off the object itself. Source and target differ only
in background hue, background texture and additive noise, all controlled by
``DomainShift``. Pixels are quantized to multiples of 1/255 so a dataset
written to IDX and read back is bit-identical.

Functions:
- generate_shifted_shapes(spec) -> (source, target, target_eval)
- rotate_image(x, k) -> counter-clockwise rotation by k*90 degrees
- augment_batch(batch, rng) -> originals followed by one rotated copy each
- load_idx(images_path, labels_path) -> list of Example
- save_dataset(...) / load_dataset(...) -> dataset directory with four IDX files and meta.txt
"""
from __future__ import annotations

import colorsys
import enum
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.errors import DatasetNotFoundError, IDXFormatError, LabelLeakageError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_UBYTE = 0x08
IDX_IMAGES_GRAY = 0x00000803
IDX_IMAGES_COLOR = 0x00000804
IDX_LABELS = 0x00000801

N_ROTATIONS = 4
BASE_NOISE_SIGMA = 0.02
SOURCE_HUE = 0.60
STYLE_HUE_STEP = 0.12

DATASET_FILES = {
    "source_images": "source-images.idx",
    "source_labels": "source-labels.idx",
    "target_images": "target-images.idx",
    "target_labels": "target-labels.idx",
}
META_FILE = "meta.txt"


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class Example:
    """
    One image with its optional annotations.

    ``image`` is ``3×H×W`` float64 in [0, 1]. ``rot_label`` is set only on
    images produced by ``rotate_image`` through ``augment_batch``.
    """

    image: np.ndarray
    label: Optional[int] = None
    domain: Domain = Domain.SOURCE
    rot_label: Optional[int] = None


class DomainShift(BaseModel):
    background_hue_shift: float = Field(0.0, ge=0.0, le=1.0, description="Hue rotation of the target background, as a fraction of the color wheel")
    noise_sigma: float = Field(0.0, ge=0.0, description="Std of extra Gaussian pixel noise on the target domain")
    texture_id: int = Field(0, ge=0, le=3, description="Target background texture: 0 none, 1 stripes, 2 checker, 3 dots")

    @classmethod
    def from_strength(cls, strength: float) -> "DomainShift":
        """Map a single scalar shift strength in [0, 1] onto the three shift knobs."""
        if not 0.0 <= strength <= 1.0:
            raise ValueError(f"shift strength must lie in [0, 1], got {strength}")
        return cls(
            background_hue_shift=0.5 * strength,
            noise_sigma=0.12 * strength,
            texture_id=1 if strength > 0 else 0,
        )


class DatasetSpec(BaseModel):
    n_source: int = Field(2000, description="Number of labeled source examples (N_s)")
    n_target: int = Field(2000, description="Number of unlabeled target examples (N_t)")
    n_classes: int = Field(5, description="Number of glyph classes (K)")
    image_size: int = Field(32, description="Image height and width")
    domain_shift: DomainShift = Field(default_factory=DomainShift)
    seed: int = Field(0, ge=0, lt=2**64, description="Generator seed")
    n_source_styles: int = Field(1, ge=1, le=4, description="Number of distinct source background styles")

    @field_validator("n_classes")
    def validate_classes(cls, value):
        if value < 2:
            raise ValueError("n_classes must be at least 2")
        if value > len(GLYPHS):
            raise ValueError(f"n_classes must be at most {len(GLYPHS)}")
        return value

    @field_validator("image_size")
    def validate_size(cls, value):
        if value < 16:
            raise ValueError("image_size must be at least 16")
        return value

    @model_validator(mode="after")
    def validate_counts(self):
        if self.n_source < self.n_classes or self.n_target < self.n_classes:
            raise ValueError("n_source and n_target must be at least n_classes")
        return self


# ----------------------------------------------------------------------
# glyphs
# ----------------------------------------------------------------------
# Primitives in unit coordinates, u to the right and v downward:
# ("rect", u0, v0, u1, v1) or ("tri", (u, v), (u, v), (u, v)).
GLYPHS: Dict[str, Tuple[tuple, ...]] = {
    "arrow": (("rect", 0.42, 0.38, 0.58, 0.92), ("tri", (0.5, 0.06), (0.18, 0.42), (0.82, 0.42))),
    "ell": (("rect", 0.22, 0.08, 0.40, 0.92), ("rect", 0.22, 0.74, 0.80, 0.92)),
    "tee": (("rect", 0.10, 0.08, 0.90, 0.26), ("rect", 0.41, 0.08, 0.59, 0.92)),
    "hook": (("rect", 0.58, 0.08, 0.76, 0.90), ("rect", 0.22, 0.72, 0.76, 0.90), ("rect", 0.22, 0.50, 0.40, 0.90)),
    "wedge": (("tri", (0.12, 0.90), (0.88, 0.90), (0.12, 0.12)),),
    "eff": (("rect", 0.22, 0.08, 0.40, 0.92), ("rect", 0.22, 0.08, 0.82, 0.24), ("rect", 0.22, 0.44, 0.66, 0.58)),
    "flag": (("rect", 0.20, 0.08, 0.36, 0.92), ("tri", (0.36, 0.08), (0.86, 0.26), (0.36, 0.46))),
}
GLYPH_NAMES = tuple(GLYPHS)


def _inside_triangle(u: np.ndarray, v: np.ndarray, a, b, c) -> np.ndarray:
    def edge(p, q):
        return (q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0])

    d1, d2, d3 = edge(a, b), edge(b, c), edge(c, a)
    has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(has_neg & has_pos)


def glyph_mask(name: str, size: int, scale: float = 1.0, offset: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """
    Rasterize glyph ``name`` into a boolean ``size×size`` mask.

    The glyph's unit square is mapped to a ``scale*size`` square whose top-left
    corner sits at ``offset`` (pixels); pixel centers decide membership.
    """
    extent = scale * size
    centers = np.arange(size) + 0.5
    u = (centers[None, :] - offset[0]) / extent
    v = (centers[:, None] - offset[1]) / extent
    u, v = np.broadcast_arrays(u, v)
    mask = np.zeros((size, size), dtype=bool)
    for prim in GLYPHS[name]:
        if prim[0] == "rect":
            _, u0, v0, u1, v1 = prim
            mask |= (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)
        else:
            mask |= _inside_triangle(u, v, *prim[1:])
    return mask


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _texture(texture_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative background pattern around 1.0."""
    if texture_id == 0:
        return np.ones((size, size))
    rows, cols = np.mgrid[0:size, 0:size]
    phase = int(rng.integers(0, 8))
    if texture_id == 1:
        pattern = ((rows + cols + phase) // 3) % 2
    elif texture_id == 2:
        pattern = ((rows + phase) // 4 + (cols + phase) // 4) % 2
    else:
        pattern = (((rows + phase) % 5) < 2) & (((cols + phase) % 5) < 2)
    return 1.0 + 0.35 * (pattern.astype(float) - 0.5)


def _render(
    class_index: int,
    size: int,
    background_hue: float,
    texture_id: int,
    noise_sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    scale = rng.uniform(0.62, 0.88)
    extent = scale * size
    offset = (rng.uniform(0.0, size - extent), rng.uniform(0.0, size - extent))
    mask = glyph_mask(GLYPH_NAMES[class_index], size, scale, offset)

    bg = _hsv(background_hue + rng.uniform(-0.04, 0.04), rng.uniform(0.35, 0.55), rng.uniform(0.30, 0.45))
    fg = _hsv(rng.uniform(0.0, 1.0), rng.uniform(0.55, 0.9), rng.uniform(0.85, 1.0))
    texture = _texture(texture_id, size, rng)

    image = np.where(mask[None, :, :], fg[:, None, None], bg[:, None, None] * texture[None, :, :])
    sigma = float(np.hypot(BASE_NOISE_SIGMA, noise_sigma))
    image = image + rng.normal(0.0, sigma, size=image.shape)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def generate_shifted_shapes(spec: DatasetSpec) -> Tuple[List[Example], List[Example], List[Example]]:
    """
    Generate the labeled source domain and the shifted target domain.

    Parameters:
    - spec (DatasetSpec): counts, class count, image size, shift and seed.

    Returns:
    - (source, target, target_eval): ``target`` carries no labels; ``target_eval``
      holds the same images with their labels attached, for measurement only.

    Identical specs give identical pixels. Classes are balanced to within one
    example per class.
    """
    logger.debug(f"generate_shifted_shapes() called with spec={spec.model_dump()}")
    shift = spec.domain_shift
    size = spec.image_size

    source_rng = np.random.default_rng([spec.seed, 0])
    source_labels = _balanced_labels(spec.n_source, spec.n_classes, source_rng)
    source: List[Example] = []
    for i, label in enumerate(source_labels):
        style = i % spec.n_source_styles
        image = _render(int(label), size, SOURCE_HUE + STYLE_HUE_STEP * style, 0, 0.0, source_rng)
        source.append(Example(image=image, label=int(label), domain=Domain.SOURCE))

    target_rng = np.random.default_rng([spec.seed, 1])
    target_labels = _balanced_labels(spec.n_target, spec.n_classes, target_rng)
    target: List[Example] = []
    target_eval: List[Example] = []
    for label in target_labels:
        image = _render(
            int(label), size, SOURCE_HUE + shift.background_hue_shift, shift.texture_id, shift.noise_sigma, target_rng
        )
        target.append(Example(image=image, domain=Domain.TARGET))
        target_eval.append(Example(image=image, label=int(label), domain=Domain.TARGET))

    logger.info(
        f"Generated {len(source)} source and {len(target)} target examples "
        f"(K={spec.n_classes}, size={size}, seed={spec.seed})"
    )
    return source, target, target_eval


# ----------------------------------------------------------------------
# rotation pretext
# ----------------------------------------------------------------------
def rotate_image(x: np.ndarray, k: int) -> np.ndarray:
    """
    Rotate a ``C×H×W`` image counter-clockwise by ``k*90`` degrees.

    A pure index permutation: the pixel multiset of every channel is preserved.

    Example:
    >>> rotate_image(np.array([[[1, 2], [3, 4]]]), 1).tolist()
    [[[2, 4], [1, 3]]]
    """
    if isinstance(k, bool) or int(k) != k or not 0 <= k < N_ROTATIONS:
        logger.error(f"Invalid rotation label {k}")
        raise ValueError(f"rotation label must be in [0, 3], got {k}")
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        logger.error(f"Cannot rotate non-square image of shape {x.shape}")
        raise ValueError(f"rotate_image needs a square C×H×W image, got shape {x.shape}")
    return np.rot90(x, int(k), axes=(1, 2)).copy()


def rotate_images(images: np.ndarray, rot_labels: np.ndarray) -> np.ndarray:
    """Batched ``rotate_image`` over ``n×C×H×W`` with one label per image."""
    out = np.empty_like(images)
    for k in range(N_ROTATIONS):
        idx = np.flatnonzero(rot_labels == k)
        if idx.size:
            out[idx] = np.rot90(images[idx], k, axes=(2, 3))
    return out


def augment_images(images: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw one rotation label per image uniformly from {0,1,2,3} and apply it."""
    rot_labels = rng.integers(0, N_ROTATIONS, size=images.shape[0])
    return rotate_images(images, rot_labels), rot_labels


def augment_batch(batch: Sequence[Example], rng: np.random.Generator) -> List[Example]:
    """
    Pair every target example with one randomly rotated copy.

    Returns the n originals followed by the n rotated copies, so pair ``i`` is
    ``(out[i], out[n + i])`` and ``rotate_image(out[i].image, out[n+i].rot_label)``
    reproduces ``out[n+i].image`` exactly.
    """
    for ex in batch:
        if ex.domain is not Domain.TARGET:
            logger.error("augment_batch() received a source-domain example")
            raise LabelLeakageError("augment_batch accepts target-domain examples only")
    if not batch:
        return []
    rot_labels = rng.integers(0, N_ROTATIONS, size=len(batch))
    rotated = [
        Example(image=rotate_image(ex.image, int(k)), label=ex.label, domain=ex.domain, rot_label=int(k))
        for ex, k in zip(batch, rot_labels)
    ]
    return list(batch) + rotated


# ----------------------------------------------------------------------
# IDX binary format
# ----------------------------------------------------------------------
def encode_idx(array: np.ndarray) -> bytes:
    """Serialize an unsigned-byte array as IDX (big-endian magic and extents)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, IDX_UBYTE, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.tobytes()


def write_idx(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))


def read_idx(path: PathLike) -> Tuple[int, np.ndarray]:
    """Read an unsigned-byte IDX file; returns ``(magic, array)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    zero, dtype, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or dtype != IDX_UBYTE or ndim == 0:
        logger.error(f"Bad IDX magic 0x{magic:08x} in {path}")
        raise IDXFormatError(f"{path}: bad magic number 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    if len(raw) - header_len < expected:
        logger.error(f"Truncated IDX payload in {path}: {len(raw) - header_len} of {expected} bytes")
        raise IDXFormatError(f"{path}: truncated payload, expected {expected} bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_len).reshape(dims)
    return magic, data


def _read_images(path: PathLike) -> np.ndarray:
    magic, data = read_idx(path)
    if magic == IDX_IMAGES_GRAY:
        data = np.repeat(data[:, None, :, :], 3, axis=1)
    elif magic != IDX_IMAGES_COLOR or data.shape[1] != 3:
        raise IDXFormatError(f"{path}: bad magic number 0x{magic:08x} for an image file")
    return data.astype(np.float64) / 255.0


def _read_labels(path: PathLike) -> np.ndarray:
    magic, data = read_idx(path)
    if magic != IDX_LABELS:
        raise IDXFormatError(f"{path}: bad magic number 0x{magic:08x} for a label file")
    return data.astype(np.int64)


def load_idx(images_path: PathLike, labels_path: Optional[PathLike], domain: Domain = Domain.SOURCE) -> List[Example]:
    """
    Load an IDX image file and its label file into Examples.

    Grayscale images (magic 0x00000803) are replicated to three channels;
    color images (magic 0x00000804, ``n×3×h×w``) are taken as is. Bytes are
    scaled to [0, 1] by dividing by 255. ``labels_path=None`` loads unlabeled.
    """
    logger.debug(f"load_idx() called with images={images_path}, labels={labels_path}")
    images = _read_images(images_path)
    if labels_path is None:
        return [Example(image=img, domain=domain) for img in images]
    labels = _read_labels(labels_path)
    if labels.shape[0] != images.shape[0]:
        logger.error(f"IDX count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
        raise IDXFormatError(f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    return [Example(image=img, label=int(lbl), domain=domain) for img, lbl in zip(images, labels)]


# ----------------------------------------------------------------------
# dataset container and directory layout
# ----------------------------------------------------------------------
def stack_images(examples: Sequence[Example]) -> np.ndarray:
    return np.stack([ex.image for ex in examples]) if examples else np.empty((0, 3, 0, 0))


def stack_labels(examples: Sequence[Example]) -> np.ndarray:
    return np.array([ex.label for ex in examples], dtype=np.int64)


@dataclass
class DomainDataset:
    """Source, unlabeled target and labeled target-evaluation splits plus provenance."""

    source: List[Example]
    target: List[Example]
    target_eval: List[Example]
    n_classes: int
    checksum: str = ""
    meta: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_spec(cls, spec: DatasetSpec) -> "DomainDataset":
        source, target, target_eval = generate_shifted_shapes(spec)
        dataset = cls(source, target, target_eval, spec.n_classes, meta=spec_meta(spec))
        dataset.checksum = _digest(dataset.idx_payloads().values())
        return dataset

    def idx_payloads(self) -> Dict[str, bytes]:
        """IDX bytes of the four dataset files, keyed like ``DATASET_FILES``."""
        return {
            "source_images": encode_idx(_to_bytes(self.source_images)),
            "source_labels": encode_idx(self.source_labels),
            "target_images": encode_idx(_to_bytes(stack_images(self.target_eval))),
            "target_labels": encode_idx(self.target_eval_labels),
        }

    @property
    def image_size(self) -> int:
        return int(self.source[0].image.shape[-1])

    @cached_property
    def source_images(self) -> np.ndarray:
        return stack_images(self.source)

    @cached_property
    def source_labels(self) -> np.ndarray:
        return stack_labels(self.source)

    @cached_property
    def target_images(self) -> np.ndarray:
        return stack_images(self.target)

    @cached_property
    def target_eval_labels(self) -> np.ndarray:
        return stack_labels(self.target_eval)


def spec_meta(spec: DatasetSpec) -> Dict[str, str]:
    shift = spec.domain_shift
    return {
        "seed": str(spec.seed),
        "K": str(spec.n_classes),
        "n_source": str(spec.n_source),
        "n_target": str(spec.n_target),
        "image_size": str(spec.image_size),
        "n_source_styles": str(spec.n_source_styles),
        "background_hue_shift": repr(shift.background_hue_shift),
        "noise_sigma": repr(shift.noise_sigma),
        "texture_id": str(shift.texture_id),
    }


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.round(images * 255.0).astype(np.uint8)


def save_dataset(dataset: DomainDataset, out_dir: PathLike) -> str:
    """
    Write the four IDX files and ``meta.txt``; return the dataset checksum.

    The checksum is the SHA-256 over the IDX files in a fixed order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payloads = dataset.idx_payloads()
    for key, payload in payloads.items():
        (out / DATASET_FILES[key]).write_bytes(payload)
    checksum = _digest(payloads.values())
    dataset.checksum = checksum
    meta = dict(dataset.meta, checksum=checksum)
    (out / META_FILE).write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    logger.info(f"Wrote dataset to {out} (checksum {checksum[:12]})")
    return checksum


def _digest(payloads) -> str:
    digest = hashlib.sha256()
    for payload in payloads:
        digest.update(payload)
    return digest.hexdigest()


def dataset_checksum(directory: PathLike) -> str:
    return _digest(Path(directory, DATASET_FILES[key]).read_bytes() for key in DATASET_FILES)


def read_meta(path: PathLike) -> Dict[str, str]:
    meta: Dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def load_dataset(directory: PathLike) -> DomainDataset:
    """
    Load a dataset directory written by ``save_dataset``, or four plain IDX files.

    ``meta.txt`` is optional; without it K is taken from the source labels
    and the run manifest carries no dataset spec. Target images are split
    into the unlabeled training list and the labeled evaluation list; the
    trainer only ever sees the former.
    """
    root = Path(directory)
    for name in DATASET_FILES.values():
        if not (root / name).is_file():
            logger.error(f"Dataset file missing: {root / name}")
            raise DatasetNotFoundError(f"dataset file not found: {root / name}")
    meta = read_meta(root / META_FILE) if (root / META_FILE).is_file() else {}
    if not meta:
        logger.warning(f"No {META_FILE} in {root}; number of classes inferred from source labels")
    source = load_idx(root / DATASET_FILES["source_images"], root / DATASET_FILES["source_labels"], Domain.SOURCE)
    target_eval = load_idx(root / DATASET_FILES["target_images"], root / DATASET_FILES["target_labels"], Domain.TARGET)
    target = [Example(image=ex.image, domain=Domain.TARGET) for ex in target_eval]
    n_classes = int(meta.get("K", max(2, 1 + max((ex.label for ex in source), default=0))))
    checksum = dataset_checksum(root)
    logger.info(f"Loaded dataset {root}: {len(source)} source, {len(target)} target, K={n_classes}")
    return DomainDataset(source, target, target_eval, n_classes, checksum=checksum, meta=meta)


def spec_from_meta(meta: Dict[str, str]) -> Optional[DatasetSpec]:
    """Rebuild the ``DatasetSpec`` recorded in ``meta.txt``; None for foreign datasets."""
    try:
        return DatasetSpec(
            n_source=meta["n_source"],
            n_target=meta["n_target"],
            n_classes=meta["K"],
            image_size=meta["image_size"],
            n_source_styles=meta.get("n_source_styles", 1),
            seed=meta["seed"],
            domain_shift=DomainShift(
                background_hue_shift=meta["background_hue_shift"],
                noise_sigma=meta["noise_sigma"],
                texture_id=meta["texture_id"],
            ),
        )
    except (KeyError, ValidationError):
        return None
