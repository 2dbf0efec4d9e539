"""Dataset ingestion, preprocessing, fold splitting, augmentation and synthetic data."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb as _hsv_to_rgb
from matplotlib.colors import rgb_to_hsv as _rgb_to_hsv
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MASK_THRESHOLD = 127
IMAGE_SUFFIXES = (".png",)
MASK_SUFFIXES = (".png", ".jpg", ".jpeg")


class DataError(IOError):
    pass


class ImageFormatError(DataError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W
    mask: np.ndarray | None  # H x W, values 0/1
    source_id: str
    fold: int | None = None

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape[1:]}")


# ---------------------------------------------------------------- loading

def _open(path: Path) -> Image.Image:
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return img


def load_image(path) -> np.ndarray:
    path = Path(path)
    img = _open(path)
    if img.mode != "RGB":
        raise ImageFormatError(f"{path}: expected a 3-channel RGB image, got mode {img.mode}")
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0


def load_mask(path) -> np.ndarray:
    path = Path(path)
    img = _open(path)
    arr = np.asarray(img.convert("L"))
    return (arr > MASK_THRESHOLD).astype(np.uint8)


def load_sample(image_path, mask_path=None, source_id: str | None = None) -> Sample:
    image = load_image(image_path)
    mask = load_mask(mask_path) if mask_path is not None else None
    if mask is not None and mask.shape != image.shape[1:]:
        raise ImageFormatError(f"{mask_path}: mask size {mask.shape} differs from image {image.shape[1:]}")
    return Sample(image, mask, source_id or Path(image_path).stem)


def dataset_pairs(root) -> list[tuple[str, Path, Path | None]]:
    """``<root>/images/*.png`` paired by stem with ``<root>/masks/*.{png,jpg}``."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise DataError(f"missing image directory: {img_dir}")
    masks = {}
    if mask_dir.is_dir():
        for p in sorted(mask_dir.iterdir()):
            if p.suffix.lower() in MASK_SUFFIXES:
                masks.setdefault(p.stem, p)
    pairs = [(p.stem, p, masks.get(p.stem)) for p in sorted(img_dir.iterdir())
             if p.suffix.lower() in IMAGE_SUFFIXES]
    if not pairs:
        raise DataError(f"no images found in {img_dir}")
    return pairs


def load_dataset(root, annotated_only: bool = True) -> list[Sample]:
    out = []
    for stem, img, mask in dataset_pairs(root):
        if mask is None and annotated_only:
            continue
        out.append(load_sample(img, mask, stem))
    if not out:
        raise DataError(f"no annotated samples under {root}")
    return out


def save_sample(sample: Sample, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(sample.image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(root / "images" / f"{sample.source_id}.png")
    if sample.mask is not None:
        (root / "masks").mkdir(parents=True, exist_ok=True)
        Image.fromarray((sample.mask > 0).astype(np.uint8) * 255, "L").save(root / "masks" / f"{sample.source_id}.png")


# ---------------------------------------------------------------- preprocessing

def center_crop(s: Sample, target: int) -> Sample:
    h, w = s.image.shape[1:]
    if target > h or target > w:
        raise ValueError(f"crop target {target} exceeds image extent {h}x{w}")
    top, left = (h - target) // 2, (w - target) // 2
    image = s.image[:, top: top + target, left: left + target]
    mask = s.mask[top: top + target, left: left + target] if s.mask is not None else None
    return replace(s, image=image, mask=mask)


def standardize(s: Sample, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> Sample:
    mean = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
    if np.any(std <= 0):
        raise ValueError("std components must be > 0")
    return replace(s, image=((s.image - mean) / std).astype(np.float32))


# ---------------------------------------------------------------- folds

class FoldSplit:
    def __init__(self, assignment: dict[str, int], k: int):
        self.assignment = dict(assignment)
        self.k = k

    def fold(self, i: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f == i]

    @property
    def sizes(self) -> list[int]:
        return [len(self.fold(i)) for i in range(self.k)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sample_id", "fold"])
            for sid, f in self.assignment.items():
                writer.writerow([sid, f])

    @classmethod
    def from_csv(cls, path) -> "FoldSplit":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assignment = {r["sample_id"]: int(r["fold"]) for r in rows}
        return cls(assignment, max(assignment.values()) + 1 if assignment else 0)


def split_folds(ids, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then contiguous partition; the first ``len(ids) % k`` folds get one extra."""
    ids = list(ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(ids) < k:
        raise ValueError(f"need at least {k} ids to make {k} folds, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    base, extra = divmod(len(ids), k)
    assignment, start = {}, 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        for j in order[start: start + size]:
            assignment[ids[j]] = f
        start += size
    # keep the caller's id order in the table
    return FoldSplit({sid: assignment[sid] for sid in ids}, k)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentParams:
    rotation: float = 15.0  # degrees, symmetric
    scale: tuple[float, float] = (0.9, 1.1)
    shift: float = 0.1  # fraction of the extent, symmetric
    shear: float = 5.0  # degrees, symmetric
    hflip: float = 0.5
    vflip: float = 0.5
    hue: float = 10.0  # degrees, additive, symmetric
    saturation: tuple[float, float] = (0.9, 1.1)
    value: tuple[float, float] = (0.9, 1.1)

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0, 0.0, 0.0, 0.0, (1.0, 1.0), (1.0, 1.0))

    def validate(self) -> list[str]:
        errors = []
        for name in ("rotation", "shift", "shear", "hue"):
            if getattr(self, name) < 0:
                errors.append(f"augment.{name} must be >= 0")
        for name in ("hflip", "vflip"):
            if not 0 <= getattr(self, name) <= 1:
                errors.append(f"augment.{name} must be a probability in [0, 1]")
        for name in ("scale", "saturation", "value"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                errors.append(f"augment.{name} must satisfy 0 < low <= high")
        return errors


@dataclass
class AffineDraw:
    angle: float = 0.0  # degrees, counter-clockwise as displayed
    scale: float = 1.0
    shear: float = 0.0  # degrees
    shift: tuple[float, float] = (0.0, 0.0)  # (rows, cols) in pixels
    hflip: bool = False
    vflip: bool = False

    def is_identity(self) -> bool:
        return (self.angle == 0 and self.scale == 1 and self.shear == 0 and self.shift == (0.0, 0.0)
                and not self.hflip and not self.vflip)

    def matrix(self) -> np.ndarray:
        """Forward 2x2 map in (row, col) coordinates about the image center."""
        t = math.radians(self.angle)
        c, s = math.cos(t), math.sin(t)
        # x = col right, y = row down; visual counter-clockwise rotation
        rot_xy = np.array([[c, s], [-s, c]])
        shear_xy = np.array([[1.0, math.tan(math.radians(self.shear))], [0.0, 1.0]])
        flip_xy = np.diag([-1.0 if self.hflip else 1.0, -1.0 if self.vflip else 1.0])
        a_xy = rot_xy @ shear_xy @ (self.scale * flip_xy)
        swap = np.array([[0.0, 1.0], [1.0, 0.0]])
        return swap @ a_xy @ swap


def sample_affine(params: AugmentParams, rng: np.random.Generator, extent: int) -> AffineDraw:
    return AffineDraw(
        angle=float(rng.uniform(-params.rotation, params.rotation)),
        scale=float(rng.uniform(*params.scale)),
        shear=float(rng.uniform(-params.shear, params.shear)),
        shift=(float(rng.uniform(-params.shift, params.shift) * extent),
               float(rng.uniform(-params.shift, params.shift) * extent)),
        hflip=bool(rng.random() < params.hflip),
        vflip=bool(rng.random() < params.vflip),
    )


def apply_affine(s: Sample, draw: AffineDraw) -> Sample:
    """Bilinear + reflection for the image, nearest + reflection for the mask."""
    if draw.is_identity():
        return replace(s, image=s.image.copy(), mask=None if s.mask is None else s.mask.copy())
    h, w = s.image.shape[1:]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    inv = np.linalg.inv(draw.matrix())
    offset = center - inv @ (center + np.asarray(draw.shift))
    image = np.stack([ndimage.affine_transform(ch, inv, offset, order=1, mode="reflect") for ch in s.image])
    mask = None
    if s.mask is not None:
        mask = ndimage.affine_transform(s.mask, inv, offset, order=0, mode="reflect")
    return replace(s, image=image.astype(s.image.dtype), mask=mask)


def augment_affine(s: Sample, params: AugmentParams, rng: np.random.Generator) -> Sample:
    h, w = s.image.shape[1:]
    if h != w:
        raise ValueError("affine augmentation expects a square sample")
    return apply_affine(s, sample_affine(params, rng, h))


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """3 x H x W RGB in [0, 1] -> H (degrees, [0, 360)), S, V."""
    hsv = _rgb_to_hsv(np.moveaxis(np.asarray(image, dtype=np.float64), 0, -1))
    hsv[..., 0] *= 360.0
    return np.moveaxis(hsv, -1, 0)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.moveaxis(np.asarray(hsv, dtype=np.float64), 0, -1).copy()
    hsv[..., 0] = np.mod(hsv[..., 0], 360.0) / 360.0
    return np.moveaxis(_hsv_to_rgb(hsv), -1, 0)


def jitter_hsv(image: np.ndarray, hue_shift: float, sat_factor: float, val_factor: float) -> np.ndarray:
    hsv = rgb_to_hsv(image)
    hsv[0] = np.mod(hsv[0] + hue_shift, 360.0)
    hsv[1] = np.clip(hsv[1] * sat_factor, 0, 1)
    hsv[2] = np.clip(hsv[2] * val_factor, 0, 1)
    return hsv_to_rgb(hsv).astype(image.dtype)


def augment_hsv(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    return jitter_hsv(image, float(rng.uniform(-params.hue, params.hue)),
                      float(rng.uniform(*params.saturation)), float(rng.uniform(*params.value)))


# ---------------------------------------------------------------- synthetic data

def ellipse_mask(shape, center, radii, angle: float = 0.0) -> np.ndarray:
    """Pixels whose centers fall inside the ellipse; radii are (row, col) semi-axes before rotation."""
    rr, cc = np.mgrid[: shape[0], : shape[1]]
    dr, dc = rr - center[0], cc - center[1]
    t = math.radians(angle)
    u = dr * math.cos(t) + dc * math.sin(t)
    v = -dr * math.sin(t) + dc * math.cos(t)
    return (u / radii[0]) ** 2 + (v / radii[1]) ** 2 <= 1.0


def _texture(rng, size, sigma, amplitude):
    noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return amplitude * noise / (noise.std() + 1e-12)


def lesion_count_weights(max_lesions: int, empty_fraction: float = 0.0) -> np.ndarray:
    """Probabilities for 0..max_lesions lesions, halving with each extra lesion."""
    w = np.array([0.0] + [0.5 ** (k - 1) for k in range(1, max_lesions + 1)])
    w[1:] *= (1 - empty_fraction) / w[1:].sum() if max_lesions else 0.0
    w[0] = empty_fraction if max_lesions else 1.0
    return w / w.sum()


def synth_sample(rng: np.random.Generator, size: int, n_lesions: int, radius_range=None,
                 source_id: str = "synth") -> Sample:
    if radius_range is None:
        radius_range = (0.16 * size, 0.23 * size)
    rr, cc = np.mgrid[:size, :size]
    center = (size - 1) / 2
    vignette = 1 - 0.25 * (((rr - center) ** 2 + (cc - center) ** 2) / (2 * center ** 2))
    base = np.array([0.80, 0.52, 0.40]) + rng.uniform(-0.05, 0.05, 3)
    coarse = _texture(rng, size, size / 10, 0.05)
    fine = _texture(rng, size, 1.0, 0.02)
    image = (base[:, None, None] + coarse + fine) * vignette
    mask = np.zeros((size, size), dtype=bool)
    placed = []
    for _ in range(n_lesions):
        for _attempt in range(200):
            a, b = rng.uniform(*radius_range, size=2)
            r = max(a, b)
            cy, cx = rng.uniform(r + 1, size - r - 2, size=2)
            if all(math.hypot(cy - py, cx - px) > r + pr + 3 for py, px, pr in placed):
                break
        else:
            continue
        blob = ellipse_mask((size, size), (cy, cx), (a, b), rng.uniform(0, 180))
        placed.append((cy, cx, r))
        color = np.array([0.62, 0.12, 0.12]) + rng.uniform(-0.05, 0.05, 3)
        shade = 1 + _texture(rng, size, 2.0, 0.06)
        image = np.where(blob, color[:, None, None] * shade, image)
        mask |= blob
    image = np.clip(image + rng.normal(0, 0.01, image.shape), 0, 1).astype(np.float32)
    return Sample(image, mask.astype(np.uint8), source_id)


def synth_blobs(rng: np.random.Generator, count: int, size: int = 64, max_lesions: int = 3,
                empty_fraction: float = 0.0, radius_range=None) -> list[Sample]:
    """Textured mucosa-like frames with 0..max_lesions reddish elliptical lesions."""
    weights = lesion_count_weights(max_lesions, empty_fraction)
    out = []
    for i in range(count):
        n = int(rng.choice(len(weights), p=weights))
        out.append(synth_sample(rng, size, n, radius_range, source_id=f"synth_{i:04d}"))
    return out


# ---------------------------------------------------------------- batches

def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def prepare(s: Sample, augment: AugmentParams | None, rng: np.random.Generator | None,
            mean=IMAGENET_MEAN, std=IMAGENET_STD) -> Sample:
    if augment is not None:
        s = augment_affine(s, augment, rng)
        s = replace(s, image=augment_hsv(s.image, augment, rng))
    return standardize(s, mean, std)


def make_batch(samples: list[Sample], indices, augment: AugmentParams | None = None, seed: int = 0,
               epoch: int = 0, mean=IMAGENET_MEAN, std=IMAGENET_STD, threads: int = 1):
    """Stack prepared samples into N x 3 x H x W images and N x 1 x H x W float labels.

    Each sample draws from its own generator keyed on (seed, epoch, sample index),
    so results do not depend on thread scheduling.
    """
    def one(i):
        rng = sample_rng(seed, epoch, int(i)) if augment is not None else None
        return prepare(samples[i], augment, rng, mean, std)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            prepared = list(pool.map(one, indices))
    else:
        prepared = [one(i) for i in indices]
    x = np.stack([p.image for p in prepared]).astype(np.float32)
    y = np.stack([p.mask for p in prepared])[:, None].astype(np.float32)
    return x, y
