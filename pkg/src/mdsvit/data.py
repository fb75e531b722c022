"""Dataset layout, preprocessing, label-preserving augmentation and batching.

Directory layout::

    root/images/<split>/<id>.{ppm,png}
    root/maps/<split>/<id>.{pgm,png}
    root/fixations/<split>/<id>.{pgm,png}     (optional)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .codec import IMAGE_EXTENSIONS, decode_image
from .exceptions import ConfigError, DegenerateInputError, ManifestError, ShapeError
from .tensor import interpolation_matrix

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SPLITS = ("train", "val")


@dataclass
class SaliencySample:
    image: np.ndarray  # (3, H, W)
    saliency: np.ndarray  # (1, H, W) in [0, 1]
    fixation: np.ndarray | None = None  # (1, H, W) binary
    id: str = ""
    # (mean, std) when the image has been channel-normalised
    norm: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def replace(self, **changes) -> "SaliencySample":
        return dataclasses.replace(self, **changes)


@dataclass
class AugmentConfig:
    p_flip: float = 0.5
    p_blur: float = 0.3
    blur_sigma: tuple[float, float] = (0.3, 1.5)
    p_jitter: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    sharpness: float = 0.2

    def __post_init__(self):
        for name in ("p_flip", "p_blur", "p_jitter"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")
        lo, hi = self.blur_sigma
        if not 0 < lo <= hi:
            raise ConfigError(f"blur_sigma must be a positive range, got {self.blur_sigma}")
        for name in ("brightness", "contrast", "saturation", "sharpness"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} magnitude must be in [0, 1)")


@dataclass
class ManifestEntry:
    id: str
    image: Path
    saliency: Path
    fixation: Path | None = None


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def write(self, path) -> None:
        """Cache file: one tab-separated line per entry (image, map, fixation or empty)."""
        lines = [
            "\t".join([str(e.image), str(e.saliency), str(e.fixation) if e.fixation else ""])
            for e in self.entries
        ]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def read(cls, path, root=None, split: str = "train") -> "DatasetManifest":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            img, sal, fix = (line.split("\t") + ["", ""])[:3]
            entries.append(ManifestEntry(Path(img).stem, Path(img), Path(sal), Path(fix) if fix else None))
        for e in entries:
            for p in (e.image, e.saliency, e.fixation):
                if p is not None and not p.exists():
                    raise ManifestError(f"manifest lists missing file {p}")
        return cls(Path(root) if root else Path(path).parent, split, entries)


def _index_dir(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        return {}
    out: dict[str, Path] = {}
    for p in sorted(d.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS:
            if p.stem in out:
                raise ManifestError(f"duplicate id {p.stem!r} in {d}")
            out[p.stem] = p
    return out


def load_manifest(root, split: str = "train") -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"dataset root {root} does not exist")
    img_dir, map_dir = root / "images" / split, root / "maps" / split
    if not img_dir.is_dir():
        raise ManifestError(f"missing image directory {img_dir}")
    images, maps = _index_dir(img_dir), _index_dir(map_dir)
    fixations = _index_dir(root / "fixations" / split)
    orphans = sorted(set(images) ^ set(maps))
    if orphans:
        raise ManifestError(f"images and maps do not pair up in split {split!r}; orphans: {', '.join(orphans)}")
    entries = [ManifestEntry(k, images[k], maps[k], fixations.get(k)) for k in sorted(images)]
    return DatasetManifest(root, split, entries)


def load_sample(entry: ManifestEntry) -> SaliencySample:
    image = decode_image(entry.image)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    sal = decode_image(entry.saliency)
    if sal.shape[0] != 1:
        sal = sal.mean(axis=0, keepdims=True)
    fix = None
    if entry.fixation is not None:
        fix = (decode_image(entry.fixation).max(axis=0, keepdims=True) > 0.5).astype(np.float32)
    return SaliencySample(image, sal, fix, entry.id)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def resize_bilinear(arr: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """(C, H, W) bilinear resize, align_corners=False."""
    h, w = arr.shape[-2:]
    if (h, w) == tuple(hw):
        return arr.copy()
    mh = interpolation_matrix(h, hw[0])
    mw = interpolation_matrix(w, hw[1])
    return (mh @ arr.astype(np.float64) @ mw.T).astype(np.float32)


def resize_nearest(arr: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    h, w = arr.shape[-2:]
    rows = np.minimum(((np.arange(hw[0]) + 0.5) * h / hw[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(hw[1]) + 0.5) * w / hw[1]).astype(int), w - 1)
    return arr[..., rows[:, None], cols[None, :]].copy()


def minmax(arr: np.ndarray) -> np.ndarray:
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        raise DegenerateInputError("saliency map is constant; cannot min-max normalise")
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def normalize_image(image, mean, std) -> np.ndarray:
    m = np.asarray(mean, np.float32).reshape(-1, 1, 1)
    s = np.asarray(std, np.float32).reshape(-1, 1, 1)
    return ((image - m) / s).astype(np.float32)


def denormalize_image(image, mean, std) -> np.ndarray:
    m = np.asarray(mean, np.float32).reshape(-1, 1, 1)
    s = np.asarray(std, np.float32).reshape(-1, 1, 1)
    return (image * s + m).astype(np.float32)


def preprocess(
    sample: SaliencySample,
    target_hw: tuple[int, int] = (288, 384),
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
    multiple: int = 32,
) -> SaliencySample:
    """Resize to ``target_hw`` and channel-normalise the image.

    The saliency map is resized bilinearly then min-max renormalised; the
    fixation map is resized nearest-neighbour so it stays binary.
    """
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th % multiple or tw % multiple:
        raise ConfigError(f"target size {th}x{tw} must be divisible by {multiple}")
    if sample.norm is not None:
        raise ValueError(f"sample {sample.id!r} is already preprocessed")
    image = np.clip(resize_bilinear(sample.image, (th, tw)), 0.0, 1.0)
    sal = minmax(resize_bilinear(sample.saliency, (th, tw)))
    fix = None if sample.fixation is None else resize_nearest(sample.fixation, (th, tw))
    return SaliencySample(
        normalize_image(image, mean, std),
        sal,
        fix,
        sample.id,
        (tuple(float(v) for v in mean), tuple(float(v) for v in std)),
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32).reshape(3, 1, 1)
_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur with a normalised kernel and reflected borders."""
    return ndimage.gaussian_filter(image, sigma=(0, sigma, sigma), mode="reflect").astype(np.float32)


def _blend(a, b, factor):
    return np.clip(b + factor * (a - b), 0.0, 1.0)


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    return _blend(img, np.full_like(img, float((img * _LUMA).sum(axis=0).mean())), factor)


def adjust_saturation(img, factor):
    gray = np.broadcast_to((img * _LUMA).sum(axis=0, keepdims=True), img.shape)
    return _blend(img, gray, factor)


def adjust_sharpness(img, factor):
    smooth = np.stack([ndimage.convolve(c, _SMOOTH, mode="nearest") for c in img])
    return _blend(img, smooth, factor)


def flip_horizontal(sample: SaliencySample) -> SaliencySample:
    return sample.replace(
        image=sample.image[..., ::-1].copy(),
        saliency=sample.saliency[..., ::-1].copy(),
        fixation=None if sample.fixation is None else sample.fixation[..., ::-1].copy(),
    )


def augment(sample: SaliencySample, cfg: AugmentConfig, seed) -> SaliencySample:
    """Random flip (image + labels), blur and photometric jitter (image only)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip = rng.random() < cfg.p_flip
    blur = rng.random() < cfg.p_blur
    sigma = rng.uniform(*cfg.blur_sigma)
    jitter = rng.random() < cfg.p_jitter
    factors = rng.uniform(-1.0, 1.0, size=4) * np.array(
        [cfg.brightness, cfg.contrast, cfg.saturation, cfg.sharpness]
    ) + 1.0

    out = flip_horizontal(sample) if flip else sample
    if not (blur or jitter):
        return out
    img = out.image if out.norm is None else denormalize_image(out.image, *out.norm)
    img = np.clip(img, 0.0, 1.0)
    if blur:
        img = np.clip(gaussian_blur(img, sigma), 0.0, 1.0)
    if jitter:
        img = adjust_brightness(img, factors[0])
        img = adjust_contrast(img, factors[1])
        img = adjust_saturation(img, factors[2])
        img = adjust_sharpness(img, factors[3])
    img = img.astype(np.float32)
    if out.norm is not None:
        img = normalize_image(img, *out.norm)
    return out.replace(image=img)


# ---------------------------------------------------------------------------
# datasets and batching
# ---------------------------------------------------------------------------

class SaliencyDataset:
    """Preprocessed samples, decoded lazily and cached in memory."""

    def __init__(self, source, target_hw=(288, 384), mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.target_hw = tuple(target_hw)
        self.mean, self.std = mean, std
        if isinstance(source, DatasetManifest):
            self.manifest = source
            self._raw: list = list(source.entries)
        else:
            self.manifest = None
            self._raw = list(source)
        self._cache: dict[int, SaliencySample] = {}

    def __len__(self) -> int:
        return len(self._raw)

    def __getitem__(self, i: int) -> SaliencySample:
        if i not in self._cache:
            item = self._raw[i]
            raw = load_sample(item) if isinstance(item, ManifestEntry) else item
            if raw.norm is not None:
                if raw.image.shape[1:] != self.target_hw:
                    raise ShapeError(f"sample {raw.id!r} is normalised at the wrong size")
                self._cache[i] = raw
            else:
                self._cache[i] = preprocess(raw, self.target_hw, self.mean, self.std)
        return self._cache[i]

    def ids(self) -> list[str]:
        return [self[i].id for i in range(len(self))]


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, H, W)
    saliency: np.ndarray  # (B, 1, H, W)
    fixations: list[np.ndarray | None]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batch_iter(
    dataset: SaliencyDataset | Sequence[SaliencySample],
    batch_size: int,
    shuffle_seed: int = 0,
    epoch: int = 0,
    augment_cfg: AugmentConfig | None = None,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield ceil(N / batch_size) batches in a (seed, epoch)-deterministic order.

    Augmentation draws from a stream keyed on (seed, epoch, sample index), so
    turning it on or off never changes which samples land in which batch.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise ManifestError("dataset is empty")
    order = epoch_order(n, shuffle_seed, epoch, shuffle)
    for start in range(0, n, batch_size):
        samples = []
        for idx in order[start : start + batch_size]:
            s = dataset[int(idx)]
            if augment_cfg is not None:
                s = augment(s, augment_cfg, np.random.default_rng([int(shuffle_seed), int(epoch), int(idx), 1]))
            samples.append(s)
        yield Batch(
            np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.saliency for s in samples]).astype(np.float32),
            [s.fixation for s in samples],
            [s.id for s in samples],
        )
