"""Deterministic synthetic 2-D segmentation data.

Scenes are 64x64 single-channel images with 1-3 bright ellipses on a darker
textured background; the texture is a spatially smoothed Gaussian field so
local intensity alone does not decide the class.  Labeled/unlabeled splits,
shuffling and augmentation are all reproducible from their seeds, with the
labeled and unlabeled streams drawing from independent generators so a
labeled-only consumer is unaffected by the unlabeled pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

IMAGE_SIZE = 64


@dataclass(frozen=True)
class SceneSpec:
    """Scene family: bright ellipses on a darker textured background.

    Per-image foreground/background levels are jittered around their means
    so the appearance manifold is wider than a small labeled set can cover;
    ``min_contrast`` keeps every image solvable.  The background texture
    includes bright bar-shaped streaks at foreground-like intensity, so pixel
    brightness alone cannot decide the class: the segmenter has to learn the
    blob-versus-streak shape distinction, which a handful of labeled images
    under-determines.
    """

    size: int = IMAGE_SIZE
    min_shapes: int = 1
    max_shapes: int = 3
    fg_mean: float = 0.7
    bg_mean: float = 0.3
    fg_jitter: float = 0.15
    bg_jitter: float = 0.15
    min_contrast: float = 0.15
    texture_sigma: float = 0.1
    texture_smooth: float = 1.5
    margin: int = 4
    min_axis: float = 3.0
    max_axis: float = 11.0
    max_bars: int = 2
    bar_halfwidth: tuple[float, float] = (0.8, 1.8)
    bar_halflength: tuple[float, float] = (7.0, 18.0)


@dataclass
class Dataset:
    labeled: list[tuple[np.ndarray, np.ndarray]]
    unlabeled: list[np.ndarray]
    test: list[tuple[np.ndarray, np.ndarray]]
    seed: int


class ConfigurationError(ValueError):
    pass


def _texture(rng: np.random.Generator, size: int, sigma: float, smooth: float) -> np.ndarray:
    """Spatially smoothed Gaussian field with pointwise std ~= sigma."""
    raw = rng.normal(0.0, 1.0, size=(size, size))
    field = ndimage.gaussian_filter(raw, sigma=smooth, mode="reflect")
    std = field.std()
    if std > 0:
        field *= sigma / std
    return field


def _bar_region(rng: np.random.Generator, spec: SceneSpec,
                xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    """Rotated bright streak (capsule shape), part of the background."""
    size = spec.size
    half_w = rng.uniform(*spec.bar_halfwidth)
    half_l = rng.uniform(*spec.bar_halflength)
    phi = rng.uniform(0.0, np.pi)
    lo, hi = spec.margin + 2.0, size - 1 - spec.margin - 2.0
    cx = rng.uniform(lo, hi)
    cy = rng.uniform(lo, hi)
    dx, dy = xx - cx, yy - cy
    along = dx * np.cos(phi) + dy * np.sin(phi)
    across = -dx * np.sin(phi) + dy * np.cos(phi)
    return (np.abs(along) <= half_l) & (np.abs(across) <= half_w)


def _render_scene(rng: np.random.Generator, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n_shapes):
        a = rng.uniform(spec.min_axis, spec.max_axis)
        b = rng.uniform(spec.min_axis, spec.max_axis)
        phi = rng.uniform(0.0, np.pi)
        r = max(a, b)
        lo, hi = spec.margin + r, size - 1 - spec.margin - r
        cx = rng.uniform(lo, hi)
        cy = rng.uniform(lo, hi)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    fg = spec.fg_mean + rng.uniform(-spec.fg_jitter, spec.fg_jitter)
    bg = spec.bg_mean + rng.uniform(-spec.bg_jitter, spec.bg_jitter)
    if fg - bg < spec.min_contrast:
        mid = (fg + bg) / 2.0
        fg, bg = mid + spec.min_contrast / 2.0, mid - spec.min_contrast / 2.0
    img = np.full((size, size), bg)
    n_bars = int(rng.integers(0, spec.max_bars + 1))
    for _ in range(n_bars):
        img[_bar_region(rng, spec, xx, yy)] = fg + rng.uniform(-0.05, 0.05)
    img[mask] = fg
    img = img + _texture(rng, size, spec.texture_sigma, spec.texture_smooth)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, mask


def generate_dataset(seed: int, n_train: int, n_test: int, labeled_fraction: float,
                     spec: SceneSpec = SceneSpec()) -> Dataset:
    """Deterministic dataset with a labeled/unlabeled train split.

    The labeled count is round(labeled_fraction * n_train); the test set is
    fully labeled.  Every generated mask is non-empty by construction.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise ConfigurationError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    n_labeled = int(round(labeled_fraction * n_train))
    if n_labeled == 0:
        raise ConfigurationError(
            f"labeled_fraction {labeled_fraction} rounds to zero labeled items for n_train={n_train}")
    rng = np.random.Generator(np.random.PCG64(seed))
    train = [_render_scene(rng, spec) for _ in range(n_train)]
    test = [_render_scene(rng, spec) for _ in range(n_test)]
    order = rng.permutation(n_train)
    labeled = [train[i] for i in order[:n_labeled]]
    unlabeled = [train[i][0] for i in order[n_labeled:]]
    return Dataset(labeled=labeled, unlabeled=unlabeled, test=test, seed=seed)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugTransform:
    """The geometric part of one augmentation draw.

    Needed to transport masks and probability maps between a view's geometry
    and the clean image's geometry (pixelwise losses only make sense on a
    common grid).
    """

    flip_h: bool = False
    flip_v: bool = False
    rot: int = 0

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        out = mask
        if self.flip_h:
            out = out[..., :, ::-1]
        if self.flip_v:
            out = out[..., ::-1, :]
        if self.rot:
            out = np.rot90(out, self.rot, axes=(-2, -1))
        return np.ascontiguousarray(out)

    def invert_mask(self, mask: np.ndarray) -> np.ndarray:
        out = np.rot90(mask, -self.rot, axes=(-2, -1)) if self.rot else mask
        if self.flip_v:
            out = out[..., ::-1, :]
        if self.flip_h:
            out = out[..., :, ::-1]
        return np.ascontiguousarray(out)

    def apply_probs(self, probs: np.ndarray) -> np.ndarray:
        """Same geometry change on a (B, C, H, W) probability map."""
        return self.apply_mask(probs)

    def invert_probs(self, probs: np.ndarray) -> np.ndarray:
        return self.invert_mask(probs)


def augment_tracked(image: np.ndarray, mask: Optional[np.ndarray],
                    rng: np.random.Generator
                    ) -> tuple[np.ndarray, Optional[np.ndarray], AugTransform]:
    """One random perturbation: flips, right-angle rotation, noise, intensity.

    Geometric draws apply identically to the mask; photometric ones touch the
    image only.  Output is clamped to [0, 1].  Draw order is fixed so a given
    generator state always produces the same view.  The returned transform
    records the geometric part.
    """
    transform = AugTransform(flip_h=rng.random() < 0.5, flip_v=rng.random() < 0.5,
                             rot=int(rng.integers(0, 4)))
    img = transform.apply_mask(image)
    out_mask = transform.apply_mask(mask) if mask is not None else None
    noise = rng.normal(0.0, 0.05, size=img.shape)
    scale = rng.uniform(0.9, 1.1)
    img = np.clip(img.astype(np.float64) * scale + noise, 0.0, 1.0).astype(np.float32)
    return img, out_mask, transform


def augment(image: np.ndarray, mask: Optional[np.ndarray],
            rng: np.random.Generator) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Like :func:`augment_tracked` without the transform record."""
    img, out_mask, _ = augment_tracked(image, mask, rng)
    return img, out_mask


# ---------------------------------------------------------------------------
# batch streaming


@dataclass
class LabeledItem:
    image: np.ndarray
    mask: np.ndarray
    view_s1: np.ndarray
    mask_s1: np.ndarray
    view_s2: np.ndarray
    mask_s2: np.ndarray
    tf_s1: AugTransform = AugTransform()
    tf_s2: AugTransform = AugTransform()


@dataclass
class UnlabeledItem:
    image: np.ndarray
    view_s1: np.ndarray
    view_s2: np.ndarray
    tf_s1: AugTransform = AugTransform()
    tf_s2: AugTransform = AugTransform()


@dataclass
class SegBatch:
    labeled: list[LabeledItem] = field(default_factory=list)
    unlabeled: list[UnlabeledItem] = field(default_factory=list)

    def stack_views(self, student: int) -> np.ndarray:
        """(n, 1, H, W) stack of that student's views, labeled first."""
        views = [(it.view_s1 if student == 1 else it.view_s2) for it in self.labeled]
        views += [(it.view_s1 if student == 1 else it.view_s2) for it in self.unlabeled]
        return np.stack(views)[:, None, :, :]

    def labeled_masks(self, student: int) -> np.ndarray:
        return np.stack([(it.mask_s1 if student == 1 else it.mask_s2) for it in self.labeled])

    def unlabeled_transforms(self, student: int) -> list[AugTransform]:
        return [(it.tf_s1 if student == 1 else it.tf_s2) for it in self.unlabeled]

    def clean_unlabeled(self) -> np.ndarray:
        return np.stack([it.image for it in self.unlabeled])[:, None, :, :]


class _EpochStream:
    """Without-replacement index stream; reshuffles each epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._queue: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self._queue:
                self._queue = list(self.rng.permutation(self.n))
            out.append(self._queue.pop(0))
        return out


class BatchSampler:
    """Draws SegBatches deterministically from the run seed.

    Labeled and unlabeled items use independent generator streams (sampling
    and augmentation alike), so dropping the unlabeled pool leaves the
    labeled stream bit-identical.
    """

    def __init__(self, dataset: Dataset, batch_labeled: int, batch_unlabeled: int, seed: int):
        if batch_labeled < 1:
            raise ConfigurationError("batch needs at least one labeled item")
        if batch_labeled > len(dataset.labeled):
            raise ConfigurationError(
                f"batch demands {batch_labeled} labeled items but pool has {len(dataset.labeled)}")
        if batch_unlabeled > 0 and batch_unlabeled > len(dataset.unlabeled):
            raise ConfigurationError(
                f"batch demands {batch_unlabeled} unlabeled items but pool has {len(dataset.unlabeled)}")
        self.dataset = dataset
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        ss = np.random.SeedSequence(entropy=(seed, 0xBA7C4))
        kids = ss.spawn(2)
        self._rng_labeled = np.random.Generator(np.random.PCG64(kids[0]))
        self._rng_unlabeled = np.random.Generator(np.random.PCG64(kids[1]))
        self._labeled_stream = _EpochStream(len(dataset.labeled), self._rng_labeled)
        self._unlabeled_stream = (_EpochStream(len(dataset.unlabeled), self._rng_unlabeled)
                                  if dataset.unlabeled else None)

    def next_batch(self) -> SegBatch:
        batch = SegBatch()
        for idx in self._labeled_stream.take(self.batch_labeled):
            img, mask = self.dataset.labeled[idx]
            v1, m1, t1 = augment_tracked(img, mask, self._rng_labeled)
            v2, m2, t2 = augment_tracked(img, mask, self._rng_labeled)
            batch.labeled.append(LabeledItem(img, mask, v1, m1, v2, m2, t1, t2))
        if self.batch_unlabeled > 0 and self._unlabeled_stream is not None:
            for idx in self._unlabeled_stream.take(self.batch_unlabeled):
                img = self.dataset.unlabeled[idx]
                v1, _, t1 = augment_tracked(img, None, self._rng_unlabeled)
                v2, _, t2 = augment_tracked(img, None, self._rng_unlabeled)
                batch.unlabeled.append(UnlabeledItem(img, v1, v2, t1, t2))
        return batch


# ---------------------------------------------------------------------------
# PGM export


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255); boolean masks map to {0, 255}."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        data = np.where(arr, 255, 0).astype(np.uint8)
    else:
        data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def export_dataset(dataset: Dataset, out_dir) -> int:
    """Dump all images and masks as PGM files; returns the file count."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, (img, mask) in enumerate(dataset.labeled):
        write_pgm(out / f"train_labeled_{i:04d}.pgm", img)
        write_pgm(out / f"train_labeled_{i:04d}_mask.pgm", mask)
        count += 2
    for i, img in enumerate(dataset.unlabeled):
        write_pgm(out / f"train_unlabeled_{i:04d}.pgm", img)
        count += 1
    for i, (img, mask) in enumerate(dataset.test):
        write_pgm(out / f"test_{i:04d}.pgm", img)
        write_pgm(out / f"test_{i:04d}_mask.pgm", mask)
        count += 2
    return count
