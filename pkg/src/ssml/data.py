"""Datasets, class splits, episode sampling, and the distinct-class
probability of a random draw from a class-balanced pool.

Disk layout for labeled data is one directory per class of PNG files:
``<root>/<class_name>/<image>.png``; unlabeled data is any tree of PNGs.
Pixels decode to float32 in [0, 1]; the synthetic generator quantizes to
the 8-bit grid so disk round trips are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .image import AugmentationPipeline, apply_pipeline
from .rng import SeededRng


class DataError(Exception):
    """Unusable dataset: bad layout, mixed channels, empty, or too small."""


@dataclass
class Dataset:
    images: list[np.ndarray]                    # (H, W, C) float32 each
    labels: list[int] | None                    # None once labels are erased
    class_names: list[str] | None = None        # index -> directory name
    labeled: bool = True
    class_index: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.labeled:
            if self.labels is None:
                raise DataError("labeled dataset requires labels")
            if not self.class_index:
                idx: dict[int, list[int]] = {}
                for i, c in enumerate(self.labels):
                    idx.setdefault(c, []).append(i)
                self.class_index = idx
        else:
            self.labels = None
            self.class_index = {}

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return len(self.class_index)

    @property
    def image_shape(self) -> tuple:
        return self.images[0].shape

    def erase_labels(self) -> "Dataset":
        """Forget all class information; keeps the images only."""
        return Dataset(images=list(self.images), labels=None, class_names=None, labeled=False)


def load_dataset(root_path: str | Path, labeled: bool) -> Dataset:
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root '{root}' is not a directory")
    images: list[np.ndarray] = []
    labels: list[int] = []
    names: list[str] = []
    if labeled:
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not class_dirs:
            raise DataError(f"no class directories under '{root}'")
        for ci, cdir in enumerate(class_dirs):
            names.append(cdir.name)
            files = sorted(cdir.glob("*.png"))
            if not files:
                raise DataError(f"class directory '{cdir}' has no PNG files")
            for fp in files:
                images.append(_decode_png(fp))
                labels.append(ci)
    else:
        files = sorted(root.rglob("*.png"))
        for fp in files:
            images.append(_decode_png(fp))
    if not images:
        raise DataError(f"no images found under '{root}'")
    channels = {im.shape[2] for im in images}
    if len(channels) != 1:
        raise DataError(f"mixed channel counts in dataset: {sorted(channels)}")
    if labeled:
        return Dataset(images=images, labels=labels, class_names=names)
    return Dataset(images=images, labels=None, labeled=False)


def _decode_png(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float32)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as e:
        raise DataError(f"unreadable image '{path}': {e}") from e
    return arr / 255.0


def export_dataset(ds: Dataset, root_path: str | Path) -> None:
    """Write a labeled dataset in the <root>/<class>/<i>.png layout."""
    if not ds.labeled:
        raise DataError("can only export labeled datasets")
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for c, idxs in sorted(ds.class_index.items()):
        name = ds.class_names[c] if ds.class_names else f"class_{c:04d}"
        cdir = root / name
        cdir.mkdir(exist_ok=True)
        for j, i in enumerate(idxs):
            img = ds.images[i]
            arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            if arr.shape[2] == 1:
                pil = PILImage.fromarray(arr[:, :, 0], mode="L")
            else:
                pil = PILImage.fromarray(arr, mode="RGB")
            pil.save(cdir / f"{j:05d}.png")


def split_classes(ds: Dataset, n_train: int, n_val: int, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint class partition into train/val/test, deterministic under seed."""
    if not ds.labeled:
        raise DataError("split_classes requires a labeled dataset")
    classes = sorted(ds.class_index)
    if n_train + n_val >= len(classes):
        raise DataError(
            f"cannot split {len(classes)} classes into {n_train} train + {n_val} val + >=1 test")
    order = SeededRng(seed).split("class_split").permutation(len(classes))
    shuffled = [classes[i] for i in order]
    parts = (shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])
    return tuple(_take_classes(ds, part) for part in parts)


def _take_classes(ds: Dataset, classes: list[int]) -> Dataset:
    images, labels = [], []
    names = []
    for new_c, c in enumerate(sorted(classes)):
        names.append(ds.class_names[c] if ds.class_names else f"class_{c:04d}")
        for i in ds.class_index[c]:
            images.append(ds.images[i])
            labels.append(new_c)
    return Dataset(images=images, labels=labels, class_names=names)


def subset_labels(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep round(fraction * m) samples per class, without replacement."""
    if not ds.labeled:
        raise DataError("subset_labels requires a labeled dataset")
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction {fraction} outside (0, 1]")
    rng = SeededRng(seed).split("subset_labels")
    images, labels = [], []
    for c in sorted(ds.class_index):
        idxs = ds.class_index[c]
        m = len(idxs)
        keep = int(np.floor(fraction * m + 0.5))  # round half away from zero
        if keep < 1:
            raise DataError(f"fraction {fraction} keeps no samples for class {c}")
        chosen = rng.split(c).choice_without_replacement(m, keep)
        for j in sorted(chosen):
            images.append(ds.images[idxs[j]])
            labels.append(c)
    return Dataset(images=images, labels=labels, class_names=ds.class_names)


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    q_queries: int
    mode: str  # "supervised" | "unsupervised"

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.q_queries < 1:
            raise ValueError(f"invalid episode spec {self}")
        if self.mode not in ("supervised", "unsupervised"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.mode == "unsupervised" and self.k_shot != 1:
            raise ValueError("unsupervised episodes are 1-shot by construction")


@dataclass
class Episode:
    """One few-shot task: support/query image stacks with one-hot labels."""

    support_images: np.ndarray   # [n_way*k_shot, H, W, C]
    support_labels: np.ndarray   # [n_way*k_shot, n_way] one-hot
    query_images: np.ndarray     # [n_way*q_queries, H, W, C]
    query_labels: np.ndarray     # [n_way*q_queries, n_way] one-hot
    provenance: str              # "true_labels" | "pseudo_labels"

    @property
    def n_way(self) -> int:
        return self.support_labels.shape[1]


def _one_hot(slot: int, n: int) -> np.ndarray:
    v = np.zeros(n, dtype=np.float32)
    v[slot] = 1.0
    return v


def sample_supervised_episode(ds: Dataset, spec: EpisodeSpec, rng: SeededRng) -> Episode:
    """n_way uniformly drawn classes, k_shot support + q_queries query per
    class without replacement; slot order is the random class draw order."""
    if not ds.labeled:
        raise DataError("supervised episodes need a labeled dataset")
    classes = sorted(ds.class_index)
    if len(classes) < spec.n_way:
        raise DataError(f"need {spec.n_way} classes, dataset has {len(classes)}")
    need = spec.k_shot + spec.q_queries
    chosen = rng.choice_without_replacement(len(classes), spec.n_way)
    sup_im, sup_y, qry_im, qry_y = [], [], [], []
    for slot, ci in enumerate(chosen):
        idxs = ds.class_index[classes[int(ci)]]
        if len(idxs) < need:
            raise DataError(f"class {classes[int(ci)]} has {len(idxs)} samples, episode needs {need}")
        picks = rng.choice_without_replacement(len(idxs), need)
        for j in picks[:spec.k_shot]:
            sup_im.append(ds.images[idxs[int(j)]])
            sup_y.append(_one_hot(slot, spec.n_way))
        for j in picks[spec.k_shot:]:
            qry_im.append(ds.images[idxs[int(j)]])
            qry_y.append(_one_hot(slot, spec.n_way))
    return Episode(
        support_images=np.stack(sup_im), support_labels=np.stack(sup_y),
        query_images=np.stack(qry_im), query_labels=np.stack(qry_y),
        provenance="true_labels")


def sample_unsupervised_episode(
    pool: Dataset, spec: EpisodeSpec, pipeline: AugmentationPipeline, rng: SeededRng
) -> Episode:
    """Pseudo-labeled episode: n_way pool samples become the 1-shot support
    with labels 0..n_way-1; queries are augmentations of their support image."""
    if spec.mode != "unsupervised":
        raise ValueError("spec.mode must be 'unsupervised'")
    if len(pool) < spec.n_way:
        raise DataError(f"pool of {len(pool)} images cannot seed a {spec.n_way}-way episode")
    chosen = rng.choice_without_replacement(len(pool), spec.n_way)
    sup_im = [pool.images[int(i)] for i in chosen]
    sup_y = [_one_hot(slot, spec.n_way) for slot in range(spec.n_way)]
    qry_im, qry_y = [], []
    for slot in range(spec.n_way):
        for _ in range(spec.q_queries):
            qry_im.append(apply_pipeline(sup_im[slot], pipeline, rng))
            qry_y.append(_one_hot(slot, spec.n_way))
    return Episode(
        support_images=np.stack(sup_im), support_labels=np.stack(sup_y),
        query_images=np.stack(qry_im), query_labels=np.stack(qry_y),
        provenance="pseudo_labels")


# ---------------------------------------------------------------------------
# distinct-class probability of an n-sample draw from c classes x m samples


def distinct_class_probability(c: int, m: int, n: int) -> float:
    """Exact probability that n draws without replacement from a pool of
    c classes with m samples each all hit distinct classes.

    Product form: prod_{i=1}^{n-1} ((c - i) * m) / (c * m - i).
    """
    if n > c:
        raise ValueError(f"cannot draw {n} distinct classes from {c}")
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    log_p = 0.0
    for i in range(1, n):
        log_p += np.log((c - i) * m) - np.log(c * m - i)
    return float(np.exp(log_p))


def monte_carlo_distinct_estimate(c: int, m: int, n: int, trials: int, seed: int) -> float:
    """Fraction of seeded trials whose n-sample draw hits n distinct classes."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    pool = c * m
    if n > pool:
        raise ValueError(f"cannot draw {n} from a pool of {pool}")
    rng = SeededRng(seed).split("mc_distinct")
    # draw with replacement, then redraw any trial containing a duplicate
    # sample index: conditioning on all-distinct equals drawing without
    # replacement, and duplicates are rare for pool >> n.
    draws = rng.integers(0, pool, size=(trials, n))
    while True:
        srt = np.sort(draws, axis=1)
        dup = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
        if not dup.any():
            break
        draws[dup] = rng.integers(0, pool, size=(int(dup.sum()), n))
    cls = np.sort(draws // m, axis=1)
    distinct = ~(cls[:, 1:] == cls[:, :-1]).any(axis=1)
    return float(distinct.mean())


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_dataset(
    n_classes: int, m_per_class: int, h: int, w: int, channels: int, seed: int
) -> Dataset:
    """Procedural classes over a shared background texture: each class owns
    a pattern (gaussian blobs on an oriented grating, per-channel weights)
    blended onto a background common to the whole dataset, and every sample
    adds shift/brightness/pixel noise. The shared background plus noise make
    the classes non-trivial to separate while staying learnable. Pixels land
    on the 8-bit grid so PNG round trips are exact."""
    if min(n_classes, m_per_class, h, w, channels) < 1:
        raise ValueError("all synthetic dataset dims must be positive")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    root = SeededRng(seed).split("synthetic")
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    brng = root.split("background")
    bg = np.zeros((h, w))
    for _ in range(4):
        theta = brng.uniform(0, np.pi)
        freq = brng.uniform(2.0, 5.0)
        phase = brng.uniform(0, 2 * np.pi)
        bg += 0.25 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    bg = 0.45 + 0.20 * bg / (np.abs(bg).max() + 1e-9)
    images, labels = [], []
    for c in range(n_classes):
        crng = root.split("class", c)
        theta = crng.uniform(0, np.pi)
        freq = crng.uniform(2.0, 6.0)
        phase = crng.uniform(0, 2 * np.pi)
        grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        blobs = np.zeros((h, w))
        for _ in range(3):
            by, bx = crng.uniform(0.15, 0.85, size=2)
            bs = crng.uniform(0.05, 0.18)
            amp = crng.uniform(0.6, 1.0)
            blobs += amp * np.exp(-(((yy - by) ** 2 + (xx - bx) ** 2) / (2 * bs * bs)))
        signal = 0.4 * grating + 0.55 * np.clip(blobs, 0, 1)
        weights = crng.uniform(0.5, 1.0, size=channels)
        base = np.clip(bg[:, :, None] * 0.5 + signal[:, :, None] * weights[None, None, :], 0, 1)
        for s in range(m_per_class):
            srng = root.split("sample", c, s)
            dy, dx = srng.integers(-2, 3, size=2)
            img = np.roll(base, (int(dy), int(dx)), axis=(0, 1))
            img = img * srng.uniform(0.85, 1.15) + srng.normal(0, 0.06, size=img.shape)
            img = np.clip(img, 0, 1)
            img = np.round(img * 255.0) / 255.0
            images.append(img.astype(np.float32))
            labels.append(c)
    return Dataset(images=images, labels=labels,
                   class_names=[f"class_{i:04d}" for i in range(n_classes)])
