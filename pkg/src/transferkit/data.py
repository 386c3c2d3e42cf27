"""Directory discovery, task inference, class weights, augmentation and batching.

Expected layout::

    train_val_data/{train, val | validation}/<class>/<image>
    test_data_folder/<class>/<image>
    external_test_data_folder/<class>/<image>     (optional)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError, LayoutError, TaskError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
TRAIN_DIR_NAMES = ("train",)
VAL_DIR_NAMES = ("val", "validation")
SPLITS = ("train", "val", "test", "external_test")


def is_image_file(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS


def list_images(folder: Path) -> list[Path]:
    """Image files directly inside ``folder`` in lexicographic order."""
    return sorted((p for p in Path(folder).iterdir() if is_image_file(p)), key=lambda p: p.name)


@dataclass(frozen=True)
class SplitLayout:
    train_dir: Path
    val_dir: Path
    test_dir: Path
    external_test_dir: Path | None
    class_names: tuple[str, ...]
    per_split_counts: dict[str, dict[str, int]]

    def split_dirs(self) -> dict[str, Path]:
        dirs = {"train": self.train_dir, "val": self.val_dir, "test": self.test_dir}
        if self.external_test_dir is not None:
            dirs["external_test"] = self.external_test_dir
        return dirs


def _find_subdir(root: Path, names: Sequence[str]) -> Path | None:
    for name in names:
        candidate = root / name
        if candidate.is_dir():
            return candidate
    return None


def _count_classes(split_dir: Path, split: str, allow_empty: bool = False) -> dict[str, int]:
    counts = {}
    for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        n = len(list_images(class_dir))
        if n == 0 and not allow_empty:
            raise LayoutError(f"class folder {class_dir} in the {split} split contains no images")
        counts[class_dir.name] = n
    if not counts:
        raise LayoutError(f"{split} directory {split_dir} has no class subdirectories")
    return counts


def discover_splits(
    train_val_root: str | Path,
    test_root: str | Path,
    external_root: str | Path | None = None,
) -> SplitLayout:
    """Locate the split folders and count images per class.

    Raises:
        LayoutError: missing split folder, empty class folder, train/val class
            mismatch, or a test class that never appears in training.
    """
    train_val_root = Path(train_val_root)
    if not train_val_root.is_dir():
        raise LayoutError(f"train/val directory {train_val_root} does not exist")
    train_dir = _find_subdir(train_val_root, TRAIN_DIR_NAMES)
    val_dir = _find_subdir(train_val_root, VAL_DIR_NAMES)
    if train_dir is None or val_dir is None:
        missing = "train" if train_dir is None else "val (or validation)"
        raise LayoutError(
            f"{train_val_root} has no {missing} subdirectory; expected "
            "train_val_data/{train,val|validation}/<class>/<image>"
        )
    test_dir = Path(test_root)
    if not test_dir.is_dir():
        raise LayoutError(f"test directory {test_dir} does not exist; expected test_data_folder/<class>/<image>")
    external_dir = None
    if external_root is not None:
        external_dir = Path(external_root)
        if not external_dir.is_dir():
            raise LayoutError(f"external test directory {external_dir} does not exist")

    counts = {"train": _count_classes(train_dir, "train"), "val": _count_classes(val_dir, "val")}
    train_classes, val_classes = set(counts["train"]), set(counts["val"])
    if train_classes != val_classes:
        only_train = sorted(train_classes - val_classes)
        only_val = sorted(val_classes - train_classes)
        raise LayoutError(
            f"class mismatch between train and val: only in train {only_train}, only in val {only_val}"
        )
    others = {"test": test_dir}
    if external_dir is not None:
        others["external_test"] = external_dir
    for split, folder in others.items():
        split_counts = _count_classes(folder, split, allow_empty=True)
        novel = sorted(set(split_counts) - train_classes)
        if novel:
            raise LayoutError(f"{split} split introduces classes unseen in training: {novel}")
        if sum(split_counts.values()) == 0:
            raise LayoutError(f"{split} split {folder} contains no images")
        counts[split] = split_counts

    return SplitLayout(
        train_dir=train_dir,
        val_dir=val_dir,
        test_dir=test_dir,
        external_test_dir=external_dir,
        class_names=tuple(sorted(train_classes)),
        per_split_counts=counts,
    )


@dataclass(frozen=True)
class TaskSpec:
    num_classes: int
    mode: str
    output_units: int
    output_activation: str
    loss_name: str
    class_index: dict[str, int]

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.class_index, key=self.class_index.__getitem__))


def infer_task(layout: SplitLayout | Sequence[str]) -> TaskSpec:
    """Derive output width, activation and loss from the class list."""
    names = layout.class_names if isinstance(layout, SplitLayout) else layout
    names = sorted(set(names))
    k = len(names)
    if k < 2:
        raise TaskError(f"classification needs at least 2 classes, found {k}: {names}")
    class_index = {name: i for i, name in enumerate(names)}
    if k == 2:
        return TaskSpec(k, "binary", 1, "sigmoid", "binary_crossentropy", class_index)
    return TaskSpec(k, "multiclass", k, "softmax", "categorical_crossentropy", class_index)


def compute_class_weights(counts: Mapping[str, int]) -> dict[str, float]:
    """Balanced weights ``N / (K * n_c)``."""
    for name, n in counts.items():
        if n < 1:
            raise DataError(f"class {name!r} has count {n}; class weights need every count >= 1")
    if not counts:
        raise DataError("class weights need at least one class")
    total = sum(counts.values())
    k = len(counts)
    return {name: float(Fraction(total, k * n)) for name, n in counts.items()}


# --- augmentation ---------------------------------------------------------

BASIC_AUGMENTATION = {
    "horizontal_flip_p": 0.5,
    "rotation_degrees": 15.0,
    "width_shift": 0.1,
    "height_shift": 0.1,
    "zoom": 0.1,
}


def random_affine(image: np.ndarray, rng: np.random.Generator, params: Mapping[str, float]) -> np.ndarray:
    """Flip/rotate/shift/zoom one HxWx3 image about its centre, edge pixels repeated."""
    h, w = image.shape[:2]
    if rng.random() < params["horizontal_flip_p"]:
        image = image[:, ::-1]
    angle = np.deg2rad(rng.uniform(-params["rotation_degrees"], params["rotation_degrees"]))
    ty = rng.uniform(-params["height_shift"], params["height_shift"]) * h
    tx = rng.uniform(-params["width_shift"], params["width_shift"]) * w
    scale = rng.uniform(1 - params["zoom"], 1 + params["zoom"])
    # output coord -> input coord: in = R^-1 (out - c - t) / scale + c
    cos, sin = np.cos(angle), np.sin(angle)
    inv = np.array([[cos, sin], [-sin, cos]]) / scale
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - inv @ (centre + np.array([ty, tx]))
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.affine_transform(image[..., c], inv, offset=offset, order=1, mode="nearest")
    return out


@dataclass(frozen=True)
class AugmentationPlan:
    """Per-image transforms applied to resized float images before preprocessing."""

    mode: str
    hooks: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
    params: dict = field(default_factory=dict)

    @property
    def is_identity(self) -> bool:
        return self.mode == "none"

    def apply(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Transform an (n, h, w, 3) float batch; returns a new array."""
        if self.mode == "none":
            return batch.copy()
        out = np.empty_like(batch)
        for i, image in enumerate(batch):
            if self.mode == "basic":
                image = random_affine(image, rng, self.params)
            else:
                for hook in self.hooks:
                    image = np.asarray(hook(image), dtype=batch.dtype)
            if image.shape != batch.shape[1:]:
                raise DataError(f"augmentation changed image shape from {batch.shape[1:]} to {image.shape}")
            out[i] = image
        return out


def resolve_augmentation(mode: str, custom_hooks: Sequence[Callable] = ()) -> AugmentationPlan:
    if mode == "none":
        return AugmentationPlan("none")
    if mode == "basic":
        return AugmentationPlan("basic", params=dict(BASIC_AUGMENTATION))
    if mode == "custom":
        hooks = tuple(custom_hooks)
        if not hooks:
            raise DataError("augmentation='custom' requires at least one image transform")
        return AugmentationPlan("custom", hooks=hooks)
    raise DataError(f"unknown augmentation mode {mode!r}; expected none, basic or custom")


# --- image loading and batching ------------------------------------------


def load_image(path: str | Path, image_size: tuple[int, int]) -> np.ndarray:
    """Decode to RGB and resize bilinearly to (height, width); returns uint8 HxWx3."""
    h, w = image_size
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (w, h):
                img = img.resize((w, h), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


@dataclass
class DatasetBundle:
    """Batched access to every split with a stable per-split file index.

    ``index[split]`` lists ``(path, label_id)`` sorted by class then file
    name. Only ``batches("train", ...)`` shuffles or augments.
    """

    task: TaskSpec
    index: dict[str, list[tuple[Path, int]]]
    image_size: tuple[int, int]
    batch_size: int
    seed: int
    preprocess: Callable[[torch.Tensor], torch.Tensor]
    plan: AugmentationPlan
    train_counts: dict[str, int] = field(default_factory=dict)
    cache_images: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def splits(self) -> list[str]:
        return [s for s in SPLITS if s in self.index]

    def __len__(self) -> int:
        return sum(len(v) for v in self.index.values())

    def num_batches(self, split: str) -> int:
        return math.ceil(len(self.index[split]) / self.batch_size)

    def labels(self, split: str) -> np.ndarray:
        return np.array([label for _, label in self.index[split]], dtype=np.int64)

    def paths(self, split: str) -> list[Path]:
        return [path for path, _ in self.index[split]]

    def _raw(self, path: Path) -> np.ndarray:
        if not self.cache_images:
            return load_image(path, self.image_size)
        img = self._cache.get(path)
        if img is None:
            img = self._cache[path] = load_image(path, self.image_size)
        return img

    def encode_labels(self, ids: np.ndarray) -> torch.Tensor:
        if self.task.mode == "binary":
            return torch.as_tensor(ids, dtype=torch.float32)
        return torch.nn.functional.one_hot(torch.as_tensor(ids), self.task.num_classes).float()

    def order(self, split: str, epoch: int = 0, shuffle: bool | None = None) -> np.ndarray:
        """Row order used for ``split`` in ``epoch``."""
        n = len(self.index[split])
        if shuffle is None:
            shuffle = split == "train"
        if not shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def batches(
        self,
        split: str,
        epoch: int = 0,
        augment: bool | None = None,
        shuffle: bool | None = None,
    ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """Yield ``(images NHWC float32, labels)``.

        Defaults: train is shuffled per epoch and augmented; other splits keep
        index order and are never augmented.
        """
        if split not in self.index:
            raise DataError(f"split {split!r} is not available; have {self.splits}")
        is_train = split == "train"
        augment = is_train if augment is None else (augment and is_train)
        order = self.order(split, epoch, shuffle)
        rng = np.random.default_rng([self.seed, epoch, 1])
        entries = self.index[split]
        for start in range(0, len(order), self.batch_size):
            rows = order[start : start + self.batch_size]
            images = np.stack([self._raw(entries[r][0]) for r in rows]).astype(np.float32)
            if augment and not self.plan.is_identity:
                images = self.plan.apply(images, rng)
            ids = np.array([entries[r][1] for r in rows], dtype=np.int64)
            yield self.preprocess(torch.from_numpy(np.ascontiguousarray(images))), self.encode_labels(ids)


def build_index(layout: SplitLayout, task: TaskSpec) -> dict[str, list[tuple[Path, int]]]:
    index = {}
    for split, folder in layout.split_dirs().items():
        entries = []
        for name in task.class_names:
            class_dir = folder / name
            if class_dir.is_dir():
                entries.extend((p, task.class_index[name]) for p in list_images(class_dir))
        index[split] = entries
    return index


def build_bundle(
    layout: SplitLayout,
    task: TaskSpec,
    image_size: tuple[int, int],
    preprocess: Callable[[torch.Tensor], torch.Tensor],
    plan: AugmentationPlan,
    batch_size: int,
    seed: int,
    cache_images: bool = True,
) -> DatasetBundle:
    """Index every split and check that its images decode.

    Raises:
        DataError: an empty split, non-positive sizes, or an undecodable file.
    """
    if len(image_size) != 2 or min(image_size) < 1:
        raise DataError(f"image_size must be two positive integers, got {image_size}")
    if batch_size < 1:
        raise DataError(f"batch_size must be positive, got {batch_size}")
    index = build_index(layout, task)
    for split, entries in index.items():
        if not entries:
            raise DataError(f"split {split!r} has no images")
    bundle = DatasetBundle(
        task=task,
        index=index,
        image_size=tuple(image_size),
        batch_size=batch_size,
        seed=seed,
        preprocess=preprocess,
        plan=plan,
        train_counts=dict(layout.per_split_counts["train"]),
        cache_images=cache_images,
    )
    # decode everything once so a corrupt file fails here, not mid-epoch
    for entries in index.values():
        for path, _ in entries:
            bundle._raw(path)
    logger.info("indexed %s", {s: len(v) for s, v in index.items()})
    return bundle
