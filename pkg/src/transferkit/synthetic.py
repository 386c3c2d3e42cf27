"""Tiny generated image datasets in the expected directory layout."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 60, 220),
    "yellow": (230, 220, 40),
    "magenta": (210, 40, 210),
}


def _image(color, striped: bool, size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = color
    if striped:
        period = int(rng.integers(4, 9))
        rows = (np.arange(size) // (period // 2)) % 2 == 1
        img[rows] *= 0.45
    img += rng.normal(0, 12, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_dataset(
    root: str | Path,
    classes=("blue", "green", "red"),
    counts=(20, 5, 5),
    size: int = 32,
    seed: int = 0,
    external: int = 0,
) -> dict[str, Path]:
    """Write solid or striped colour images, one colour per class.

    ``counts`` gives images per class for train, val and test; ``external``
    adds an external test folder with that many images per class.

    Returns:
        Paths for ``train_val_data``, ``test_data_folder`` and, when
        requested, ``external_test_data_folder``.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    splits = {
        "train": root / "train_val" / "train",
        "val": root / "train_val" / "val",
        "test": root / "test",
    }
    n_per = dict(zip(("train", "val", "test"), counts))
    if external:
        splits["external"] = root / "external"
        n_per["external"] = external
    for split, folder in splits.items():
        for name in classes:
            class_dir = folder / name
            class_dir.mkdir(parents=True, exist_ok=True)
            for i in range(n_per[split]):
                img = _image(PALETTE[name], bool(i % 2), size, rng)
                Image.fromarray(img).save(class_dir / f"{name}_{i:03d}.png")
    paths = {"train_val_data": root / "train_val", "test_data_folder": root / "test"}
    if external:
        paths["external_test_data_folder"] = root / "external"
    return paths
