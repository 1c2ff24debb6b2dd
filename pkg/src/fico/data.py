"""PNG image IO and dataset directory indexing.

Datasets follow the industrial-inspection layout:

    root/<category>/train/good/*.png
    root/<category>/test/good/*.png
    root/<category>/test/<defect>/*.png
    root/<category>/ground_truth/<defect>/*_mask.png

Images are RGB PNGs; in memory they are float32 (3, H, W) arrays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from fico.errors import DatasetLayoutError


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG into a float32 (3, H, W) array in [0, 1]."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def _save_png(path: str | Path, img: Image.Image) -> None:
    from fico.checkpoint import atomic_write_bytes
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(Path(path), buf.getvalue())


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a float32 (3, H, W) array in [0, 1] as an RGB PNG."""
    arr = np.clip(image, 0.0, 1.0).transpose(1, 2, 0)
    _save_png(path, Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB"))


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a boolean (H, W) mask as an 8-bit grayscale PNG (255 = defect)."""
    _save_png(path, Image.fromarray((mask.astype(np.uint8) * 255), mode="L"))


def list_class_folders(root: str | Path) -> tuple[list[str], list[Path], list[int]]:
    """Index a labeled set laid out as root/<class>/*.png.

    Returns:
        (sorted class names, file paths, integer labels aligned with files).
    """
    base = Path(root)
    if not base.is_dir():
        raise DatasetLayoutError(f"no class-folder dataset at {base}")
    classes = sorted(p.name for p in base.iterdir() if p.is_dir())
    files: list[Path] = []
    labels: list[int] = []
    for label, name in enumerate(classes):
        pngs = sorted((base / name).glob("*.png"))
        if not pngs:
            raise DatasetLayoutError(f"class folder {base / name} holds no PNG files")
        files.extend(pngs)
        labels.extend([label] * len(pngs))
    return classes, files, labels


@dataclass(slots=True)
class TestSample:
    path: Path
    defect: str          # "good" for normals
    label: int           # 0 normal, 1 anomalous
    sample_id: str       # "<defect>_<stem>", unique within a category


@dataclass(slots=True)
class CategoryIndex:
    category: str
    train_good: list[Path]
    test: list[TestSample]


def index_category(root: str | Path, category: str) -> CategoryIndex:
    """Index one category; rejects non-good training data and empty splits."""
    cat = Path(root) / category
    train_dir = cat / "train"
    test_dir = cat / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise DatasetLayoutError(f"category {category} at {cat} lacks train/ or test/")
    extras = sorted(p.name for p in train_dir.iterdir() if p.name != "good")
    if extras:
        raise DatasetLayoutError(
            f"train split of {category} must contain only good/, found {extras}"
        )
    train_good = sorted((train_dir / "good").glob("*.png"))
    if not train_good:
        raise DatasetLayoutError(f"no training images under {train_dir / 'good'}")
    samples: list[TestSample] = []
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        defect = defect_dir.name
        for png in sorted(defect_dir.glob("*.png")):
            samples.append(
                TestSample(
                    path=png,
                    defect=defect,
                    label=0 if defect == "good" else 1,
                    sample_id=f"{defect}_{png.stem}",
                )
            )
    if not samples:
        raise DatasetLayoutError(f"no test images under {test_dir}")
    return CategoryIndex(category=category, train_good=train_good, test=samples)


def list_categories(root: str | Path) -> list[str]:
    base = Path(root)
    if not base.is_dir():
        raise DatasetLayoutError(f"no dataset at {base}")
    return sorted(p.name for p in base.iterdir() if p.is_dir() and (p / "train").is_dir())
