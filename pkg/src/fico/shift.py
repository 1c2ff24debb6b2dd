"""Distribution shift: corruptions, augmented views, test-time feature matching,
and the synthetic texture benchmark.

Corruption severities come from a fixed, versioned parameter table so that a
scenario name plus a severity level always means the same transform.  All
randomness is drawn from generators seeded per (master seed, image key), so
datasets and augmented views are reproducible file by file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage

from fico.checkpoint import atomic_write_text
from fico.data import load_image, save_image, save_mask
from fico.errors import ConfigError, ShapeMismatch

# ---------------------------------------------------------------------------
# Corruptions

CORRUPTION_KINDS = ("brightness", "contrast", "defocus_blur", "gaussian_noise")

SEVERITY_TABLE_VERSION = 1

# Parameter per severity level 1..5; index with [severity - 1].
SEVERITY_TABLE = {
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),          # additive offset
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),          # scale toward the mean
    "defocus_blur": (1.0, 1.5, 2.0, 3.0, 4.0),        # disk radius in pixels
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26), # noise sigma
}

_NEUTRAL = {"brightness": 0.0, "contrast": 1.0, "defocus_blur": 0.0, "gaussian_noise": 0.0}


@dataclass(frozen=True, slots=True)
class CorruptionSpec:
    """One concrete corruption: a kind plus its single scalar parameter."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}; expected {CORRUPTION_KINDS}")
        # Brightness delta may be negative (darkening); the other parameters
        # are scale or spread values with a hard floor.
        if self.kind == "contrast" and self.value <= 0:
            raise ConfigError(f"contrast factor must be > 0, got {self.value}")
        if self.kind == "defocus_blur" and self.value < 0:
            raise ConfigError(f"blur radius must be >= 0, got {self.value}")
        if self.kind == "gaussian_noise" and self.value < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.value}")

    @classmethod
    def from_severity(cls, kind: str, severity: int) -> "CorruptionSpec":
        if kind not in SEVERITY_TABLE:
            raise ConfigError(f"unknown corruption kind {kind!r}; expected {CORRUPTION_KINDS}")
        if not 1 <= severity <= 5:
            raise ConfigError(f"severity must be in 1..5, got {severity}")
        return cls(kind, SEVERITY_TABLE[kind][severity - 1])

    @classmethod
    def identity(cls, kind: str) -> "CorruptionSpec":
        return cls(kind, _NEUTRAL[kind])

    @property
    def is_identity(self) -> bool:
        return self.value == _NEUTRAL[self.kind]


def disk_kernel(radius: float) -> np.ndarray:
    """Normalized disk: indicator of x^2 + y^2 <= radius^2, summing to 1."""
    if radius < 0:
        raise ConfigError(f"disk radius must be >= 0, got {radius}")
    r = max(1, int(np.ceil(radius)))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    disk = ((x * x + y * y) <= radius * radius).astype(np.float64)
    if disk.sum() == 0:
        disk[r, r] = 1.0
    return disk / disk.sum()


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeMismatch(f"expected a (3, H, W) image, got shape {image.shape}")


def corrupt(image: np.ndarray, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    """Apply one corruption to a float32 (3, H, W) image in [0, 1].

    Identity parameters return a bitwise copy.  Gaussian noise is drawn from
    a generator seeded with `seed`, so the output is a pure function of
    (image, spec, seed).
    """
    _check_image(image)
    if spec.is_identity:
        return image.copy()
    if spec.kind == "brightness":
        out = image + spec.value
    elif spec.kind == "contrast":
        mean = image.mean()
        out = (image - mean) * spec.value + mean
    elif spec.kind == "defocus_blur":
        kernel = disk_kernel(spec.value)
        out = np.stack(
            [ndimage.convolve(image[c].astype(np.float64), kernel, mode="reflect") for c in range(3)]
        )
    else:  # gaussian_noise
        rng = np.random.default_rng(seed)
        out = image + rng.normal(0.0, spec.value, size=image.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def per_image_seed(master_seed: int, key: str | int) -> int:
    """Stable per-image seed derived from a master seed and an image key."""
    digest = hashlib.sha256(f"{master_seed}/{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def corrupt_tree(
    in_root: str | Path, out_root: str | Path, spec: CorruptionSpec, seed: int
) -> Path:
    """Mirror a dataset tree with every PNG corrupted.

    Ground-truth masks (paths under a ground_truth/ directory) are copied
    unchanged; corrupting annotations would corrupt the labels themselves.
    Writes manifest.json recording the corruption parameters and per-file digests.
    """
    src = Path(in_root)
    dst = Path(out_root)
    if not src.is_dir():
        raise ConfigError(f"no input dataset at {src}")
    files = sorted(src.rglob("*.png"))
    if not files:
        raise ConfigError(f"no PNG files under {src}")
    digests = {}
    for path in files:
        rel = path.relative_to(src)
        target = dst / rel
        if "ground_truth" in rel.parts:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(path.read_bytes())
        else:
            image = load_image(path)
            save_image(target, corrupt(image, spec, per_image_seed(seed, str(rel))))
        digests[str(rel)] = hashlib.sha256(target.read_bytes()).hexdigest()
    manifest = {
        "kind": spec.kind,
        "value": spec.value,
        "seed": seed,
        "table_version": SEVERITY_TABLE_VERSION,
        "source": str(src),
        "files": digests,
    }
    dst.mkdir(parents=True, exist_ok=True)
    atomic_write_text(dst / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return dst


# ---------------------------------------------------------------------------
# Augmented views for training

@dataclass(frozen=True, slots=True)
class AugmentPolicy:
    """Ranges for the per-view photometric and blur jitter.

    Views for a given (seed, image index) are identical across calls; the
    view index separates the N streams.
    """

    n_views: int = 2
    seed: int = 0
    brightness_range: tuple[float, float] = (-0.15, 0.15)
    contrast_range: tuple[float, float] = (0.7, 1.3)
    blur_radius_range: tuple[float, float] = (0.0, 1.5)
    noise_sigma_range: tuple[float, float] = (0.0, 0.05)

    def __post_init__(self):
        if self.n_views < 1:
            raise ConfigError("n_views must be >= 1")
        for name in ("brightness_range", "contrast_range", "blur_radius_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: ({lo}, {hi})")


def sample_view_params(policy: AugmentPolicy, index: int, view: int) -> dict[str, float]:
    """Draw one view's jitter parameters from its dedicated stream."""
    rng = np.random.default_rng(np.random.SeedSequence([policy.seed, index, view]))
    return {
        "brightness": float(rng.uniform(*policy.brightness_range)),
        "contrast": float(rng.uniform(*policy.contrast_range)),
        "blur_radius": float(rng.uniform(*policy.blur_radius_range)),
        "noise_sigma": float(rng.uniform(*policy.noise_sigma_range)),
        "noise_seed": int(rng.integers(0, 2**63 - 1)),
    }


def make_views(image: np.ndarray, policy: AugmentPolicy, index: int = 0) -> list[np.ndarray]:
    """Produce the policy's N jittered views of one image."""
    _check_image(image)
    views = []
    for v in range(policy.n_views):
        p = sample_view_params(policy, index, v)
        out = corrupt(image, CorruptionSpec("brightness", p["brightness"]))
        out = corrupt(out, CorruptionSpec("contrast", p["contrast"]))
        out = corrupt(out, CorruptionSpec("defocus_blur", p["blur_radius"]))
        out = corrupt(out, CorruptionSpec("gaussian_noise", p["noise_sigma"]), seed=p["noise_seed"])
        views.append(out)
    return views


# ---------------------------------------------------------------------------
# Test-time feature distribution matching

def efdm_match(content: np.ndarray, style_sorted: np.ndarray, lam: float) -> np.ndarray:
    """Blend content values toward the style distribution, rank for rank.

    output[i] = (1 - lam) * content[i] + lam * style_sorted[rank(content[i])]
    with ascending ranks and stable tie-breaking by index.  lam = 0 returns
    the content unchanged; lam = 1 transfers the style multiset exactly.
    """
    if content.ndim != 1 or style_sorted.ndim != 1:
        raise ShapeMismatch("efdm_match expects 1-D arrays")
    if content.shape != style_sorted.shape:
        raise ShapeMismatch(
            f"content and style lengths differ: {content.shape[0]} vs {style_sorted.shape[0]}"
        )
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must be in [0, 1], got {lam}")
    if np.any(np.diff(style_sorted) < 0):
        raise ConfigError("style reference must be sorted ascending")
    if lam == 0.0:
        return content.copy()
    order = np.argsort(content, kind="stable")
    out = np.empty_like(content)
    if lam == 1.0:
        out[order] = style_sorted
    else:
        # Blend in 64-bit so the assignment rounds once; 32-bit arithmetic
        # here would drift past one ulp of the exact value.
        blend = (1.0 - lam) * content[order].astype(np.float64)
        blend += lam * style_sorted.astype(np.float64)
        out[order] = blend
    return out


@dataclass(slots=True)
class StyleBank:
    """Per-channel sorted reference values of the teacher's level-1 features.

    values[c] is the mean over training images of the sorted feature values of
    channel c, one entry per spatial location.
    """

    values: np.ndarray  # (C, H1 * W1), each row non-decreasing
    lam: float = 0.8

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeMismatch("bank values must be (C, L)")
        if np.any(np.diff(self.values, axis=1) < 0):
            raise ConfigError("bank rows must be non-decreasing")


def build_style_bank(
    teacher: torch.nn.Module, images: Iterable[np.ndarray], lam: float = 0.8
) -> StyleBank:
    """Average the sorted level-1 feature values over the training images."""
    total = None
    count = 0
    with torch.no_grad():
        for image in images:
            x = torch.from_numpy(np.ascontiguousarray(image)).unsqueeze(0)
            f1 = teacher(x)[0][0].cpu().numpy()
            sorted_vals = np.sort(f1.reshape(f1.shape[0], -1), axis=1)
            total = sorted_vals if total is None else total + sorted_vals
            count += 1
    if count == 0:
        raise ConfigError("style bank needs at least one image")
    return StyleBank(values=(total / count).astype(np.float32), lam=lam)


def tta_adapt(
    teacher: torch.nn.Module, pyramid: Sequence[torch.Tensor], bank: StyleBank, lam: float | None = None
) -> list[torch.Tensor]:
    """Match level-1 features to the bank, then recompute the deeper levels.

    lam = 0 returns the pyramid unchanged.  Accepts (C,H,W) or (B,C,H,W)
    levels; batched inputs are adapted sample by sample.
    """
    lam = bank.lam if lam is None else lam
    if lam == 0.0:
        return list(pyramid)
    f1 = pyramid[0]
    squeeze = f1.dim() == 3
    x1 = f1.unsqueeze(0) if squeeze else f1
    b, c, h, w = x1.shape
    if bank.values.shape[0] != c or bank.values.shape[1] != h * w:
        raise ShapeMismatch(
            f"bank shape {bank.values.shape} does not match level-1 features ({c}, {h * w})"
        )
    adapted = np.empty((b, c, h, w), dtype=np.float32)
    arr = x1.detach().cpu().numpy()
    for i in range(b):
        for ch in range(c):
            adapted[i, ch] = efdm_match(
                arr[i, ch].ravel(), bank.values[ch], lam
            ).reshape(h, w)
    new_f1 = torch.from_numpy(adapted).to(dtype=f1.dtype)
    with torch.no_grad():
        deeper = teacher.forward_from_level1(new_f1)
    if squeeze:
        return [new_f1.squeeze(0)] + [d.squeeze(0) for d in deeper]
    return [new_f1] + list(deeper)


# ---------------------------------------------------------------------------
# Synthetic texture benchmark

TEXTURE_FAMILIES = ("stripes", "checker", "blobs", "cloth")
DEFECT_KINDS = ("contrast_patch", "scratch", "occlusion")

_FAMILY_TINT = {
    "stripes": (0.90, 0.55, 0.45),
    "checker": (0.50, 0.85, 0.55),
    "blobs": (0.50, 0.60, 0.90),
    "cloth": (0.85, 0.80, 0.50),
}


@dataclass(frozen=True, slots=True)
class DatasetSpec:
    """Counts and families for one generated benchmark."""

    categories: tuple[str, ...] = ("stripes", "checker", "blobs")
    image_size: int = 64
    train_count: int = 64
    test_good_count: int = 16
    test_defect_count: int = 8  # per defect kind
    aux_classes: tuple[str, ...] = TEXTURE_FAMILIES
    aux_count: int = 48  # per class

    def __post_init__(self):
        for name in self.categories:
            if name not in TEXTURE_FAMILIES:
                raise ConfigError(f"unknown texture family {name!r}; expected {TEXTURE_FAMILIES}")
        for name in self.aux_classes:
            if name not in TEXTURE_FAMILIES:
                raise ConfigError(f"unknown texture family {name!r}; expected {TEXTURE_FAMILIES}")


def _texture_gray(family: str, rng: np.random.Generator, size: int) -> np.ndarray:
    # Each family is anchored to fixed base parameters with small per-image
    # jitter, so images of one class look like views of one product surface
    # rather than unrelated patterns. One-class training needs that alignment.
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if family == "stripes":
        theta = 0.6 + rng.normal(0.0, 0.02)
        freq = 6.0 + rng.normal(0.0, 0.1)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase)
        gray = 0.5 + (0.32 + rng.normal(0.0, 0.005)) * wave
    elif family == "checker":
        period = 12.0 + rng.normal(0.0, 0.15)
        px, py = rng.uniform(0, period, size=2)
        sq_x = np.sign(np.sin(2 * np.pi * (xx + px) / period))
        sq_y = np.sign(np.sin(2 * np.pi * (yy + py) / period))
        gray = 0.55 + 0.22 * sq_x * sq_y
        gray = ndimage.gaussian_filter(gray, sigma=0.6, mode="reflect")
    elif family == "blobs":
        noise = rng.standard_normal((size, size))
        gray = ndimage.gaussian_filter(noise, sigma=4.0 + rng.normal(0.0, 0.15), mode="reflect")
        lo, hi = np.percentile(gray, [2, 98])
        gray = 0.2 + 0.6 * np.clip((gray - lo) / max(hi - lo, 1e-6), 0, 1)
    elif family == "cloth":
        noise = rng.standard_normal((size, size))
        sig = (0.8 + rng.normal(0.0, 0.05), 3.2 + rng.normal(0.0, 0.15))
        gray = ndimage.gaussian_filter(noise, sigma=sig, mode="reflect")
        lo, hi = np.percentile(gray, [2, 98])
        gray = 0.25 + 0.5 * np.clip((gray - lo) / max(hi - lo, 1e-6), 0, 1)
    else:
        raise ConfigError(f"unknown texture family {family!r}")
    gray += rng.normal(0.0, 0.01, size=(size, size))
    return np.clip(gray, 0.02, 0.98)


def make_texture(family: str, rng: np.random.Generator, size: int) -> np.ndarray:
    """One RGB texture image of the family, float32 (3, size, size) in [0, 1]."""
    gray = _texture_gray(family, rng, size)
    tint = np.asarray(_FAMILY_TINT[family]) + rng.uniform(-0.02, 0.02, size=3)
    image = gray[None, :, :] * tint[:, None, None] + rng.uniform(-0.015, 0.015)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _region_mask(rng: np.random.Generator, size: int, lo: int, hi: int) -> np.ndarray:
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    top = int(rng.integers(2, size - h - 2))
    left = int(rng.integers(2, size - w - 2))
    mask = np.zeros((size, size), dtype=bool)
    if rng.random() < 0.5:
        mask[top : top + h, left : left + w] = True
    else:
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx = top + h / 2, left + w / 2
        mask[((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0] = True
    return mask


def inject_defect(
    image: np.ndarray, kind: str, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one defect to a copy of the image; returns (image, boolean mask)."""
    _check_image(image)
    size = image.shape[-1]
    out = image.copy()
    if kind == "contrast_patch":
        mask = _region_mask(rng, size, 12, 20)
        factor = rng.uniform(2.2, 3.0) if rng.random() < 0.5 else rng.uniform(0.05, 0.25)
        local_mean = out[:, mask].mean()
        out[:, mask] = (out[:, mask] - local_mean) * factor + local_mean
    elif kind == "scratch":
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        while True:
            p0 = rng.uniform(4, size - 4, size=2)
            p1 = rng.uniform(4, size - 4, size=2)
            if np.hypot(*(p1 - p0)) >= size / 3:
                break
        d = p1 - p0
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / (d @ d), 0, 1)
        dist = np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))
        mask = dist <= rng.uniform(1.2, 2.2)
        offset = rng.choice([-1.0, 1.0]) * rng.uniform(0.35, 0.55)
        out[:, mask] = out[:, mask] + offset
    elif kind == "occlusion":
        mask = _region_mask(rng, size, 10, 18)
        color = rng.uniform(0.0, 1.0, size=3)
        out[:, mask] = color[:, None]
    else:
        raise ConfigError(f"unknown defect kind {kind!r}; expected {DEFECT_KINDS}")
    if not mask.any():
        raise RuntimeError("defect mask is empty")
    return np.clip(out, 0.0, 1.0).astype(np.float32), mask


def _image_rng(seed: int, *keys) -> np.random.Generator:
    entropy = [seed]
    for key in keys:
        digest = hashlib.sha256(str(key).encode("utf-8")).digest()
        entropy.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def synth_dataset(out_root: str | Path, spec: DatasetSpec, seed: int) -> Path:
    """Generate the benchmark under out_root; same seed reproduces every byte.

    Layout per category: train/good, test/good, test/<defect>, ground_truth/
    <defect>.  The auxiliary classification set lands under out_root/aux/
    <family>/.  A manifest with per-file digests is written at the root.
    """
    root = Path(out_root)
    digests: dict[str, str] = {}

    def _write_image(rel: str, image: np.ndarray) -> None:
        save_image(root / rel, image)
        digests[rel] = hashlib.sha256((root / rel).read_bytes()).hexdigest()

    def _write_mask(rel: str, mask: np.ndarray) -> None:
        save_mask(root / rel, mask)
        digests[rel] = hashlib.sha256((root / rel).read_bytes()).hexdigest()

    for category in spec.categories:
        for i in range(spec.train_count):
            rng = _image_rng(seed, category, "train", i)
            _write_image(f"{category}/train/good/{i:03d}.png", make_texture(category, rng, spec.image_size))
        for i in range(spec.test_good_count):
            rng = _image_rng(seed, category, "test_good", i)
            _write_image(f"{category}/test/good/{i:03d}.png", make_texture(category, rng, spec.image_size))
        for defect in DEFECT_KINDS:
            for i in range(spec.test_defect_count):
                rng = _image_rng(seed, category, f"test_{defect}", i)
                clean = make_texture(category, rng, spec.image_size)
                bad, mask = inject_defect(clean, defect, rng)
                _write_image(f"{category}/test/{defect}/{i:03d}.png", bad)
                _write_mask(f"{category}/ground_truth/{defect}/{i:03d}_mask.png", mask)
    for family in spec.aux_classes:
        for i in range(spec.aux_count):
            rng = _image_rng(seed, family, "aux", i)
            _write_image(f"aux/{family}/{i:03d}.png", make_texture(family, rng, spec.image_size))

    manifest = {"seed": seed, "spec": asdict(spec), "files": digests}
    atomic_write_text(root / "dataset_manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return root
