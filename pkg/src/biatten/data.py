"""Image/annotation loading, patch cropping, splits and the synthetic fixture."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

ANNOTATION_HEADER = ["hr_path", "sr_path", "mos", "sr_method", "scale_factor", "content_id"]
SPLIT_MODES = ("by-image", "by-content")


class DataError(Exception):
    """Base class for dataset problems the CLI reports with exit code 3."""


class ImageMissingError(DataError):
    pass


class ImageDecodeError(DataError):
    pass


class ImageDepthError(DataError):
    pass


class AnnotationError(DataError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    hr_path: str
    sr_path: str
    mos: float
    sr_method: str
    scale_factor: int
    content_id: str


@dataclass
class PatchPair:
    hr_patch: np.ndarray  # (3, size, size) in [0, 1]
    sr_patch: np.ndarray
    mos: float
    image_index: int
    offset: tuple = (0, 0)


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    train_fraction: float = 0.8
    mode: str = "by-image"


# ---------------------------------------------------------------------------
# decoding

_EIGHT_BIT_MODES = {"L", "P", "RGB", "RGBA", "LA"}


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an 8-bit PNG/BMP into a (3, H, W) float32 array of byte/255."""
    path = Path(path)
    if not path.is_file():
        raise ImageMissingError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in _EIGHT_BIT_MODES:
                raise ImageDepthError(f"{path}: unsupported pixel mode {mode!r}, expected 8-bit RGB")
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return (rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def to_bytes(img: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] to (H, W, 3) uint8."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    Image.fromarray(to_bytes(img)).save(path)


def load_annotations(csv_path: str | os.PathLike) -> list:
    """Parse the annotation CSV; relative image paths resolve against its directory."""
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise AnnotationError(f"annotation file not found: {csv_path}")
    base = csv_path.parent
    records = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ANNOTATION_HEADER:
            raise AnnotationError(f"{csv_path}:1: header must be {','.join(ANNOTATION_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(ANNOTATION_HEADER):
                raise AnnotationError(f"{csv_path}:{line}: expected 6 fields, got {len(row)}")
            hr, sr, mos, method, scale, content = (cell.strip() for cell in row)
            try:
                mos_value = float(mos)
            except ValueError:
                raise AnnotationError(f"{csv_path}:{line}: mos {mos!r} is not a number") from None
            if not math.isfinite(mos_value):
                raise AnnotationError(f"{csv_path}:{line}: mos must be finite")
            try:
                scale_value = int(scale)
            except ValueError:
                raise AnnotationError(f"{csv_path}:{line}: scale_factor {scale!r} is not an integer") from None
            if scale_value not in (2, 3, 4):
                raise AnnotationError(f"{csv_path}:{line}: scale_factor must be 2, 3 or 4")
            records.append(
                ImageRecord(
                    hr_path=str(base / hr),
                    sr_path=str(base / sr),
                    mos=mos_value,
                    sr_method=method,
                    scale_factor=scale_value,
                    content_id=content,
                )
            )
    return records


def write_annotations(csv_path: str | os.PathLike, records: Sequence[ImageRecord]) -> None:
    base = Path(csv_path).parent
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for r in records:
            writer.writerow(
                [_relative(r.hr_path, base), _relative(r.sr_path, base), repr(r.mos), r.sr_method, r.scale_factor, r.content_id]
            )


def _relative(path: str, base: Path) -> str:
    try:
        return Path(path).relative_to(base).as_posix()
    except ValueError:
        return str(path)


# ---------------------------------------------------------------------------
# patches


def patch_offsets(extent: int, size: int, stride: int) -> list:
    """Grid offsets 0, stride, ... plus ``extent - size`` when not already on the grid."""
    if extent < size:
        raise DataError(f"image extent {extent} is smaller than patch size {size}")
    offsets = list(range(0, extent - size + 1, stride))
    if offsets[-1] != extent - size:
        offsets.append(extent - size)
    return offsets


def extract_patches(
    hr: np.ndarray,
    sr: np.ndarray,
    size: int = 32,
    stride: int = 16,
    mos: float = math.nan,
    image_index: int = 0,
) -> list:
    """Aligned, overlapping size x size crops of an HR/SR pair in row-major order."""
    hr = np.asarray(getattr(hr, "data", hr))
    sr = np.asarray(getattr(sr, "data", sr))
    if hr.shape != sr.shape:
        raise DataError(f"HR {hr.shape} and SR {sr.shape} shapes differ")
    if stride < 1:
        raise DataError("patch stride must be positive")
    _, h, w = hr.shape
    out = []
    for r in patch_offsets(h, size, stride):
        for c in patch_offsets(w, size, stride):
            out.append(
                PatchPair(
                    hr_patch=hr[:, r : r + size, c : c + size].copy(),
                    sr_patch=sr[:, r : r + size, c : c + size].copy(),
                    mos=float(mos),
                    image_index=image_index,
                    offset=(r, c),
                )
            )
    return out


def load_pair(record: ImageRecord, loader: Callable = load_image) -> tuple:
    hr, sr = loader(record.hr_path), loader(record.sr_path)
    if hr.shape != sr.shape:
        raise DataError(f"{record.sr_path}: SR shape {sr.shape} differs from HR shape {hr.shape}")
    return hr, sr


def build_patches(
    records: Sequence[ImageRecord],
    size: int = 32,
    stride: int = 16,
    loader: Callable = load_image,
    indices: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> list:
    """Patch pairs for every record; ``image_index`` is the record's position (or ``indices``)."""
    indices = list(range(len(records))) if indices is None else list(indices)

    def work(item):
        idx, rec = item
        hr, sr = load_pair(rec, loader)
        return extract_patches(hr, sr, size, stride, mos=rec.mos, image_index=idx)

    items = list(zip(indices, records))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(work, items))
    else:
        chunks = [work(item) for item in items]
    return [p for chunk in chunks for p in chunk]


# ---------------------------------------------------------------------------
# splits


def split_indices(records: Sequence[ImageRecord], spec: SplitSpec) -> tuple:
    """Deterministic disjoint (train, test) record positions, each sorted."""
    if len(records) < 2:
        raise DataError("need at least two records to split")
    if spec.mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {spec.mode!r}")
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "by-image":
        order = rng.permutation(len(records))
        cut = int(round(spec.train_fraction * len(records)))
        return sorted(order[:cut].tolist()), sorted(order[cut:].tolist())
    groups: dict = {}
    for i, r in enumerate(records):
        groups.setdefault(r.content_id, []).append(i)
    keys = sorted(groups)
    order = rng.permutation(len(keys))
    cut = int(round(spec.train_fraction * len(keys)))
    train = sorted(i for k in order[:cut] for i in groups[keys[k]])
    test = sorted(i for k in order[cut:] for i in groups[keys[k]])
    return train, test


def split_dataset(records: Sequence[ImageRecord], spec: SplitSpec) -> tuple:
    """Train and test record lists; see :func:`split_indices`."""
    train, test = split_indices(records, spec)
    return [records[i] for i in train], [records[i] for i in test]


# ---------------------------------------------------------------------------
# synthetic stand-in for QADS/CVIU


@dataclass
class Fixture:
    """Records plus decoded pixels, keyed by the records' paths."""

    records: list
    images: dict = field(default_factory=dict)
    severities: list = field(default_factory=list)

    def load(self, path) -> np.ndarray:
        try:
            return self.images[str(path)]
        except KeyError:
            raise ImageMissingError(f"image not found in fixture: {path}") from None

    def write(self, out_dir: str | os.PathLike, csv_name: str = "synth.csv") -> Path:
        """Write PNGs and the annotation CSV; returns the CSV path."""
        out_dir = Path(out_dir)
        (out_dir / "hr").mkdir(parents=True, exist_ok=True)
        (out_dir / "sr").mkdir(parents=True, exist_ok=True)
        for rel, img in self.images.items():
            save_image(out_dir / rel, img)
        csv_path = out_dir / csv_name
        rel_records = [
            ImageRecord(str(out_dir / r.hr_path), str(out_dir / r.sr_path), r.mos, r.sr_method, r.scale_factor, r.content_id)
            for r in self.records
        ]
        write_annotations(csv_path, rel_records)
        return csv_path


def smooth_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random (3, size, size) image of blurred noise plus a colour gradient, in [0, 1]."""
    coarse = gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, 4, 4), mode="wrap")
    detail = gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, 1, 1), mode="wrap")
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    img = 4.0 * coarse + 0.6 * detail + ramp[None] * rng.uniform(-0.5, 0.5, size=(3, 1, 1))
    img = (img - img.min()) / (img.max() - img.min())
    return quantize(0.1 + 0.8 * img)


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.clip(np.rint(img * 255.0), 0, 255) / 255.0).astype(np.float32)


def _resize(img: np.ndarray, shape: tuple) -> np.ndarray:
    planes = [
        np.asarray(Image.fromarray(ch.astype(np.float32)).resize(shape[::-1], Image.BICUBIC))
        for ch in img
    ]
    return np.stack(planes)


def scale_for(severity: float) -> int:
    return 2 + min(int(3 * severity), 2)


def synthetic_mos(severity: float) -> float:
    """Strictly decreasing in severity, 1.0 for a pristine copy."""
    return 1.0 - 0.9 * severity


def degrade(hr: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    """Bicubic down/up-sampling, blur and noise whose strength grows with ``severity`` in [0, 1]."""
    if severity <= 0.0:
        return hr.copy()
    _, h, w = hr.shape
    f = scale_for(severity)
    low = _resize(hr, (max(h // f, 1), max(w // f, 1)))
    up = _resize(low, (h, w))
    mixed = (1.0 - severity) * hr + severity * up
    blurred = gaussian_filter(mixed, sigma=(0, 1.5 * severity, 1.5 * severity))
    noisy = blurred + noise_std(severity) * rng.standard_normal(hr.shape)
    return quantize(noisy)


def noise_std(severity: float) -> float:
    return 0.08 * severity


def synth_fixture(seed: int, n_contents: int, n_sr_per_content: int, size: int = 64) -> Fixture:
    """Generate a deterministic in-memory dataset.

    Each content gets a ladder of ``n_sr_per_content`` severities, one per
    equal-width bin of (0, 1], with a random position inside its bin, so
    severity (and therefore noise level) rises strictly along the ladder while
    MOS falls.
    """
    if n_contents < 1 or n_sr_per_content < 1:
        raise ValueError("n_contents and n_sr_per_content must be positive")
    rng = np.random.default_rng(seed)
    fixture = Fixture(records=[])
    for c in range(n_contents):
        content = f"c{c:03d}"
        hr_rel = f"hr/{content}.png"
        hr = smooth_image(rng, size)
        fixture.images[hr_rel] = hr
        for j in range(n_sr_per_content):
            severity = (j + rng.uniform(0.05, 1.0)) / n_sr_per_content
            sr_rel = f"sr/{content}_{j:02d}.png"
            fixture.images[sr_rel] = degrade(hr, severity, rng)
            fixture.severities.append(severity)
            fixture.records.append(
                ImageRecord(
                    hr_path=hr_rel,
                    sr_path=sr_rel,
                    mos=synthetic_mos(severity),
                    sr_method=f"synthetic-x{scale_for(severity)}",
                    scale_factor=scale_for(severity),
                    content_id=content,
                )
            )
    return fixture
