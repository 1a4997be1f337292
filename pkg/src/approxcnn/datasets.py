"""Image ingestion and the seeded synthetic glyph dataset."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, FormatError, IngestError, InvalidParam, UnsupportedFormat


@dataclass
class Dataset:
    """Labeled images stacked as ``(N, C, H, W)`` floats in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InvalidParam(
                f"images must be (N, C, H, W) matching {len(self.labels)} labels, got {self.images.shape}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidParam(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(zip(self.images, self.labels.tolist()))

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.provenance)


def split_dataset(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle into disjoint (train, test) covering ``ds``.

    ``len(train) == round((1 - test_fraction) * N)`` with halves rounded up.
    """
    if not 0.0 <= test_fraction <= 1.0:
        raise InvalidParam(f"test fraction must be in [0, 1], got {test_fraction}")
    n = len(ds)
    n_train = int(np.floor((1.0 - test_fraction) * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(order[:n_train])), ds.subset(np.sort(order[n_train:]))


# ----------------------------------------------------------------------------
# PPM (binary P6, maxval 255)

def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise FormatError("truncated PPM header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = n if end < 0 else end + 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode a binary P6 pixmap into a ``(3, H, W)`` array scaled to [0, 1]."""
    if data[:2] != b"P6":
        raise FormatError("not a binary PPM (expected P6 magic)")
    tokens, pos = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"non-numeric PPM header field in {tokens[1:]}") from None
    if width < 1 or height < 1:
        raise FormatError(f"invalid PPM size {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PPM header")
    payload = data[pos + 1:]
    need = width * height * 3
    if len(payload) < need:
        raise FormatError(f"PPM payload has {len(payload)} bytes, expected {need}")
    pixels = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(image: np.ndarray) -> bytes:
    """Encode a ``(3, H, W)`` [0, 1] array (or uint8 array) as P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise InvalidParam(f"expected (3, H, W) image, got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + image.transpose(1, 2, 0).tobytes()


# ----------------------------------------------------------------------------
# resizing

def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resize of a ``(C, H, W)`` array."""
    img = np.asarray(img, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise InvalidParam(f"target size must be positive, got {out_h}x{out_w}")
    if img.ndim != 3 or min(img.shape[1:]) < 1:
        raise InvalidParam(f"expected a (C, H, W) image, got {img.shape}")
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy[:, None]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bottom * fy


# ----------------------------------------------------------------------------
# manifests

def _read_manifest(path: Path) -> list[tuple[Path, int, int]]:
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and len(row) == 2 and row[1].strip().lower() == "label":
                continue
            if len(row) != 2:
                raise IngestError(f"line {lineno}: expected 'path,label'", path=str(path), line=lineno)
            try:
                label = int(row[1].strip())
            except ValueError:
                raise IngestError(f"line {lineno}: bad label {row[1]!r}", path=str(path), line=lineno) from None
            if label < 0:
                raise IngestError(f"line {lineno}: negative label {label}", path=str(path), line=lineno)
            entries.append((path.parent / row[0].strip(), label, lineno))
    return entries


def _load_image(path: Path, size: tuple[int, int] | None) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc.strerror}", path=str(path)) from None
    try:
        img = decode_ppm(data)
    except FormatError as exc:
        raise IngestError(f"{path}: {exc}", path=str(path)) from exc
    if size is not None:
        img = resize_bilinear(img, *size)
    return img


def load_dataset(manifest_path, size: tuple[int, int] | None = (30, 30),
                 num_classes: int | None = None, workers: int = 1) -> Dataset:
    """Load a ``path,label`` CSV manifest; paths are relative to the manifest.

    Images are decoded, resized to ``size`` and kept in manifest order.  Any
    unreadable file or bad label aborts the whole load.
    """
    manifest_path = Path(manifest_path)
    entries = _read_manifest(manifest_path)
    if not entries:
        raise EmptyDataset(f"manifest {manifest_path} lists no images")
    labels = [label for _, label, _ in entries]
    classes = max(labels) + 1 if num_classes is None else int(num_classes)
    for _, label, lineno in entries:
        if label >= classes:
            raise IngestError(f"line {lineno}: label {label} >= class count {classes}",
                              path=str(manifest_path), line=lineno)
    paths = [p for p, _, _ in entries]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(lambda p: _load_image(p, size), paths))
    else:
        images = [_load_image(p, size) for p in paths]
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise IngestError(f"images have differing shapes {sorted(shapes)}; pass a target size")
    return Dataset(np.stack(images), np.array(labels), classes, provenance="ingested")


def write_dataset(ds: Dataset, directory) -> Path:
    """Write ``ds`` as PPM files plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = io.StringIO()
    writer = csv.writer(rows, lineterminator="\n")
    for i, (img, label) in enumerate(ds):
        name = f"{label:02d}/{i:06d}.ppm"
        target = directory / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(encode_ppm(img))
        writer.writerow([name, label])
    manifest = directory / "manifest.csv"
    tmp = manifest.with_suffix(".csv.tmp")
    tmp.write_text(rows.getvalue(), encoding="utf-8")
    os.replace(tmp, manifest)
    return manifest


# ----------------------------------------------------------------------------
# synthetic glyphs

def _glyph_mask(shape_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    bar = 0.2
    if shape_id == 0:    # disc
        return r < 0.6
    if shape_id == 1:    # ring
        return (r > 0.38) & (r < 0.66)
    if shape_id == 2:    # triangle, apex up
        return (v > -0.5) & (v < 0.65) & (np.abs(u) < (0.65 - v) * 0.62)
    if shape_id == 3:    # horizontal bar
        return (np.abs(v) < bar) & (np.abs(u) < 0.7)
    if shape_id == 4:    # vertical bar
        return (np.abs(u) < bar) & (np.abs(v) < 0.7)
    if shape_id == 5:    # diagonal bar
        return (np.abs(u - v) < bar * 1.41) & (r < 0.75)
    if shape_id == 6:    # anti-diagonal bar
        return (np.abs(u + v) < bar * 1.41) & (r < 0.75)
    if shape_id == 7:    # plus
        return ((np.abs(u) < bar) | (np.abs(v) < bar)) & (np.abs(u) < 0.7) & (np.abs(v) < 0.7)
    if shape_id == 8:    # square
        return (np.abs(u) < 0.5) & (np.abs(v) < 0.5)
    if shape_id == 9:    # diagonal cross
        return ((np.abs(u - v) < bar * 1.2) | (np.abs(u + v) < bar * 1.2)) & (r < 0.75)
    return np.abs(u) + np.abs(v) < 0.65  # diamond


N_SHAPES = 11
_PALETTE = np.array([
    [0.90, 0.15, 0.12],  # red
    [0.15, 0.30, 0.85],  # blue
    [0.95, 0.85, 0.15],  # yellow
    [0.90, 0.90, 0.90],  # white
])


def gen_synthetic_dataset(classes: int = 8, per_class: int = 50, size: int = 16, seed: int = 0) -> Dataset:
    """Seeded glyph images: one (shape, colour) pair per class.

    Each image jitters position, scale and rotation, draws over a random dark
    background and adds Gaussian noise.  Items are ordered class-major.
    """
    if not 2 <= classes <= 43:
        raise InvalidParam(f"classes must be in [2, 43], got {classes}")
    if per_class < 1:
        raise InvalidParam(f"per_class must be positive, got {per_class}")
    if size < 8:
        raise InvalidParam(f"size must be at least 8, got {size}")
    rng = np.random.default_rng(seed)
    grid = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    gy, gx = np.meshgrid(-grid, grid, indexing="ij")  # v grows upward
    images = np.empty((classes * per_class, 3, size, size))
    labels = np.repeat(np.arange(classes), per_class)
    for i, label in enumerate(labels):
        shape_id = label % N_SHAPES
        colour = _PALETTE[label // N_SHAPES]
        cx, cy = rng.uniform(-0.12, 0.12, size=2)
        scale = rng.uniform(0.8, 1.1)
        theta = np.deg2rad(rng.uniform(-10.0, 10.0))
        c, s = np.cos(theta), np.sin(theta)
        px, py = (gx - cx) / scale, (gy - cy) / scale
        u, v = c * px + s * py, -s * px + c * py
        mask = _glyph_mask(shape_id, u, v)
        background = rng.uniform(0.05, 0.35) + rng.uniform(-0.05, 0.05, size=3)
        brightness = rng.uniform(0.7, 1.0)
        img = np.where(mask[None], (colour * brightness)[:, None, None], background[:, None, None])
        img = img + rng.normal(0.0, 0.05, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes, provenance=f"synthetic(seed={seed})")
