"""Dataset ingestion and synthesis: MNIST IDX, geometric shapes, morphology pairs, file formats."""

from __future__ import annotations

import csv
import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import DomainError
from .soft import Form, Kind, MorphMode, StructuringElement, hard_morph

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

SHAPE_CLASSES = ("ellipse", "line", "rectangle", "triangle", "pentagon")


class ParseError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class LabeledSet:
    images: np.ndarray  # (N, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DomainError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.class_names and len(self.labels) and self.labels.max() >= len(self.class_names):
            raise DomainError("label outside the class list")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.images[idx], self.labels[idx], list(self.class_names))


@dataclass
class PairSet:
    inputs: np.ndarray
    targets: np.ndarray
    provenance: list[tuple[str, str]]  # (mode, SE name or description)

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise DomainError(f"inputs {self.inputs.shape} vs targets {self.targets.shape}")


# -- IDX --------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(data: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(data) < 4:
        raise ParseError(f"{what}: truncated magic number", len(data))
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise ParseError(f"{what}: bad magic {got}, expected {magic}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError(f"{what}: truncated header", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims))
    if len(data) < header + count:
        raise ParseError(f"{what}: truncated payload, need {header + count} bytes, have {len(data)}", len(data))
    if len(data) > header + count:
        raise ParseError(f"{what}: {len(data) - header - count} trailing bytes", header + count)
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_names=None) -> LabeledSet:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise ParseError(f"count mismatch: {len(images)} images vs {len(labels)} labels", 4)
    names = class_names or [str(i) for i in range(int(labels.max(initial=0)) + 1)]
    return LabeledSet(images / 255.0, labels.astype(np.int64), names)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 IDX files; float images in [0, 1] are quantised."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.floor(np.clip(images, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_mnist(root, split: str = "train") -> LabeledSet:
    """Load the canonical MNIST files (optionally gzipped) from ``root``."""
    prefix = {"train": "train", "test": "t10k"}[split]
    root = Path(root)

    def find(stem):
        for name in (f"{stem}", f"{stem}.gz", stem.replace("-idx", ".idx")):
            if (root / name).exists():
                return root / name
        raise FileNotFoundError(f"{stem} not found under {root}")

    return load_idx(find(f"{prefix}-images-idx3-ubyte"), find(f"{prefix}-labels-idx1-ubyte"))


def default_mnist_dir() -> Path:
    return Path(os.environ.get("MORPHKIT_MNIST_DIR", "data/mnist"))


# -- synthetic geometric shapes ----------------------------------------------

def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _fill_polygon(verts: np.ndarray, size: int) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centres.  ``verts`` are (x, y)."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.0
    inside = np.zeros((size, size), dtype=bool)
    x0, y0 = verts[:, 0], verts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ys >= min(ay, by)) & (ys < max(ay, by))
        xc = ax + (ys - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (xs < xc)
    return inside


def _place(extent_x, extent_y, size, margin, rng):
    lo_x, hi_x = margin + extent_x, size - 1 - margin - extent_x
    lo_y, hi_y = margin + extent_y, size - 1 - margin - extent_y
    return rng.uniform(lo_x, max(lo_x, hi_x)), rng.uniform(lo_y, max(lo_y, hi_y))


def _draw_shape(cls: str, size: int, rng: np.random.Generator, margin: int = 2) -> np.ndarray:
    length = rng.uniform(size / 5, size / 2)
    theta = rng.uniform(0.0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size] + 0.0
    if cls == "ellipse":
        a = length / 2
        b = a * rng.uniform(0.4, 1.0)
        ex = np.sqrt((a * np.cos(theta)) ** 2 + (b * np.sin(theta)) ** 2)
        ey = np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2)
        cx, cy = _place(ex, ey, size, margin, rng)
        u = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
        v = -(xs - cx) * np.sin(theta) + (ys - cy) * np.cos(theta)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if cls == "line":
        thick = int(rng.integers(1, 4))
        half = np.array([np.cos(theta), np.sin(theta)]) * length / 2
        pad = thick / 2
        cx, cy = _place(abs(half[0]) + pad, abs(half[1]) + pad, size, margin, rng)
        p0 = np.array([cx, cy]) - half
        d = 2 * half
        t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / (d @ d), 0.0, 1.0)
        dist = np.hypot(xs - p0[0] - t * d[0], ys - p0[1] - t * d[1])
        return dist <= thick / 2
    if cls == "rectangle":
        w = length
        h = w * rng.uniform(0.3, 1.0)
        base = np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) / 2
    elif cls == "triangle":
        angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
        while np.min(np.diff(np.r_[angles, angles[0] + 2 * np.pi])) < np.pi / 4:
            angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
        base = np.c_[np.cos(angles), np.sin(angles)] * length / 2
    elif cls == "pentagon":
        step = 2 * np.pi / 5
        angles = np.arange(5) * step + rng.uniform(-0.2, 0.2, 5) * step
        radii = length / 2 * rng.uniform(0.85, 1.0, 5)
        base = np.c_[np.cos(angles) * radii, np.sin(angles) * radii]
    else:
        raise DomainError(f"unknown shape class {cls!r}")
    verts = base @ _rot(theta).T
    cx, cy = _place(np.abs(verts[:, 0]).max(), np.abs(verts[:, 1]).max(), size, margin, rng)
    return _fill_polygon(verts + [cx, cy], size)


def gen_scgs(per_class: int, size: int = 64, seed: int = 0) -> LabeledSet:
    """White filled shapes on black, one per image, classes interleaved.

    Sizes (longest extent) are uniform in [size/5, size/2], orientation
    uniform in [0, 2*pi), position uniform with a 2-pixel margin.
    """
    if size < 16:
        raise DomainError("SCGS images need size >= 16")
    rng = np.random.default_rng(seed)
    images = np.zeros((per_class * len(SHAPE_CLASSES), size, size))
    labels = np.zeros(len(images), dtype=np.int64)
    for i in range(len(images)):
        label = i % len(SHAPE_CLASSES)
        mask = _draw_shape(SHAPE_CLASSES[label], size, rng)
        while not mask.any() or mask.all():
            mask = _draw_shape(SHAPE_CLASSES[label], size, rng)
        images[i] = mask
        labels[i] = label
    return LabeledSet(images, labels, list(SHAPE_CLASSES))


def split_scgs(n_train: int, n_test: int, size: int = 64, seed: int = 0):
    """Train/test SCGS sets from independent seeds; counts must be multiples of 5."""
    k = len(SHAPE_CLASSES)
    if n_train % k or n_test % k:
        raise DomainError(f"SCGS counts must be multiples of {k}")
    ss = np.random.SeedSequence(seed).spawn(2)
    train = gen_scgs(n_train // k, size, int(ss[0].generate_state(1)[0]))
    test = gen_scgs(n_test // k, size, int(ss[1].generate_state(1)[0]))
    return train, test


# -- structuring elements and pairs ------------------------------------------

def _cross5():
    w = np.zeros((5, 5))
    w[2, :] = w[:, 2] = 1.0
    return w


BUILTIN_SES = {
    "diamond3": lambda: StructuringElement([[0, 1, 0], [1, 1, 1], [0, 1, 0]], Form.PRODUCT, Kind.FLAT),
    "cross5": lambda: StructuringElement(_cross5(), Form.PRODUCT, Kind.FLAT),
    "hline5": lambda: StructuringElement(np.ones((1, 5)), Form.PRODUCT, Kind.FLAT),
    "square3": lambda: StructuringElement(np.ones((3, 3)), Form.PRODUCT, Kind.FLAT),
    # non-flat 3x3 grids used as ground truth for grayscale learning
    "gray3-dilate": lambda: StructuringElement(
        [[0.2060, 0.3234, 0.6542], [0.3551, 0.5692, 0.3950], [0.6405, 0.5834, 0.5104]], Form.ADDITIVE, Kind.NONFLAT),
    "gray3-erode": lambda: StructuringElement(
        [[0.8329, 0.4865, 0.9737], [0.0440, 0.8055, 0.1752], [0.6563, 0.5816, 0.0463]], Form.ADDITIVE, Kind.NONFLAT),
}


def builtin_se(name: str) -> StructuringElement:
    try:
        return BUILTIN_SES[name]()
    except KeyError:
        raise DomainError(f"unknown SE {name!r}; known: {sorted(BUILTIN_SES)}") from None


def make_pairs(images, ops) -> PairSet:
    """Targets are the hard morphology of each image under ``ops`` applied in order.

    ``ops`` is a sequence of ``(mode, se)`` where ``se`` is a
    :class:`StructuringElement` or a built-in SE name.
    """
    images = np.asarray(images, dtype=np.float64)
    if not ops:
        raise DomainError("make_pairs needs at least one operation")
    resolved = []
    for mode, se in ops:
        name = se if isinstance(se, str) else f"custom{se.weights.shape}"
        se = builtin_se(se) if isinstance(se, str) else se
        if se.weights.shape[0] > images.shape[1] or se.weights.shape[1] > images.shape[2]:
            raise DomainError(f"SE {se.weights.shape} larger than images {images.shape[1:]}")
        resolved.append((MorphMode(mode), se, name))
    targets = np.empty_like(images)
    for i, img in enumerate(images):
        out = img
        for mode, se, _ in resolved:
            out = hard_morph(out, se, mode)
        targets[i] = out
    return PairSet(images, targets, [(m.value, n) for m, _, n in resolved])


# -- PGM ----------------------------------------------------------------------

def write_pgm(img, path) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DomainError("PGM needs a 2-D image")
    if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
        raise DomainError("PGM pixels must lie in [0, 1]")
    data = np.floor(img * 255 + 0.5).astype(np.uint8)
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii") + data.tobytes())


def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("PGM header truncated", pos)
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def read_pgm(path, strict: bool = True) -> np.ndarray:
    """Read a binary (P5) PGM into [0, 1].  ``strict`` requires maxval 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise ParseError(f"not a binary PGM (magic {magic!r})", 0)
    try:
        cols, rows, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ParseError("non-numeric PGM header field", pos) from None
    if strict and maxval != 255:
        raise ParseError(f"maxval {maxval}, expected 255", pos)
    if not 0 < maxval < 256 or cols < 1 or rows < 1:
        raise ParseError(f"unsupported PGM header {cols}x{rows} maxval {maxval}", pos)
    if len(data) < pos + rows * cols:
        raise ParseError(f"PGM payload truncated: need {rows * cols} bytes, have {len(data) - pos}", len(data))
    px = np.frombuffer(data, dtype=np.uint8, count=rows * cols, offset=pos)
    return px.reshape(rows, cols) / float(maxval)


# -- SE JSON --------------------------------------------------------------------

def se_to_dict(se: StructuringElement) -> dict:
    rows, cols = se.weights.shape
    return {"rows": rows, "cols": cols, "values": [float(v) for v in se.weights.ravel()],
            "form": se.form.value, "kind": se.kind.value}


def se_from_dict(d: dict) -> StructuringElement:
    rows, cols, values = int(d["rows"]), int(d["cols"]), list(d["values"])
    if len(values) != rows * cols:
        raise DomainError(f"{len(values)} values for a {rows}x{cols} SE")
    return StructuringElement(np.array(values, dtype=np.float64).reshape(rows, cols),
                              d.get("form", "product"), d.get("kind", "flat"))


def export_se_json(se: StructuringElement, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(se_to_dict(se), fh)


def import_se_json(path) -> StructuringElement:
    with open(path, encoding="utf-8") as fh:
        return se_from_dict(json.load(fh))


# -- labels CSV and image directories ---------------------------------------------

def write_labels_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for name, label in rows:
            w.writerow([name, int(label)])


def read_labels_csv(path) -> list[tuple[str, int]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [(r[0], int(r[1])) for r in csv.reader(fh) if r]


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path, strict=False)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_image_dir(directory, labels_csv=None) -> LabeledSet:
    """Grayscale images listed in ``labels.csv`` (``filename,label``); all must share one size."""
    directory = Path(directory)
    rows = read_labels_csv(labels_csv or directory / "labels.csv")
    images = [read_image(directory / name) for name, _ in rows]
    if len({im.shape for im in images}) > 1:
        raise DomainError("images in the directory differ in size")
    labels = np.array([lab for _, lab in rows], dtype=np.int64)
    names = [str(i) for i in range(int(labels.max(initial=0)) + 1)]
    return LabeledSet(np.stack(images), labels, names)


def save_image_dir(ds: LabeledSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        name = f"{i:06d}.pgm"
        write_pgm(img, directory / name)
        rows.append((name, lab))
    write_labels_csv(rows, directory / "labels.csv")
