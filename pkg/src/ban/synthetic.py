"""Synthetic shapes dataset: generation, PPM image I/O, and loading.

Images are flat-shaded circles, squares, and triangles on a noisy gray
background.  All geometry is integer arithmetic and every random draw
comes from the package's own generator, so a seed produces identical
bytes on any platform.  Images are PPM P6 (maxval 255); annotations and
the manifest are plain CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError
from .geometry import Box, iou
from .rng import XorShift64Star, derive_seed

CLASS_NAMES = ("circle", "square", "triangle")
CLASS_COLORS = ((220, 70, 60), (70, 200, 80), (70, 90, 220))
BACKGROUND_LEVEL = 96
PLACEMENT_TRIES = 40  # placements overlapping > 0.5 IoU are re-drawn


@dataclass(frozen=True)
class SyntheticSpec:
    """Dataset shape: image count and size, classes, object statistics."""

    num_images: int = 100
    image_size: tuple = (128, 128)
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 16
    max_size: int = 48
    noise: int = 12
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if self.num_images < 1:
            raise ConfigError("num_images must be >= 1")
        w, h = self.image_size
        if w < 16 or h < 16:
            raise ConfigError("image_size must be at least 16x16")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if not 4 <= self.min_size <= self.max_size <= min(w, h):
            raise ConfigError("need 4 <= min_size <= max_size <= image side")
        if self.noise < 0 or self.noise > 127:
            raise ConfigError("noise amplitude must be in [0, 127]")


def _draw_square(pixels, x1, y1, s, color):
    pixels[y1 : y1 + s, x1 : x1 + s] = color


def _draw_circle(pixels, x1, y1, s, color):
    # doubled pixel-center coordinates keep the inside test integer-exact
    c2x = 2 * x1 + s
    c2y = 2 * y1 + s
    for y in range(y1, y1 + s):
        dy = 2 * y + 1 - c2y
        for x in range(x1, x1 + s):
            dx = 2 * x + 1 - c2x
            if dx * dx + dy * dy <= s * s:
                pixels[y, x] = color


def _draw_triangle(pixels, x1, y1, s, color):
    """Isoceles triangle: apex on the top edge, base along the bottom."""
    top = s - 1
    cxl = x1 + (s - 1) // 2
    cxr = x1 + s // 2
    for y in range(y1, y1 + s):
        t = y - y1
        if top == 0:
            lo, hi = x1, x1 + s - 1
        else:
            lo = cxl - (t * (cxl - x1)) // top
            hi = cxr + (t * (x1 + s - 1 - cxr)) // top
        pixels[y, lo : hi + 1] = color


_DRAWERS = (_draw_circle, _draw_square, _draw_triangle)


def render_image(spec: SyntheticSpec, index: int):
    """Pixels [H,W,3] uint8 plus ground-truth (class_id, Box) pairs."""
    if not 0 <= index < spec.num_images:
        raise ConfigError(f"image index {index} outside [0, {spec.num_images})")
    gen = XorShift64Star(derive_seed(spec.rng_seed, "image", index))
    width, height = spec.image_size
    pixels = np.full((height, width, 3), BACKGROUND_LEVEL, dtype=np.int16)

    count = spec.min_objects + gen.randint(spec.max_objects - spec.min_objects + 1)
    gts = []
    placements = []
    for _ in range(count):
        cls_id = 1 + gen.randint(spec.num_classes)
        for _ in range(PLACEMENT_TRIES):
            s = spec.min_size + gen.randint(spec.max_size - spec.min_size + 1)
            x1 = gen.randint(width - s + 1)
            y1 = gen.randint(height - s + 1)
            box = Box.from_corners(x1, y1, x1 + s, y1 + s)
            if all(iou(box, other) <= 0.5 for _, other in gts):
                gts.append((cls_id, box))
                placements.append((cls_id, x1, y1, s))
                break

    if spec.noise > 0:
        span = 2 * spec.noise + 1
        for y in range(height):
            for x in range(width):
                pixels[y, x] += gen.randint(span) - spec.noise
        np.clip(pixels, 0, 255, out=pixels)

    for cls_id, x1, y1, s in placements:
        _DRAWERS[cls_id - 1](pixels, x1, y1, s, CLASS_COLORS[cls_id - 1])
    return pixels.astype(np.uint8), gts


def write_ppm(path, pixels: np.ndarray) -> None:
    """Binary PPM, maxval 255."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ConfigError(f"write_ppm needs uint8 [H,W,3], got {arr.shape} {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments running to end of line
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ConfigError(f"truncated PPM header in {path}")
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ConfigError(f"{path} is not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ConfigError(f"unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ConfigError(f"truncated PPM pixel data in {path}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


@dataclass
class ImageRecord:
    """One loaded dataset image with its ground truth."""

    image_id: str
    pixels: np.ndarray  # [H, W, 3] uint8
    gts: list  # (class_id, Box) pairs

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def as_input(self) -> np.ndarray:
        """Normalized [1, 3, H, W] float input for the backbone."""
        chw = self.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0
        return chw[None]


def _image_id(index: int) -> str:
    return f"img_{index:05d}"


def generate_dataset(spec: SyntheticSpec, out_dir) -> Path:
    """Write images, annotations.csv, and manifest.csv; return the manifest.

    The manifest has one headerless line per image:
    image_id,filename,width,height.  Annotations carry pixel corner
    coordinates, one object per line.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width, height = spec.image_size
    manifest_path = out / "manifest.csv"
    with (
        open(out / "annotations.csv", "w", newline="") as ann_fh,
        open(manifest_path, "w", newline="") as man_fh,
    ):
        ann = csv.writer(ann_fh)
        ann.writerow(["image_id", "class_id", "x1", "y1", "x2", "y2"])
        man = csv.writer(man_fh)
        for i in range(spec.num_images):
            image_id = _image_id(i)
            filename = f"{image_id}.ppm"
            pixels, gts = render_image(spec, i)
            write_ppm(out / filename, pixels)
            for cls_id, box in gts:
                x1, y1, x2, y2 = box.corners()
                ann.writerow(
                    [image_id, cls_id, int(x1), int(y1), int(x2), int(y2)]
                )
            man.writerow([image_id, filename, width, height])
    return manifest_path


def load_dataset(directory) -> list[ImageRecord]:
    """Read a generated dataset back, in manifest order."""
    root = Path(directory)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise ConfigError(f"no manifest.csv under {root}")
    gts_by_image: dict[str, list] = {}
    with open(root / "annotations.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["image_id", "class_id"]:
            raise ConfigError("unrecognized annotations.csv header")
        for image_id, cls_id, x1, y1, x2, y2 in reader:
            try:
                box = Box.from_corners(float(x1), float(y1), float(x2), float(y2))
            except GeometryError as exc:
                raise ConfigError(f"bad annotation for {image_id}: {exc}") from exc
            gts_by_image.setdefault(image_id, []).append((int(cls_id), box))
    records = []
    with open(manifest, newline="") as fh:
        for image_id, filename, width, height in csv.reader(fh):
            pixels = read_ppm(root / filename)
            if pixels.shape[:2] != (int(height), int(width)):
                raise ConfigError(f"{filename} does not match manifest extents")
            records.append(
                ImageRecord(image_id, pixels, gts_by_image.get(image_id, []))
            )
    return records
