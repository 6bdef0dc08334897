"""Sequence ingestion, binary pixmap IO, and the synthetic benchmark generator.

On-disk layout of a sequence (the common benchmark convention):

    <sequence>/
      groundtruth_rect.txt    one "x,y,w,h" line per frame, top-left corner
      img/0001.ppm            numbered frames, P6 (color) or P5 (gray)
      img/0002.ppm
      ...

Pixel values are scaled to [0, 1] float32 on load; grayscale images are
replicated to three channels.  All generators are deterministic under a
fixed seed.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolationError, DataFormatError
from .geometry import BoundingBox

_SPLIT = re.compile(r"[,\t ]+")


# ---------------------------------------------------------------------------
# Portable pixmap IO
# ---------------------------------------------------------------------------

def _read_pnm_tokens(data: bytes, count: int, offset: int):
    """Read `count` whitespace/comment separated ASCII tokens after offset."""
    tokens = []
    i = offset
    while len(tokens) < count:
        if i >= len(data):
            raise DataFormatError("truncated header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # single whitespace byte separates header from raster


def load_image(path) -> np.ndarray:
    """Decode a binary P6 pixmap or P5 graymap into an HxWx3 float32 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read image {path}: {exc}") from exc
    if len(data) < 2:
        raise DataFormatError(f"{path}: file too short for a pixmap header")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: unsupported magic number {magic!r}")
    try:
        tokens, raster_at = _read_pnm_tokens(data, 3, 2)
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    width, height, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval > 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    raster = data[raster_at : raster_at + expected]
    if len(raster) != expected:
        raise DataFormatError(
            f"{path}: truncated raster, expected {expected} bytes, got {len(raster)}"
        )
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    img = img.astype(np.float32) / float(maxval)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def save_image(path, image: np.ndarray) -> None:
    """Write an HxWx3 array with values in [0, 1] as a binary P6 pixmap."""
    path = Path(path)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractViolationError(f"expected HxWx3 image, got shape {image.shape}")
    raster = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(raster.tobytes())


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------

@dataclass
class Sequence:
    """Ordered frames plus ground-truth boxes (first frame always annotated)."""

    name: str
    frame_paths: list
    boxes: list          # BoundingBox per annotated frame; len 1 in tracking-only mode
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.frame_paths)

    def frame(self, index: int) -> np.ndarray:
        if index not in self._cache:
            self._cache[index] = load_image(self.frame_paths[index])
        return self._cache[index]

    @property
    def fully_annotated(self) -> bool:
        return len(self.boxes) == len(self.frame_paths)


def parse_annotation_line(line: str) -> BoundingBox:
    parts = [p for p in _SPLIT.split(line.strip()) if p]
    if len(parts) != 4:
        raise DataFormatError(f"annotation line {line!r} does not have four fields")
    x, y, w, h = (float(p) for p in parts)
    return BoundingBox.from_topleft(x, y, w, h)


def load_sequence(directory) -> Sequence:
    directory = Path(directory)
    gt_path = directory / "groundtruth_rect.txt"
    img_dir = directory / "img"
    if not gt_path.exists():
        raise DataFormatError(f"{directory}: missing groundtruth_rect.txt")
    if not img_dir.is_dir():
        raise DataFormatError(f"{directory}: missing img/ directory")
    frames = sorted(p for p in img_dir.iterdir() if p.suffix in (".ppm", ".pgm"))
    if not frames:
        raise DataFormatError(f"{directory}: no .ppm/.pgm frames in img/")
    lines = [l for l in gt_path.read_text().splitlines() if l.strip()]
    if not lines:
        raise DataFormatError(f"{directory}: empty annotation file")
    boxes = [parse_annotation_line(l) for l in lines]
    if len(boxes) not in (1, len(frames)):
        raise DataFormatError(
            f"{directory}: {len(boxes)} annotation lines for {len(frames)} frames "
            "(expected one per frame, or a single first-frame line)"
        )
    return Sequence(name=directory.name, frame_paths=frames, boxes=boxes)


def load_dataset(root) -> list:
    """Load every sequence directory under `root`, sorted by name."""
    root = Path(root)
    sequences = []
    for child in sorted(root.iterdir()):
        if child.is_dir() and (child / "groundtruth_rect.txt").exists():
            sequences.append(load_sequence(child))
    if not sequences:
        raise DataFormatError(f"{root}: no sequence directories found")
    return sequences


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

SHAPE_CLASSES = ("disk", "square", "triangle", "ring")


@dataclass
class SyntheticSpec:
    """Description of one generated sequence."""

    name: str
    canvas: int = 200
    frames: int = 60
    shape: str = "disk"
    color: tuple = (0.9, 0.3, 0.2)
    size: float = 30.0                 # bounding-box side of the shape
    start: tuple = (60.0, 60.0)        # initial center
    velocity: tuple = (1.5, 0.8)       # px per frame
    sine_amplitude: float = 0.0        # optional perpendicular wobble
    sine_period: float = 20.0
    scale_drift: float = 1.0           # per-frame multiplicative size change
    color_drift: float = 0.0           # per-frame additive hue rotation of the target
    clutter: int = 0
    palette: tuple = ((0.2, 0.6, 0.9), (0.3, 0.8, 0.3), (0.9, 0.8, 0.2))
    noise: float = 0.0
    background: tuple = (0.55, 0.55, 0.55)
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPE_CLASSES:
            raise ContractViolationError(
                f"unknown shape {self.shape!r}, expected one of {SHAPE_CLASSES}"
            )
        if self.frames < 1 or self.canvas < 16 or self.size <= 2:
            raise ContractViolationError("degenerate synthetic spec")

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ContractViolationError(f"unknown synthetic spec fields: {sorted(unknown)}")
        coerced = dict(raw)
        for key in ("color", "start", "velocity", "background"):
            if key in coerced:
                coerced[key] = tuple(coerced[key])
        if "palette" in coerced:
            coerced["palette"] = tuple(tuple(c) for c in coerced["palette"])
        return cls(**coerced)


def _trajectory(spec: SyntheticSpec):
    """Per-frame (center, size); raises if the 50%-inside rule would break."""
    centers = []
    sizes = []
    cx, cy = spec.start
    size = spec.size
    for t in range(spec.frames):
        wobble = spec.sine_amplitude * np.sin(2 * np.pi * t / spec.sine_period) if spec.sine_amplitude else 0.0
        centers.append((cx, cy + wobble))
        sizes.append(size)
        cx += spec.velocity[0]
        cy += spec.velocity[1]
        size *= spec.scale_drift
    for (x, y), s in zip(centers, sizes):
        # at least half of the target box stays inside the canvas
        if not (0 <= x < spec.canvas and 0 <= y < spec.canvas):
            raise ContractViolationError(
                f"spec {spec.name!r}: target center leaves the canvas at ({x:.1f}, {y:.1f})"
            )
        if s > spec.canvas:
            raise ContractViolationError(f"spec {spec.name!r}: target outgrows the canvas")
    return centers, sizes


def _shape_mask(shape: str, canvas: int, cx: float, cy: float, size: float) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    dx = xx - cx + 0.5
    dy = yy - cy + 0.5
    half = size / 2.0
    if shape == "disk":
        return dx * dx + dy * dy <= half * half
    if shape == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= half * half) & (r2 >= (0.55 * half) ** 2)
    if shape == "triangle":
        # upward triangle inscribed in the box
        inside_y = (dy >= -half) & (dy <= half)
        frac = (dy + half) / size  # 0 at apex row, 1 at base
        return inside_y & (np.abs(dx) <= frac * half)
    raise ContractViolationError(f"unknown shape {shape!r}")


def _rotate_color(color: np.ndarray, angle: float) -> np.ndarray:
    """Cheap hue-like rotation: cyclically blend the three channels."""
    c = np.cos(angle)
    s = np.sin(angle)
    one_third = 1.0 / 3.0
    m = np.full((3, 3), one_third * (1.0 - c)) + np.eye(3) * c
    m += s * (np.roll(np.eye(3), 1, axis=1) - np.roll(np.eye(3), -1, axis=1)) / np.sqrt(3)
    return np.clip(m @ color, 0.0, 1.0)


def render_frame(spec: SyntheticSpec, index: int, centers, sizes, clutter_items, rng) -> np.ndarray:
    canvas = np.empty((spec.canvas, spec.canvas, 3), dtype=np.float32)
    canvas[:] = np.asarray(spec.background, dtype=np.float32)
    for shape, color, (ccx, ccy), csize in clutter_items:
        mask = _shape_mask(shape, spec.canvas, ccx, ccy, csize)
        canvas[mask] = np.asarray(color, dtype=np.float32)
    cx, cy = centers[index]
    color = np.asarray(spec.color, dtype=np.float64)
    if spec.color_drift:
        color = _rotate_color(color, spec.color_drift * index)
    mask = _shape_mask(spec.shape, spec.canvas, cx, cy, sizes[index])
    canvas[mask] = color.astype(np.float32)
    if spec.noise > 0:
        canvas += rng.uniform(-spec.noise, spec.noise, canvas.shape).astype(np.float32)
        np.clip(canvas, 0.0, 1.0, out=canvas)
    return canvas


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Render a full sequence to disk; returns the sequence directory."""
    out_dir = Path(out_dir)
    seq_dir = out_dir / spec.name
    (seq_dir / "img").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    centers, sizes = _trajectory(spec)
    clutter_items = []
    for _ in range(spec.clutter):
        shape = SHAPE_CLASSES[int(rng.integers(len(SHAPE_CLASSES)))]
        color = spec.palette[int(rng.integers(len(spec.palette)))]
        pos = (float(rng.uniform(0.1, 0.9) * spec.canvas), float(rng.uniform(0.1, 0.9) * spec.canvas))
        size = float(rng.uniform(0.5, 1.3) * spec.size)
        clutter_items.append((shape, color, pos, size))
    lines = []
    for t in range(spec.frames):
        frame = render_frame(spec, t, centers, sizes, clutter_items, rng)
        save_image(seq_dir / "img" / f"{t + 1:04d}.ppm", frame)
        box = BoundingBox(centers[t][0], centers[t][1], sizes[t], sizes[t])
        x, y, w, h = box.to_topleft()
        lines.append(f"{x:.4f},{y:.4f},{w:.4f},{h:.4f}")
    (seq_dir / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    return seq_dir


# Per-class color families: classes are separable in color+shape statistics
# jointly, but the wide jitter and brightness variation keep color alone an
# unreliable cue, so the trained features must also respond to shape.
_CLASS_COLOR_BASE = {
    "disk": (0.8, 0.3, 0.25),
    "square": (0.3, 0.7, 0.35),
    "triangle": (0.3, 0.45, 0.8),
    "ring": (0.8, 0.7, 0.3),
}


def generate_classification_set(out_dir, count_per_class: int, image_size: int, seed: int) -> Path:
    """Labeled single-shape images for classifier pretraining.

    Layout: <out>/<class>/0001.ppm ...  Each class couples a shape with a
    jittered color family; size, position, brightness, background, and
    noise vary freely.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    for cls in SHAPE_CLASSES:
        cls_dir = out_dir / cls
        cls_dir.mkdir(parents=True, exist_ok=True)
        base = np.asarray(_CLASS_COLOR_BASE[cls])
        for i in range(count_per_class):
            canvas = np.empty((image_size, image_size, 3), dtype=np.float32)
            canvas[:] = rng.uniform(0.35, 0.7, 3).astype(np.float32)
            brightness = rng.uniform(0.85, 1.15)
            color = np.clip((base + rng.uniform(-0.18, 0.18, 3)) * brightness, 0.0, 1.0)
            size = float(rng.uniform(0.35, 0.6) * image_size)
            cx = image_size / 2 + float(rng.uniform(-0.08, 0.08) * image_size)
            cy = image_size / 2 + float(rng.uniform(-0.08, 0.08) * image_size)
            mask = _shape_mask(cls, image_size, cx, cy, size)
            canvas[mask] = color.astype(np.float32)
            canvas += rng.uniform(-0.02, 0.02, canvas.shape).astype(np.float32)
            np.clip(canvas, 0.0, 1.0, out=canvas)
            save_image(cls_dir / f"{i + 1:04d}.ppm", canvas)
    return out_dir


def load_classification_set(root) -> tuple:
    """Return (images list, labels list, class names) from a class-dir layout."""
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise ContractViolationError(
            f"classification set needs at least 2 classes, found {len(classes)}"
        )
    images, labels = [], []
    for label, cls in enumerate(classes):
        for img_path in sorted((root / cls).iterdir()):
            images.append(load_image(img_path))
            labels.append(label)
    return images, np.array(labels), classes


# ---------------------------------------------------------------------------
# Response-map dumps
# ---------------------------------------------------------------------------

RESPONSE_MAGIC = b"DSRESPMP"


def save_response_dump(maps: list, path) -> None:
    """Binary per-frame response dump.

    Format: 8-byte magic, u32 little-endian header length, JSON header
    {"version", "frames", "height", "width", "dtype", "endianness"},
    then frames * height * width little-endian float32 values.
    """
    import struct

    if not maps:
        raise ContractViolationError("response dump needs at least one map")
    h, w = maps[0].shape
    header = {
        "version": 1, "frames": len(maps), "height": int(h), "width": int(w),
        "dtype": "float32", "endianness": "little",
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(RESPONSE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for m in maps:
            if m.shape != (h, w):
                raise ContractViolationError("all response maps must share a shape")
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_response_dump(path) -> list:
    import struct

    data = Path(path).read_bytes()
    if data[: len(RESPONSE_MAGIC)] != RESPONSE_MAGIC:
        raise DataFormatError(f"{path}: not a response dump (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, len(RESPONSE_MAGIC))
    start = len(RESPONSE_MAGIC) + 4
    header = json.loads(data[start : start + hlen].decode())
    h, w, n = header["height"], header["width"], header["frames"]
    offset = start + hlen
    maps = []
    for _ in range(n):
        nbytes = h * w * 4
        block = data[offset : offset + nbytes]
        if len(block) != nbytes:
            raise DataFormatError(f"{path}: truncated response block")
        maps.append(np.frombuffer(block, dtype="<f4").reshape(h, w).copy())
        offset += nbytes
    return maps


# ---------------------------------------------------------------------------
# Benchmark presets
# ---------------------------------------------------------------------------

def _family_color(shape: str, rng) -> tuple:
    """Target color drawn near the shape's class family (as in pretraining)."""
    base = np.asarray(_CLASS_COLOR_BASE[shape])
    color = np.clip((base + rng.uniform(-0.15, 0.15, 3)) * rng.uniform(0.9, 1.1), 0.05, 1.0)
    return tuple(color.round(3))


def benchmark_specs(n_sequences: int = 20, frames: int = 60, seed: int = 7, canvas: int = 200) -> list:
    """Fixed-seed family of tracking sequences with varied difficulty axes."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_sequences):
        shape = SHAPE_CLASSES[i % len(SHAPE_CLASSES)]
        size = float(rng.uniform(26, 40))
        speed = rng.uniform(0.8, 2.2)
        angle = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * np.cos(angle), speed * np.sin(angle)
        margin = size * 0.8 + 10
        # start in the half of the canvas the motion moves away from
        start_x = canvas / 2 - vx * frames / 2
        start_y = canvas / 2 - vy * frames / 2
        start_x = float(np.clip(start_x, margin, canvas - margin))
        start_y = float(np.clip(start_y, margin, canvas - margin))
        specs.append(
            SyntheticSpec(
                name=f"seq{i:02d}",
                canvas=canvas,
                frames=frames,
                shape=shape,
                color=_family_color(shape, rng),
                size=size,
                start=(start_x, start_y),
                velocity=(float(vx), float(vy)),
                sine_amplitude=float(rng.uniform(0, 4)) if i % 3 == 0 else 0.0,
                sine_period=float(rng.uniform(15, 30)),
                scale_drift=1.004 if i % 4 == 2 else 1.0,
                color_drift=0.02 if i % 2 == 1 else 0.0,
                clutter=int(rng.integers(2, 5)),
                noise=0.02,
                seed=int(rng.integers(0, 2**31)),
            )
        )
    return specs


def training_specs(n_tracklets: int = 24, frames: int = 12, seed: int = 11, canvas: int = 200) -> list:
    """Tracklets for offline pair sampling; disjoint seed stream from the benchmark."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_tracklets):
        shape = SHAPE_CLASSES[int(rng.integers(len(SHAPE_CLASSES)))]
        size = float(rng.uniform(24, 42))
        speed = rng.uniform(0.5, 2.5)
        angle = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * np.cos(angle), speed * np.sin(angle)
        margin = size * 0.8 + 8
        start_x = float(np.clip(canvas / 2 - vx * frames / 2 + rng.uniform(-30, 30), margin, canvas - margin))
        start_y = float(np.clip(canvas / 2 - vy * frames / 2 + rng.uniform(-30, 30), margin, canvas - margin))
        specs.append(
            SyntheticSpec(
                name=f"train{i:03d}",
                canvas=canvas,
                frames=frames,
                shape=shape,
                color=_family_color(shape, rng),
                size=size,
                start=(start_x, start_y),
                velocity=(float(vx), float(vy)),
                color_drift=0.015 if i % 3 == 0 else 0.0,
                clutter=int(rng.integers(1, 4)),
                noise=0.02,
                seed=int(rng.integers(0, 2**31)),
            )
        )
    return specs


def write_spec_file(specs: list, path) -> None:
    payload = {"sequences": [spec.__dict__ for spec in specs]}
    Path(path).write_text(json.dumps(payload, indent=2, default=list))


def read_spec_file(path) -> list:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot parse spec file {path}: {exc}") from exc
    if isinstance(payload, dict) and "sequences" in payload:
        raw_list = payload["sequences"]
    elif isinstance(payload, dict):
        raw_list = [payload]
    else:
        raw_list = payload
    return [SyntheticSpec.from_dict(raw) for raw in raw_list]
