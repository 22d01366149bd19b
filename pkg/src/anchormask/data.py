"""Sequences: VOT ground truth, synthetic moving squares, resizing and image files."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Box

IMAGE_SIZE = 224
LUMA = np.array([0.299, 0.587, 0.114])
ROLE_COLORS = {"gt": (0, 0, 255), "masked": (255, 0, 0), "plain": (0, 255, 0)}
IMAGE_SUFFIXES = (".pgm", ".ppm", ".jpg", ".jpeg", ".png", ".bmp")


class DataError(ValueError):
    """Malformed or missing input data."""


@dataclass
class Sequence:
    name: str
    frames: list  # uint8 arrays, 224x224 grayscale
    gt: np.ndarray  # (n, 4) boxes in resized coordinates
    original_size: tuple = (IMAGE_SIZE, IMAGE_SIZE)  # (width, height)

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 4)
        if len(self.frames) != len(self.gt):
            raise DataError(f"{self.name}: {len(self.frames)} frames but {len(self.gt)} ground-truth boxes")

    def __len__(self) -> int:
        return len(self.frames)

    def box(self, t: int) -> Box:
        return Box(*self.gt[t].tolist())


# --------------------------------------------------------------------------
# VOT annotations


def parse_vot_groundtruth(lines, original_size=(IMAGE_SIZE, IMAGE_SIZE), size: int = IMAGE_SIZE) -> list:
    """Convert VOT polygon (8 values) or rectangle (4 values: x, y, w, h) lines into boxes.

    Polygons are reduced to their axis-aligned min/max hull, then scaled from
    ``original_size`` (width, height) to ``size`` x ``size``.
    """
    ow, oh = original_size
    if ow <= 0 or oh <= 0:
        raise DataError(f"invalid original extent {original_size}")
    sx, sy = size / ow, size / oh
    boxes = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            vals = [float(v) for v in line.split(",")]
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric field in {line!r}") from None
        if not np.isfinite(vals).all():
            raise DataError(f"line {lineno}: non-finite value in {line!r}")
        if len(vals) == 8:
            xs, ys = vals[0::2], vals[1::2]
            x1, y1, x2, y2 = min(xs), min(ys), max(xs), max(ys)
        elif len(vals) == 4:
            x, y, w, h = vals
            if w < 0 or h < 0:
                raise DataError(f"line {lineno}: negative rectangle size in {line!r}")
            x1, y1, x2, y2 = x, y, x + w, y + h
        else:
            raise DataError(f"line {lineno}: expected 8 or 4 comma-separated values, got {len(vals)}")
        boxes.append(Box(x1 * sx, y1 * sy, x2 * sx, y2 * sy))
    return boxes


# --------------------------------------------------------------------------
# images


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3:
        return image[..., :3].astype(np.float64) @ LUMA
    return image.astype(np.float64)


def resize_frame(image: np.ndarray, size=(IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment; returns float64.

    ``size`` is (height, width).  Works on (H, W) and (H, W, C) arrays.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim < 2 or img.shape[0] == 0 or img.shape[1] == 0:
        raise DataError(f"cannot resize image of shape {img.shape}")
    h, w = img.shape[:2]
    th, tw = size
    if (h, w) == (th, tw):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, th)
    x0, x1, fx = axis(w, tw)
    extra = (slice(None),) + (None,) * (img.ndim - 2)
    fy, fx = fy[extra], fx[extra]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def read_image(path) -> np.ndarray:
    """Load an image as an array; binary PGM/PPM natively, other formats through Pillow."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing image {path}")
    if path.suffix.lower() in (".pgm", ".ppm"):
        return _read_pnm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im)


def _read_pnm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    if magic == b"P5":
        return np.frombuffer(data, np.uint8, w * h, pos).reshape(h, w).copy()
    if magic == b"P6":
        return np.frombuffer(data, np.uint8, w * h * 3, pos).reshape(h, w, 3).copy()
    if magic in (b"P2", b"P3"):
        vals = np.array(data[pos - 1:].split(), dtype=np.int64)
        shape = (h, w) if magic == b"P2" else (h, w, 3)
        return np.clip(np.rint(vals * 255 / maxval), 0, 255).astype(np.uint8).reshape(shape)
    raise DataError(f"{path}: unsupported image type {magic!r}")


def write_image(path, image: np.ndarray) -> None:
    """Binary PGM (2-D) or PPM (H, W, 3) with 8-bit samples."""
    img = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    magic = b"P5" if img.ndim == 2 else b"P6"
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        fh.write(img.tobytes())


def write_overlay(frame: np.ndarray, boxes, path) -> np.ndarray:
    """Draw 1-px outlines for ``(role, Box)`` pairs onto an RGB copy and save it as PPM.

    Roles: ``gt`` blue, ``masked`` red, ``plain`` green.  Boxes are clipped to
    the frame.  Returns the drawn image.
    """
    img = np.asarray(frame)
    rgb = np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img[..., :3].copy()
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    for role, box in boxes:
        color = ROLE_COLORS[role]
        x1, y1, x2, y2 = (int(round(v)) for v in box)
        x1, x2 = max(min(x1, x2), 0), min(max(x1, x2), w - 1)
        y1, y2 = max(min(y1, y2), 0), min(max(y1, y2), h - 1)
        if x1 > x2 or y1 > y2:
            continue
        rgb[y1, x1:x2 + 1] = color
        rgb[y2, x1:x2 + 1] = color
        rgb[y1:y2 + 1, x1] = color
        rgb[y1:y2 + 1, x2] = color
    try:
        write_image(path, rgb)
    except OSError as exc:
        raise DataError(f"cannot write overlay {path}: {exc}") from exc
    return rgb


# --------------------------------------------------------------------------
# VOT-layout directories


def _frame_files(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_vot_sequence(directory, size: int = IMAGE_SIZE) -> Sequence:
    """Read ``<dir>/groundtruth.txt`` plus numbered frames, resizing to ``size``."""
    directory = Path(directory)
    gt_path = directory / "groundtruth.txt"
    if not gt_path.exists():
        raise DataError(f"missing {gt_path}")
    files = _frame_files(directory)
    if not files:
        raise DataError(f"no frame images in {directory}")
    first = read_image(files[0])
    oh, ow = first.shape[:2]
    boxes = parse_vot_groundtruth(gt_path.read_text().splitlines(), (ow, oh), size)
    if len(boxes) != len(files):
        raise DataError(f"{directory}: {len(files)} frames but {len(boxes)} annotations")
    frames = []
    for f in files:
        g = to_gray(read_image(f))
        frames.append(np.clip(np.rint(resize_frame(g, (size, size))), 0, 255).astype(np.uint8))
    return Sequence(directory.name, frames, np.array(boxes), (ow, oh))


def save_sequence(seq: Sequence, directory) -> None:
    """Write a sequence in VOT layout with 8-value polygon ground truth."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for t, frame in enumerate(seq.frames):
        write_image(directory / f"{t + 1:08d}.pgm", frame)
        x1, y1, x2, y2 = seq.gt[t]
        lines.append(",".join(f"{v:.4f}" for v in (x1, y1, x2, y1, x2, y2, x1, y2)))
    (directory / "groundtruth.txt").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# synthetic sequences


@dataclass
class SynthSpec:
    seed: int = 0
    n_frames: int = 20
    image_size: int = IMAGE_SIZE
    target_size: tuple = (32.0, 32.0)  # (w, h)
    target_start: tuple | None = None  # centre; drawn from the seed when None
    target_velocity: tuple = (3.0, 2.0)  # px per frame
    target_intensity: float = 220.0
    distractors: int = 1
    distractor_size: tuple = (32.0, 32.0)
    distractor_speed: float = 3.0
    distractor_intensity: float = 190.0
    background: float = 40.0
    noise: float = 12.0
    reflect: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        d = json.loads(text)
        for key in ("target_size", "target_start", "target_velocity", "distractor_size"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def trajectory(start, velocity, size, extent, n_frames, reflect=True) -> np.ndarray:
    """Centres of a box moving linearly, bouncing off the frame edges.

    Without reflection a box leaving the frame raises :class:`DataError`.
    """
    pos = np.array(start, dtype=np.float64)
    vel = np.array(velocity, dtype=np.float64)
    half = np.array(size, dtype=np.float64) / 2
    lo, hi = half, extent - half
    if (pos < lo).any() or (pos > hi).any():
        raise DataError(f"box centred at {tuple(pos)} does not fit in the frame")
    out = [pos.copy()]
    for _ in range(n_frames - 1):
        pos = pos + vel
        for d in range(2):
            if pos[d] < lo[d] or pos[d] > hi[d]:
                if not reflect:
                    raise DataError("target leaves the image")
                pos[d] = 2 * lo[d] - pos[d] if pos[d] < lo[d] else 2 * hi[d] - pos[d]
                vel[d] = -vel[d]
        out.append(pos.copy())
    return np.array(out)


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    px = np.arange(n)
    return np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, 1.0)


def _paint(img: np.ndarray, box, value: float) -> None:
    cov = np.outer(_coverage(box[1], box[3], img.shape[0]), _coverage(box[0], box[2], img.shape[1]))
    img *= 1 - cov
    img += value * cov


def generate_synthetic(spec: SynthSpec, name: str | None = None) -> Sequence:
    """Bright square target plus dimmer distractor squares over a noisy dark background."""
    if spec.n_frames < 1:
        raise DataError("n_frames must be >= 1")
    n, ext = spec.n_frames, spec.image_size
    tw, th = spec.target_size
    if not (0 < tw < ext and 0 < th < ext):
        raise DataError(f"target size {spec.target_size} does not fit a {ext}px frame")
    if spec.distractors and spec.distractor_intensity >= spec.target_intensity:
        raise DataError("distractors must be dimmer than the target")
    rng = np.random.default_rng(spec.seed)
    start = spec.target_start
    if start is None:
        start = (rng.uniform(tw / 2, ext - tw / 2), rng.uniform(th / 2, ext - th / 2))
    centres = trajectory(start, spec.target_velocity, (tw, th), ext, n, spec.reflect)
    gt = np.column_stack([centres[:, 0] - tw / 2, centres[:, 1] - th / 2, centres[:, 0] + tw / 2, centres[:, 1] + th / 2])

    dw, dh = spec.distractor_size
    paths = []
    for _ in range(spec.distractors):
        d_start = (rng.uniform(dw / 2, ext - dw / 2), rng.uniform(dh / 2, ext - dh / 2))
        angle = rng.uniform(0, 2 * np.pi)
        d_vel = (spec.distractor_speed * np.cos(angle), spec.distractor_speed * np.sin(angle))
        c = trajectory(d_start, d_vel, (dw, dh), ext, n, True)
        paths.append(np.column_stack([c[:, 0] - dw / 2, c[:, 1] - dh / 2, c[:, 0] + dw / 2, c[:, 1] + dh / 2]))

    frames = []
    for t in range(n):
        img = spec.background + spec.noise * rng.standard_normal((ext, ext))
        for p in paths:
            _paint(img, p[t], spec.distractor_intensity)
        _paint(img, gt[t], spec.target_intensity)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    return Sequence(name or f"synth-{spec.seed}", frames, gt, (ext, ext))


@dataclass
class SuiteSpec:
    """Ranges from which per-sequence :class:`SynthSpec` values are drawn."""

    n_frames: int = 20
    distractors: int = 1
    side: tuple = (24.0, 44.0)
    speed: tuple = (1.0, 4.0)
    target_intensity: tuple = (150.0, 240.0)
    # distractor brightness as a fraction of the target's
    distractor_ratio: tuple = (0.9, 0.99)
    distractor_side_ratio: tuple = (0.85, 1.15)
    noise: float = 12.0
    background: float = 40.0
    extras: dict = field(default_factory=dict)


def synthetic_suite(seed: int, count: int, suite: SuiteSpec | None = None) -> list:
    """``count`` synthetic sequences fully determined by ``seed``."""
    suite = suite or SuiteSpec()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        side = rng.uniform(*suite.side)
        speed = rng.uniform(*suite.speed)
        angle = rng.uniform(0, 2 * np.pi)
        inten = rng.uniform(*suite.target_intensity)
        dside = side * rng.uniform(*suite.distractor_side_ratio)
        spec = SynthSpec(
            seed=int(rng.integers(2**31)),
            n_frames=suite.n_frames,
            target_size=(side, side),
            target_velocity=(speed * np.cos(angle), speed * np.sin(angle)),
            target_intensity=inten,
            distractors=suite.distractors,
            distractor_size=(dside, dside),
            distractor_speed=rng.uniform(*suite.speed),
            distractor_intensity=inten * rng.uniform(*suite.distractor_ratio),
            background=suite.background,
            noise=suite.noise,
            **suite.extras,
        )
        out.append(generate_synthetic(spec, name=f"synth-{seed}-{i:03d}"))
    return out
