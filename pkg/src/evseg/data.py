"""Bundled toy-shapes data: procedural moving-shape scenes, event synthesis,
and the on-disk dataset layout (sequences/<id>/{events.evt, frames/, timestamps.txt,
labels.png})."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .events import EventStream, FrameSequence, read_events, simulate_events, write_events

CLASS_NAMES = ("background", "circle", "square", "triangle")
# Mid-gray background matches the integrator's zero-accumulation level, and
# the shape intensities sit symmetrically around it, so faithful
# reconstructions land tonally close to the original frames while artifacts
# (ghosts, missing static shapes) stand out as dissimilar regions.
CLASS_INTENSITY = {"background": 0.50, "circle": 0.91, "square": 0.66, "triangle": 0.21}

# Synonym vocabulary for exercising the open-vocabulary path (disjoint names,
# same positional meaning as CLASS_NAMES).
SYNONYM_NAMES = ("backdrop", "disc", "box", "wedge")

_PALETTE = np.array([
    [40, 40, 40], [230, 80, 80], [80, 180, 90], [90, 110, 230], [230, 200, 70],
    [180, 90, 200], [90, 200, 210], [240, 140, 60], [150, 150, 150], [110, 70, 40],
    [200, 220, 240],
], dtype=np.uint8)


@dataclass(frozen=True)
class SynthesisOptions:
    sequences: int = 64
    test_sequences: int = 16
    frames: int = 8
    width: int = 64
    height: int = 64
    duration: float = 0.7
    contrast_threshold: float = 0.2
    eps: float = 1e-3
    min_shapes: int = 1
    max_shapes: int = 3
    supersample: int = 2
    # Static shapes emit no events, so they are invisible to the event branch
    # while fully visible to the image branch: locally unrecoverable
    # reconstruction error, the regime the trust-map reweighting targets.
    static_shape_fraction: float = 0.2

    def __post_init__(self):
        if self.sequences < 1:
            raise ConfigError("synthesize.sequences must be >= 1")
        if self.frames < 2:
            raise ConfigError("synthesize.frames must be >= 2")
        if self.min_shapes < 1 or self.max_shapes < self.min_shapes:
            raise ConfigError("invalid shape-count range")


@dataclass(frozen=True)
class Shape:
    kind: str          # circle | square | triangle
    cx: float
    cy: float
    size: float
    vx: float
    vy: float
    intensity: float


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    duration: float
    n_frames: int
    background: float
    shapes: tuple


def _inside(kind: str, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, s: float) -> np.ndarray:
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= s * s
    if kind == "square":
        return (np.abs(xs - cx) <= s) & (np.abs(ys - cy) <= s)
    # isoceles triangle: apex (cx, cy-s), base corners (cx -/+ s, cy+s)
    ax, ay = cx, cy - s
    bx, by = cx - s, cy + s
    qx, qy = cx + s, cy + s
    d1 = (xs - bx) * (ay - by) - (ys - by) * (ax - bx)
    d2 = (xs - qx) * (by - qy) - (ys - qy) * (bx - qx)
    d3 = (xs - ax) * (qy - ay) - (ys - ay) * (qx - ax)
    return (d1 <= 0) & (d2 <= 0) & (d3 <= 0) | (d1 >= 0) & (d2 >= 0) & (d3 >= 0)


def _paint(scene: Scene, xs: np.ndarray, ys: np.ndarray, t: float, labels: bool):
    if labels:
        canvas = np.zeros(xs.shape, dtype=np.int64)
    else:
        canvas = np.full(xs.shape, scene.background, dtype=np.float64)
    for shape in scene.shapes:
        mask = _inside(shape.kind, xs, ys, shape.cx + shape.vx * t, shape.cy + shape.vy * t,
                       shape.size)
        if labels:
            canvas[mask] = CLASS_NAMES.index(shape.kind)
        else:
            canvas[mask] = shape.intensity
    return canvas


def render_frame(scene: Scene, t: float, supersample: int = 2) -> np.ndarray:
    """Grayscale frame at time t, area-averaged over a supersampled grid."""
    ss = max(1, supersample)
    xs = (np.arange(scene.width * ss) + 0.5) / ss
    ys = (np.arange(scene.height * ss) + 0.5) / ss
    grid_x, grid_y = np.meshgrid(xs, ys)
    img = _paint(scene, grid_x, grid_y, t, labels=False)
    if ss > 1:
        img = img.reshape(scene.height, ss, scene.width, ss).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def render_labels(scene: Scene, t: float) -> np.ndarray:
    """Integer class labels at pixel centers (topmost shape wins)."""
    xs = np.arange(scene.width) + 0.5
    ys = np.arange(scene.height) + 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    return _paint(scene, grid_x, grid_y, t, labels=True)


def scene_frames(scene: Scene, supersample: int = 2) -> FrameSequence:
    times = np.linspace(0.0, scene.duration, scene.n_frames)
    frames = np.stack([render_frame(scene, t, supersample) for t in times])
    return FrameSequence(frames, times).validate()


def random_scene(rng: np.random.Generator, opts: SynthesisOptions) -> Scene:
    scale = min(opts.width, opts.height)
    n = int(rng.integers(opts.min_shapes, opts.max_shapes + 1))
    shapes = []
    for _ in range(n):
        kind = CLASS_NAMES[1 + int(rng.integers(0, 3))]
        size = float(rng.uniform(0.12, 0.18)) * scale
        # total displacement exceeds the shape diameter, so the signed event
        # integral exposes the filled shape at its final position (plus a
        # ghost of opposite sign near the start)
        speed = float(rng.uniform(2.0, 2.6)) * 2.0 * size / max(opts.duration, 1e-6)
        if rng.uniform() < opts.static_shape_fraction:
            # parked objects have no frame-exit constraint, so they can be big;
            # they are also exactly the regions events cannot reconstruct
            speed = 0.0
            size = min(size * float(rng.uniform(1.5, 2.2)), 0.3 * scale)
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        vx, vy = speed * np.cos(angle), speed * np.sin(angle)
        # anchor the final position inside the frame (labels are rendered at
        # the window end); the start-of-motion ghost may clip at the border
        ex = float(rng.uniform(0.30, 0.70)) * opts.width
        ey = float(rng.uniform(0.30, 0.70)) * opts.height
        cx = ex - vx * opts.duration
        cy = ey - vy * opts.duration
        intensity = CLASS_INTENSITY[kind] + float(rng.uniform(-0.05, 0.05))
        shapes.append(Shape(kind, cx, cy, size, float(vx), float(vy),
                            float(np.clip(intensity, 0.02, 0.98))))
    background = float(np.clip(CLASS_INTENSITY["background"] + rng.uniform(-0.03, 0.03), 0.02, 0.98))
    return Scene(opts.width, opts.height, opts.duration, opts.frames, background, tuple(shapes))


# --------------------------------------------------------------------------
# Dataset layout
# --------------------------------------------------------------------------


@dataclass
class Sample:
    stream: EventStream
    image: np.ndarray            # paired grayscale frame (end of window)
    labels: np.ndarray | None    # int64 H x W, indices into class_names
    seq_id: str


@dataclass
class ToyDataset:
    samples: list
    class_names: tuple

    def __len__(self):
        return len(self.samples)


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array, mode="L").save(path)


def _read_gray(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def write_sequence(seq_dir, stream: EventStream, frames: FrameSequence,
                   labels: np.ndarray | None) -> None:
    seq_dir = Path(seq_dir)
    (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
    write_events(stream, seq_dir / "events.evt")
    for i in range(len(frames)):
        quantized = np.round(frames.frames[i] * 255.0).astype(np.uint8)
        _write_png(seq_dir / "frames" / f"{i:04d}.png", quantized)
    (seq_dir / "timestamps.txt").write_text(
        "\n".join(repr(float(t)) for t in frames.timestamps) + "\n")
    if labels is not None:
        _write_png(seq_dir / "labels.png", labels.astype(np.uint8))


def read_sequence(seq_dir) -> Sample:
    seq_dir = Path(seq_dir)
    stream = read_events(seq_dir / "events.evt")
    frame_paths = sorted((seq_dir / "frames").glob("*.png"))
    if not frame_paths:
        raise ConfigError(f"sequence {seq_dir} has no frames")
    image = _read_gray(frame_paths[-1])
    labels = None
    label_path = seq_dir / "labels.png"
    if label_path.exists():
        labels = np.asarray(Image.open(label_path), dtype=np.int64)
    return Sample(stream, image, labels, seq_dir.name)


def _synthesize_split(split_dir: Path, count: int, opts: SynthesisOptions, seed: int,
                      tag: str) -> None:
    seq_root = split_dir / "sequences"
    seq_root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, hash32(tag), i])))
        scene = random_scene(rng, opts)
        frames = scene_frames(scene, opts.supersample)
        stream = simulate_events(frames, opts.contrast_threshold, opts.eps)
        labels = render_labels(scene, scene.duration)
        write_sequence(seq_root / f"{i:05d}", stream, frames, labels)
    (split_dir / "classes.txt").write_text("\n".join(CLASS_NAMES) + "\n")


def hash32(text: str) -> int:
    import zlib
    return zlib.crc32(text.encode("utf-8"))


def synthesize_dataset(out_dir, opts: SynthesisOptions, seed: int) -> dict:
    """Write train/ and test/ splits plus a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    _synthesize_split(out_dir / "train", opts.sequences, opts, seed, "train")
    if opts.test_sequences > 0:
        _synthesize_split(out_dir / "test", opts.test_sequences, opts, seed, "test")
    manifest = {
        "classes": list(CLASS_NAMES),
        "contrast_threshold": opts.contrast_threshold,
        "frames": opts.frames,
        "height": opts.height,
        "seed": seed,
        "sequences": opts.sequences,
        "test_sequences": opts.test_sequences,
        "width": opts.width,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def load_dataset(split_dir) -> ToyDataset:
    split_dir = Path(split_dir)
    seq_root = split_dir / "sequences"
    if not seq_root.is_dir():
        raise ConfigError(f"{split_dir} has no sequences/ directory")
    class_file = split_dir / "classes.txt"
    if class_file.exists():
        class_names = tuple(line.strip() for line in class_file.read_text().splitlines()
                            if line.strip())
    else:
        class_names = CLASS_NAMES
    samples = [read_sequence(seq_dir) for seq_dir in sorted(seq_root.iterdir()) if seq_dir.is_dir()]
    if not samples:
        raise ConfigError(f"{split_dir} contains no sequences")
    return ToyDataset(samples, class_names)


def save_overlay(path, gray: np.ndarray, hard: np.ndarray, num_classes: int) -> None:
    """Qualitative overlay: the reconstruction blended with class colors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    colors = _PALETTE[np.asarray(hard) % len(_PALETTE)]
    base = (np.clip(gray, 0.0, 1.0)[..., None] * 255.0)
    blend = (0.55 * base + 0.45 * colors).astype(np.uint8)
    Image.fromarray(blend, mode="RGB").save(path)
