"""Procedural four-category sky scenes, PPM/PGM I/O and augmentation.

Categories: 0 background (blue sky), 1 white cloud, 2 gray cloud, 3 sun.
Label priority where generators overlap is sun > gray > white > background.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

BACKGROUND, WHITE, GRAY, SUN = 0, 1, 2, 3


class FormatError(ValueError):
    """Malformed PPM/PGM data; ``offset`` is the byte position of the problem."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


@dataclass
class SceneSample:
    image: np.ndarray  # 3 x H x W float in [0, 1]
    labels: np.ndarray  # H x W uint8 in 0..3

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be 3 x H x W, got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ValueError(f"labels {self.labels.shape} do not match image {self.image.shape}")


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    sun_probability: float = 0.5
    white_blobs: tuple[int, int] = (0, 3)
    gray_blobs: tuple[int, int] = (0, 2)
    octaves: int = 3

    def __post_init__(self):
        if self.size <= 0 or self.size % 16:
            raise ValueError(f"scene size must be a positive multiple of 16, got {self.size}")


def _value_noise(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    """Sum of bilinearly upsampled random lattices, normalized to [0, 1]."""
    total = np.zeros((size, size))
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        lattice = rng.uniform(size=(cells + 1, cells + 1))
        coords = np.linspace(0, cells, size, endpoint=False)
        i0 = np.floor(coords).astype(int)
        t = coords - i0
        t = t * t * (3 - 2 * t)
        rows = lattice[i0] * (1 - t)[:, None] + lattice[i0 + 1] * t[:, None]
        layer = rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]
        total += amp * layer
        norm += amp
        amp *= 0.5
    return total / norm


def _blob_alpha(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    """Soft cloud mask: an elliptical envelope modulated by value noise."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    cy, cx = rng.uniform(0.1, 0.9, size=2)
    ry, rx = rng.uniform(0.12, 0.35, size=2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
    envelope = np.clip(1.2 - np.sqrt(u * u + v * v), 0, None)
    noise = _value_noise(rng, size, octaves)
    raw = envelope * (0.6 + 0.8 * noise)
    return np.clip((raw - 0.25) * 3.0, 0, 1)


def generate_scene(cfg: SceneConfig = SceneConfig(), seed: int = 0) -> SceneSample:
    rng = np.random.default_rng(seed)
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n] / n
    labels = np.zeros((n, n), dtype=np.uint8)

    # sky: vertical blue gradient, darker at the top
    top = np.array([0.16, 0.32, 0.72]) + rng.uniform(-0.04, 0.04, 3)
    bottom = np.array([0.50, 0.66, 0.92]) + rng.uniform(-0.04, 0.04, 3)
    image = top[:, None, None] * (1 - yy)[None] + bottom[:, None, None] * yy[None]

    # sun: saturated disk with a radial halo
    sun_mask = np.zeros((n, n), dtype=bool)
    if rng.uniform() < cfg.sun_probability:
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.05, 0.10)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        halo = np.exp(-np.maximum(d - r, 0) / (1.6 * r))
        image = image + (np.array([1.0, 0.95, 0.75])[:, None, None] - image) * (0.7 * halo)[None]
        sun_mask = d <= r

    # clouds: white (near-white, textured) then gray (darker albedo, dark base)
    white = np.zeros((n, n), dtype=bool)
    for _ in range(rng.integers(cfg.white_blobs[0], cfg.white_blobs[1] + 1)):
        alpha = _blob_alpha(rng, n, cfg.octaves)
        shade = 0.90 + 0.08 * _value_noise(rng, n, cfg.octaves)
        color = np.stack([shade, shade, shade + 0.02])
        image = image * (1 - alpha)[None] + color * alpha[None]
        white |= alpha > 0.5
    gray = np.zeros((n, n), dtype=bool)
    for _ in range(rng.integers(cfg.gray_blobs[0], cfg.gray_blobs[1] + 1)):
        alpha = _blob_alpha(rng, n, cfg.octaves)
        shade = 0.36 + 0.16 * _value_noise(rng, n, cfg.octaves) + 0.08 * (1 - yy)
        color = np.stack([shade, shade, shade + 0.04])
        image = image * (1 - alpha)[None] + color * alpha[None]
        white &= ~(alpha > 0.5)
        gray |= alpha > 0.5

    # the sun disk shines through everything painted before it
    image[:, sun_mask] = np.array([1.0, 1.0, 0.93])[:, None]

    labels[white] = WHITE
    labels[gray] = GRAY
    labels[sun_mask] = SUN
    image = image + rng.normal(0, 0.01, image.shape)
    return SceneSample(np.clip(image, 0, 1), labels)


# ----------------------------------------------------------------------------
# PPM / PGM


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse a binary netpbm header; returns (width, height, maxval, data offset)."""
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0)
    pos, fields, starts = 2, [], []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("expected a decimal header field", start)
        fields.append(int(buf[start:pos]))
        starts.append(start)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", pos)
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise FormatError(f"non-positive extent {w}x{h}", starts[0] if w <= 0 else starts[1])
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit maxval is supported, got {maxval}", starts[2])
    return w, h, maxval, pos + 1


def encode_ppm(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    if c != 3:
        raise ValueError("PPM images need 3 channels")
    q = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + np.moveaxis(q, 0, -1).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, maxval, off = _read_header(buf, b"P6")
    need = w * h * 3
    if len(buf) - off < need:
        raise FormatError(f"pixel data truncated: need {need} bytes, have {len(buf) - off}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3)
    return np.moveaxis(px, -1, 0).astype(np.float64) / maxval


def encode_pgm(labels: np.ndarray) -> bytes:
    h, w = labels.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(labels, dtype=np.uint8).tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    w, h, _, off = _read_header(buf, b"P5")
    need = w * h
    if len(buf) - off < need:
        raise FormatError(f"pixel data truncated: need {need} bytes, have {len(buf) - off}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w).copy()


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_pgm(path, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(labels))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# augmentation and splits

FLIP_PROBABILITY = 0.3


def rotate_flip(sample: SceneSample, quarter_turns: int, flip: bool) -> SceneSample:
    h, w = sample.labels.shape
    if h != w and quarter_turns % 2:
        raise ValueError(f"right-angle rotation needs a square image, got {h}x{w}")
    image = np.rot90(sample.image, quarter_turns, axes=(1, 2))
    labels = np.rot90(sample.labels, quarter_turns)
    if flip:
        image, labels = image[:, :, ::-1], labels[:, ::-1]
    return SceneSample(np.ascontiguousarray(image), np.ascontiguousarray(labels))


def augment(sample: SceneSample, rng: np.random.Generator, flip_p: float = FLIP_PROBABILITY) -> SceneSample:
    """Random right-angle rotation (uniform over 4) then horizontal flip with probability ``flip_p``."""
    h, w = sample.labels.shape
    if h != w:
        raise ValueError(f"right-angle rotation needs a square image, got {h}x{w}")
    k = int(rng.integers(4))
    flip = bool(rng.uniform() < flip_p)
    return rotate_flip(sample, k, flip)


def random_crop(sample: SceneSample, size: int, rng: np.random.Generator) -> SceneSample:
    h, w = sample.labels.shape
    if size >= h and size >= w:
        return sample
    y = int(rng.integers(h - size + 1))
    x = int(rng.integers(w - size + 1))
    return SceneSample(sample.image[:, y : y + size, x : x + size].copy(), sample.labels[y : y + size, x : x + size].copy())


def make_splits(n: int, seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    """Deterministic 70/15/15 shuffle split of range(n)."""
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n).tolist()
    n_train = int(round(0.70 * n))
    n_val = int(round(0.15 * n))
    return sorted(order[:n_train]), sorted(order[n_train : n_train + n_val]), sorted(order[n_train + n_val :])


# ----------------------------------------------------------------------------
# on-disk dataset

MANIFEST = "dataset.txt"


def write_dataset(out_dir, count: int, size: int = 64, seed: int = 0, cfg: SceneConfig | None = None,
                  split_assignment: list[str] | None = None) -> Path:
    """Generate ``count`` scenes into ``out_dir`` with a ``dataset.txt`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg or SceneConfig(), size=size)
    if split_assignment is None:
        train, val, test = make_splits(count, seed)
        split_assignment = [""] * count
        for name, idx in (("train", train), ("val", val), ("test", test)):
            for i in idx:
                split_assignment[i] = name
    lines = []
    for i in range(count):
        s = generate_scene(cfg, seed * 100003 + i)
        img, lab = f"scene_{i:05d}.ppm", f"scene_{i:05d}.pgm"
        write_ppm(out / img, s.image)
        write_pgm(out / lab, s.labels)
        lines.append(f"{img} {lab} {split_assignment[i]}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out / MANIFEST


def read_manifest(data_dir) -> list[tuple[Path, Path, str]]:
    root = Path(data_dir)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'image_path label_path split'")
        img, lab, split = parts
        entries.append((root / img, root / lab, split))
    return entries


def load_split(data_dir, split: str) -> list[SceneSample]:
    out = []
    for img, lab, s in read_manifest(data_dir):
        if s == split:
            out.append(SceneSample(read_ppm(img), read_pgm(lab)))
    return out


def batch_arrays(samples: list[SceneSample], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]).astype(dtype),
            np.stack([s.labels for s in samples]).astype(np.int64))
