"""DirectedMotion: a synthetic video task whose labels flip under frame reversal.

A bright square of side ``H // 8`` translates with a constant per-class velocity
and wraps at the borders.  Classes are (direction, speed) pairs; reversing a
clip gives a clip of the opposite direction at the same speed, so a single
frame never determines the label.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import dft
from .permutations import PermutationSpec

MANIFEST_HEADER = "DIRECTEDMOTION v1"

# (dy, dx) unit steps; index i and i ^ 1 are opposite directions.
DIRECTIONS = {"right": (0, 1), "left": (0, -1), "down": (1, 0), "up": (-1, 0)}
DIRECTION_NAMES = list(DIRECTIONS)
SPEEDS = {"slow": 1, "fast": 2}
SPEED_NAMES = list(SPEEDS)


@dataclass
class VideoClip:
    pixels: np.ndarray  # (T, H, W, C) in [0, 1]
    label: int
    permutation: PermutationSpec | None = None
    clip_id: int = -1


@dataclass(frozen=True)
class DatasetSpec:
    T: int = 8
    H: int = 32
    W: int = 32
    C: int = 1
    n_train: int = 2000
    n_val: int = 250
    n_test: int = 250
    noise: float = 0.05
    background: str = "blank"  # or "texture"
    seed: int = 0

    @property
    def classes(self) -> int:
        return len(DIRECTIONS) * len(SPEEDS)

    @property
    def square(self) -> int:
        return max(1, self.H // 8)

    def split_range(self, split: str) -> range:
        bounds = {"train": (0, self.n_train),
                  "val": (self.n_train, self.n_train + self.n_val),
                  "test": (self.n_train + self.n_val, self.n_train + self.n_val + self.n_test)}
        if split not in bounds:
            raise ValueError(f"unknown split {split!r}")
        return range(*bounds[split])

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "DatasetSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in kinds:
                raise ValueError(f"unknown dataset key {key!r}")
            kw[key] = {"int": int, "float": float}.get(kinds[key], str)(value.strip())
        return cls(**kw)


def class_index(direction: str, speed: str) -> int:
    return DIRECTION_NAMES.index(direction) * len(SPEEDS) + SPEED_NAMES.index(speed)


def class_name(label: int) -> str:
    return f"{DIRECTION_NAMES[label // len(SPEEDS)]}-{SPEED_NAMES[label % len(SPEEDS)]}"


def opposite_class(label: int) -> int:
    d, s = divmod(label, len(SPEEDS))
    return (d ^ 1) * len(SPEEDS) + s


def velocity(label: int) -> tuple[int, int]:
    d, s = divmod(label, len(SPEEDS))
    dy, dx = DIRECTIONS[DIRECTION_NAMES[d]]
    v = SPEEDS[SPEED_NAMES[s]]
    return dy * v, dx * v


def _background(spec: DatasetSpec, label: int) -> np.ndarray:
    if spec.background == "blank":
        return np.zeros((spec.H, spec.W), dtype=np.float64)
    if spec.background == "texture":
        yy, xx = np.mgrid[0:spec.H, 0:spec.W]
        freq = 2 * np.pi * (label + 1) / (2 * spec.W)
        return 0.15 + 0.1 * np.sin(freq * xx + 0.7 * label) * np.cos(freq * yy)
    raise ValueError(f"unknown background mode {spec.background!r}")


def render(spec: DatasetSpec, label: int, y0: int, x0: int) -> np.ndarray:
    """Noise-free frames with the square's top-left corner at ``(y0, x0) + v t``."""
    dy, dx = velocity(label)
    side = spec.square
    bg = _background(spec, label)
    frames = np.empty((spec.T, spec.H, spec.W), dtype=np.float64)
    for t in range(spec.T):
        frame = bg.copy()
        rows = (y0 + dy * t + np.arange(side)) % spec.H
        cols = (x0 + dx * t + np.arange(side)) % spec.W
        frame[np.ix_(rows, cols)] = 1.0
        frames[t] = frame
    return np.repeat(frames[..., None], spec.C, axis=-1)


def clip_start(spec: DatasetSpec, clip_id: int) -> tuple[int, int]:
    rng = np.random.default_rng([spec.seed, clip_id, 0])
    return int(rng.integers(spec.H)), int(rng.integers(spec.W))


def generate_clip(spec: DatasetSpec, clip_id: int) -> VideoClip:
    label = clip_id % spec.classes
    y0, x0 = clip_start(spec, clip_id)
    pixels = render(spec, label, y0, x0)
    if spec.noise > 0:
        rng = np.random.default_rng([spec.seed, clip_id, 1])
        pixels = np.clip(pixels + rng.uniform(-spec.noise, spec.noise, pixels.shape), 0.0, 1.0)
    return VideoClip(pixels.astype(np.float32), label, None, clip_id)


@dataclass
class ManifestRow:
    clip_id: int
    path: str
    label: int
    split: str


@dataclass
class Manifest:
    root: Path
    rows: list[ManifestRow]

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    @property
    def spec(self) -> DatasetSpec | None:
        cfg = self.root / "dataset.cfg"
        return DatasetSpec.from_text(cfg.read_text()) if cfg.exists() else None


def write_manifest(path: Path, rows: list[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.clip_id}\t{r.path}\t{r.label}\t{r.split}\n")


def read_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: missing {MANIFEST_HEADER!r} header")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{n}: expected 4 tab-separated fields")
        rows.append(ManifestRow(int(parts[0]), parts[1], int(parts[2]), parts[3]))
    return Manifest(path.parent, rows)


def generate_dataset(spec: DatasetSpec, out_dir: str | os.PathLike) -> Manifest:
    """Write every split as DFT1 clip files plus ``manifest.txt`` and ``dataset.cfg``."""
    out = Path(out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
        rows = []
        for split in ("train", "val", "test"):
            for cid in spec.split_range(split):
                clip = generate_clip(spec, cid)
                rel = f"clips/{cid:06d}.dft"
                dft.save(out / rel, clip.pixels)
                rows.append(ManifestRow(cid, rel, clip.label, split))
        write_manifest(out / "manifest.txt", rows)
        (out / "dataset.cfg").write_text(spec.to_text(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"writing dataset under {out}: {exc}") from exc
    return Manifest(out, rows)


def center_offset(size: int, crop: int) -> int:
    return (size - crop) // 2


def crop_views(clip: VideoClip, size: int, protocol: str = "center") -> list[VideoClip]:
    """Spatial crops of side ``size``: one centred view, or top-left/center/bottom-right."""
    T, H, W, C = clip.pixels.shape
    if size > H or size > W:
        raise ValueError(f"crop {size} larger than frame {H}x{W}")
    if protocol == "center":
        offsets = [(center_offset(H, size), center_offset(W, size))]
    elif protocol == "three-crop":
        offsets = [(0, 0), (center_offset(H, size), center_offset(W, size)), (H - size, W - size)]
    else:
        raise ValueError(f"unknown crop protocol {protocol!r}")
    return [VideoClip(clip.pixels[:, y:y + size, x:x + size], clip.label, clip.permutation,
                      clip.clip_id) for y, x in offsets]


def load_batch(manifest: Manifest, split: str, indices, crop_size: int | None = None,
               protocol: str = "center"):
    """Load clips ``indices`` (positions within ``split``) from disk.

    Returns a list of clips, or with ``crop_size`` a list of per-clip view lists.
    """
    rows = manifest.split(split)
    clips = []
    for i in indices:
        if not 0 <= i < len(rows):
            raise IndexError(f"index {i} outside split {split!r} of size {len(rows)}")
        r = rows[i]
        pixels = dft.load(manifest.root / r.path)
        clips.append(VideoClip(pixels, r.label, None, r.clip_id))
    if crop_size is None:
        return clips
    return [crop_views(c, crop_size, protocol) for c in clips]


def load_split_arrays(manifest: Manifest, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Whole split as (pixels (B,T,H,W,C), labels, clip_ids)."""
    rows = manifest.split(split)
    pixels = np.stack([dft.load(manifest.root / r.path) for r in rows])
    return (pixels, np.array([r.label for r in rows], dtype=np.int64),
            np.array([r.clip_id for r in rows], dtype=np.int64))
