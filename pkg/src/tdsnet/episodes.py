"""Dataset ingestion, preprocessing, N-way K-shot episode sampling and a synthetic
fine-grained dataset generator.

On-disk layout: ``root/<class>/<image>.ppm`` with split files ``auxiliary.txt`` and
``test.txt`` (optionally ``val.txt``) listing one class name per line.
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import load_tensor, save_tensor

IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])
SPLITS = ("auxiliary", "val", "test")
REQUIRED_SPLITS = ("auxiliary", "test")


class DatasetError(ValueError):
    pass


# -- portable pixmap ------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_ppm(path_or_bytes) -> np.ndarray:
    """Decode a binary (P6) portable pixmap into an (H, W, 3) uint8/uint16 array."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        buf = bytes(path_or_bytes)
        name = "<bytes>"
    else:
        name = str(path_or_bytes)
        buf = Path(path_or_bytes).read_bytes()
    tokens, pos = [], 0
    for _ in range(4):
        m = _PPM_TOKEN.match(buf, pos)
        if not m:
            raise DatasetError(f"malformed PPM header in {name}")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise DatasetError(f"{name} is not a binary P6 pixmap")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetError(f"malformed PPM header in {name}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise DatasetError(f"bad PPM dimensions in {name}")
    pos += 1  # single whitespace before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * 3 * dtype.itemsize
    if len(buf) - pos < need:
        raise DatasetError(f"truncated PPM raster in {name}")
    img = np.frombuffer(buf, dtype=dtype, count=width * height * 3, offset=pos).reshape(height, width, 3)
    if maxval != 255:
        img = (img.astype(np.float64) * (255.0 / maxval)).round().astype(np.uint8)
    return img.copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_ppm expects an (H, W, 3) uint8 array")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


# -- preprocessing --------------------------------------------------------------

def _resize_weights(n_in: int, n_out: int):
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img.copy()
    lo, hi, f = _resize_weights(h, size)
    rows = img[lo] * (1 - f)[:, None, None] + img[hi] * f[:, None, None]
    lo, hi, f = _resize_weights(w, size)
    return rows[:, lo] * (1 - f)[None, :, None] + rows[:, hi] * f[None, :, None]


def preprocess(image, size: int = 84) -> np.ndarray:
    """Path or uint8 (H, W, 3) array -> normalised float32 (size, size, 3)."""
    if not isinstance(image, np.ndarray):
        image = read_ppm(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"expected an RGB image, got shape {image.shape}")
    x = resize_bilinear(image, size) / 255.0
    return ((x - IMAGE_MEAN) / IMAGE_STD).astype(np.float32)


# -- index ----------------------------------------------------------------------

@dataclass
class DatasetIndex:
    root: Path
    splits: dict[str, list[str]]
    images: dict[str, list[Path]]

    def classes(self, split: str) -> list[str]:
        if split not in self.splits:
            raise DatasetError(f"dataset has no {split!r} split")
        return self.splits[split]

    def digest(self) -> str:
        h = hashlib.sha256()
        for split in sorted(self.splits):
            h.update(split.encode())
            for cls in self.splits[split]:
                h.update(cls.encode())
                for p in self.images[cls]:
                    h.update(p.name.encode())
                    h.update(hashlib.sha256(p.read_bytes()).digest())
        return h.hexdigest()[:16]


def read_split_file(path: Path) -> list[str]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return [ln for ln in lines if ln and not ln.startswith("#")]


def load_dataset(root, split_files: dict[str, Path] | None = None, min_images: int = 1) -> DatasetIndex:
    root = Path(root)
    if split_files is None:
        split_files = {s: root / f"{s}.txt" for s in SPLITS if (root / f"{s}.txt").exists()}
    for s in REQUIRED_SPLITS:
        if s not in split_files:
            raise DatasetError(f"missing split file for {s!r} under {root}")
    splits = {s: sorted(read_split_file(p)) for s, p in split_files.items()}
    seen: dict[str, str] = {}
    for s, classes in splits.items():
        for cls in classes:
            if cls in seen:
                raise DatasetError(f"overlapping label spaces: class {cls!r} in both {seen[cls]} and {s}")
            seen[cls] = s
    images: dict[str, list[Path]] = {}
    for cls in seen:
        d = root / cls
        if not d.is_dir():
            raise DatasetError(f"missing class directory {cls!r}")
        files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".ppm")
        if len(files) < max(min_images, 1):
            raise DatasetError(f"class {cls!r} has {len(files)} images, need at least {max(min_images, 1)}")
        images[cls] = files
    return DatasetIndex(root, splits, images)


class ImageBank:
    """Preprocessed images per class, optionally cached on disk as tensor files keyed by content digest."""

    def __init__(self, index: DatasetIndex, size: int = 84, cache_dir=None):
        self.index = index
        self.size = size
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._arrays: dict[str, np.ndarray] = {}

    def _load_one(self, path: Path) -> np.ndarray:
        if self.cache_dir is None:
            return preprocess(path, self.size)
        raw = path.read_bytes()
        key = hashlib.sha256(raw + f"|{self.size}".encode()).hexdigest()[:24]
        cached = self.cache_dir / f"{key}.tdsn"
        if cached.exists():
            return load_tensor(cached).data
        arr = preprocess(read_ppm(raw), self.size)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        save_tensor(cached, arr)
        return arr

    def class_array(self, cls: str) -> np.ndarray:
        if cls not in self._arrays:
            self._arrays[cls] = np.stack([self._load_one(p) for p in self.index.images[cls]])
        return self._arrays[cls]

    def gather(self, refs: Sequence[tuple[str, int]]) -> np.ndarray:
        return np.stack([self.class_array(c)[i] for c, i in refs])


# -- episodes -------------------------------------------------------------------

@dataclass
class Episode:
    classes: list[str]
    support: list[tuple[str, int]]
    support_labels: np.ndarray
    query: list[tuple[str, int]]
    query_labels: np.ndarray
    seed: tuple[int, ...] = ()

    @property
    def n_way(self) -> int:
        return len(self.classes)


def episode_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator for episode ``index`` of ``stream``; no shared state between calls."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def sample_episode(index: DatasetIndex, split: str, n_way: int, k_shot: int, q_per: int,
                   rng: np.random.Generator, seed: tuple[int, ...] = ()) -> Episode:
    classes = index.classes(split)
    if len(classes) < n_way:
        raise DatasetError(f"split {split!r} has {len(classes)} classes, episode needs {n_way}")
    chosen = [classes[i] for i in rng.choice(len(classes), size=n_way, replace=False)]
    support, query, s_lab, q_lab = [], [], [], []
    for label, cls in enumerate(chosen):
        n = len(index.images[cls])
        if n < k_shot + q_per:
            raise DatasetError(f"class {cls!r} has {n} images, episode needs {k_shot + q_per}")
        picks = rng.choice(n, size=k_shot + q_per, replace=False)
        support += [(cls, int(i)) for i in picks[:k_shot]]
        query += [(cls, int(i)) for i in picks[k_shot:]]
        s_lab += [label] * k_shot
        q_lab += [label] * q_per
    return Episode(chosen, support, np.array(s_lab), query, np.array(q_lab), seed)


# -- synthetic data -------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """A shared bird-like glyph; classes differ in part geometry and small hue shifts,
    images differ in pose, scale, brightness and background clutter."""

    image_size: int = 84
    n_classes: int = 25
    n_auxiliary: int = 20
    n_val: int = 0
    images_per_class: int = 40
    hue_delta: float = 0.06
    offset_range: float = 0.14
    wing_angle_range: float = 35.0
    noise_level: float = 0.06
    background_clutter: float = 0.25
    translate_jitter: float = 0.08
    rotate_jitter: float = 15.0
    scale_jitter: float = 0.1
    brightness_jitter: float = 0.08
    seed: int = 0

    def without_nuisance(self) -> "SyntheticSpec":
        d = asdict(self)
        d.update(noise_level=0.0, background_clutter=0.0, translate_jitter=0.0,
                 rotate_jitter=0.0, scale_jitter=0.0, brightness_jitter=0.0)
        return SyntheticSpec(**d)


@dataclass
class ClassParams:
    body_hue: float
    head_hue: float
    wing_hue: float
    tail_hue: float
    head_offset: tuple[float, float]
    wing_angle: float
    wing_length: float
    tail_length: float
    stripes: int
    eye_ring: bool


def class_params(spec: SyntheticSpec, rng: np.random.Generator) -> ClassParams:
    d = spec.hue_delta
    r = spec.offset_range
    return ClassParams(
        body_hue=0.08 + rng.uniform(-d, d),
        head_hue=0.55 + rng.uniform(-3 * d, 3 * d),
        wing_hue=0.3 + rng.uniform(-3 * d, 3 * d),
        tail_hue=0.9 + rng.uniform(-3 * d, 3 * d),
        head_offset=(float(rng.uniform(-r, r)), float(rng.uniform(-r, r))),
        wing_angle=float(rng.uniform(-spec.wing_angle_range, spec.wing_angle_range)),
        wing_length=float(rng.uniform(0.22, 0.34)),
        tail_length=float(rng.uniform(0.12, 0.3)),
        stripes=int(rng.integers(0, 4)),
        eye_ring=bool(rng.integers(0, 2)),
    )


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _ellipse(u, v, cx, cy, a, b, angle_deg=0.0):
    th = np.deg2rad(angle_deg)
    du, dv = u - cx, v - cy
    ru = du * np.cos(th) + dv * np.sin(th)
    rv = -du * np.sin(th) + dv * np.cos(th)
    return (ru / a) ** 2 + (rv / b) ** 2 <= 1.0, ru, rv


def render(spec: SyntheticSpec, params: ClassParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one image as uint8 (S, S, 3)."""
    S = spec.image_size
    ys, xs = np.mgrid[0:S, 0:S]
    # normalised coordinates in [-1, 1]
    x = (xs + 0.5) / S * 2 - 1
    y = (ys + 0.5) / S * 2 - 1
    tx, ty = rng.uniform(-spec.translate_jitter, spec.translate_jitter, size=2) * 2
    rot = np.deg2rad(rng.uniform(-spec.rotate_jitter, spec.rotate_jitter))
    scale = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    # inverse pose: image coords -> object coords
    xr, yr = x - tx, y - ty
    u = (xr * np.cos(rot) + yr * np.sin(rot)) / scale
    v = (-xr * np.sin(rot) + yr * np.cos(rot)) / scale

    bg_hue = rng.uniform(0, 1)
    img = np.empty((S, S, 3))
    img[:] = _hsv(bg_hue, 0.15, 0.55)
    if spec.background_clutter > 0:
        for _ in range(6):
            cx, cy = rng.uniform(-1, 1, size=2)
            a, b = rng.uniform(0.05, 0.3, size=2)
            m, _, _ = _ellipse(x, y, cx, cy, a, b, rng.uniform(0, 180))
            col = _hsv(rng.uniform(0, 1), rng.uniform(0.1, 0.5), rng.uniform(0.3, 0.8))
            img[m] = img[m] * (1 - spec.background_clutter) + col * spec.background_clutter

    p = params
    tail_mask, tu, _ = _ellipse(u, v, 0.38 + p.tail_length / 2, 0.05, p.tail_length, 0.07, -15)
    img[tail_mask] = _hsv(p.tail_hue, 0.7, 0.75)
    body, bu, bv = _ellipse(u, v, 0.0, 0.05, 0.42, 0.27)
    img[body] = _hsv(p.body_hue, 0.65, 0.85)
    wing, wu, wv = _ellipse(u, v, 0.05, -0.02, p.wing_length, 0.1, p.wing_angle)
    img[wing] = _hsv(p.wing_hue, 0.7, 0.65)
    if p.stripes:
        band = np.floor((wu + p.wing_length) / (2 * p.wing_length) * (2 * p.stripes + 1)).astype(int) % 2 == 1
        img[wing & band] = _hsv(p.wing_hue + 0.5, 0.6, 0.35)
    hx, hy = -0.42 + p.head_offset[0], -0.22 + p.head_offset[1]
    head, _, _ = _ellipse(u, v, hx, hy, 0.17, 0.17)
    img[head] = _hsv(p.head_hue, 0.7, 0.8)
    if p.eye_ring:
        ring, _, _ = _ellipse(u, v, hx - 0.05, hy - 0.03, 0.065, 0.065)
        img[ring] = np.array([0.95, 0.95, 0.95])
    eye, _, _ = _ellipse(u, v, hx - 0.05, hy - 0.03, 0.035, 0.035)
    img[eye] = np.array([0.05, 0.05, 0.05])
    beak, _, _ = _ellipse(u, v, hx - 0.2, hy + 0.02, 0.07, 0.03)
    img[beak] = _hsv(0.12, 0.9, 0.9)

    img *= 1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    if spec.noise_level > 0:
        img += rng.normal(0, spec.noise_level, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, root) -> DatasetIndex:
    """Write the dataset under ``root`` and return its index. Same spec -> identical bytes."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    master = np.random.SeedSequence(spec.seed)
    class_seeds, image_seeds = master.spawn(2)
    crng = np.random.default_rng(class_seeds)
    names = [f"class_{i:03d}" for i in range(spec.n_classes)]
    per_class_seeds = image_seeds.spawn(spec.n_classes)
    for name, ss in zip(names, per_class_seeds):
        params = class_params(spec, crng)
        d = root / name
        d.mkdir(exist_ok=True)
        irng = np.random.default_rng(ss)
        for j in range(spec.images_per_class):
            write_ppm(d / f"img_{j:04d}.ppm", render(spec, params, irng))
    n_aux, n_val = spec.n_auxiliary, spec.n_val
    if n_aux + n_val >= spec.n_classes:
        raise DatasetError("synthetic spec leaves no test classes")
    splits = {"auxiliary": names[:n_aux], "val": names[n_aux:n_aux + n_val], "test": names[n_aux + n_val:]}
    for s, cls in splits.items():
        if s == "val" and not cls:
            continue
        (root / f"{s}.txt").write_text("".join(c + "\n" for c in cls))
    (root / "synthetic_spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=1) + "\n")
    return load_dataset(root)


def directory_digest(root) -> str:
    """sha256 over every file (relative path + bytes) under ``root``, sorted by path."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
