"""Labelled image domains, the synthetic digit set, bias transforms and batching.

Images are C,H,W arrays with values in [0, 255]. Datasets are immutable once
built: pixel arrays are marked read-only and the image list is a tuple.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage
from skimage import color, transform

from .tensor_core import RngState, Tensor, derive_seed

IMAGE_SIZE = 32
N_DIGIT_CLASSES = 10
ROTATION_DEG = 10.0
TEXTURE_AMPLITUDE = 0.35


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int
    id: str

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3:
            raise DataError(f"{self.id}: pixels must be C,H,W, got shape {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 255):
            raise DataError(f"{self.id}: pixel values outside [0, 255]")
        if px.flags.writeable:
            px = px.copy()
            px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "label", int(self.label))


@dataclass(frozen=True)
class DomainDataset:
    name: str
    images: tuple[LabeledImage, ...]
    n_classes: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            raise DataError(f"dataset {self.name!r}: duplicate image ids")
        for im in self.images:
            if not 0 <= im.label < self.n_classes:
                raise DataError(f"dataset {self.name!r}: label {im.label} of {im.id} outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def ids(self) -> list[str]:
        return [im.id for im in self.images]

    @property
    def labels(self) -> np.ndarray:
        return np.array([im.label for im in self.images], dtype=np.int64)

    def arrays(self) -> np.ndarray:
        """All pixels stacked as float32 N,C,H,W."""
        return np.stack([im.pixels for im in self.images]).astype(np.float32)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx: Sequence[int], name: str | None = None) -> "DomainDataset":
        return DomainDataset(name or self.name, tuple(self.images[i] for i in idx), self.n_classes, dict(self.meta))


# -- synthetic digits ---------------------------------------------------------------

def _arc(cx, cy, rx, ry, a0, a1, n=12):
    t = np.linspace(math.radians(a0), math.radians(a1), n)
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


# Stroke polylines per digit in a unit box (x right, y down).
GLYPHS: dict[int, list[list[tuple[float, float]]]] = {
    0: [_arc(0.5, 0.5, 0.28, 0.4, 0, 360, 20)],
    1: [[(0.33, 0.27), (0.55, 0.1), (0.55, 0.9)], [(0.33, 0.9), (0.77, 0.9)]],
    2: [_arc(0.5, 0.32, 0.25, 0.2, 190, 360, 8) + [(0.72, 0.45), (0.25, 0.9), (0.78, 0.9)]],
    3: [[(0.25, 0.12), (0.72, 0.12), (0.45, 0.43)] + _arc(0.48, 0.66, 0.27, 0.23, -90, 150, 10)],
    4: [[(0.64, 0.9), (0.64, 0.1), (0.2, 0.64), (0.8, 0.64)]],
    5: [[(0.75, 0.12), (0.32, 0.12), (0.28, 0.46)] + _arc(0.48, 0.66, 0.27, 0.24, -120, 150, 10)],
    6: [[(0.7, 0.1), (0.36, 0.42)] + _arc(0.5, 0.68, 0.24, 0.22, 190, 550, 16)],
    7: [[(0.22, 0.12), (0.78, 0.12), (0.42, 0.9)]],
    8: [_arc(0.5, 0.29, 0.19, 0.18, 0, 360, 14), _arc(0.5, 0.69, 0.24, 0.22, 0, 360, 16)],
    9: [_arc(0.5, 0.33, 0.22, 0.21, 0, 360, 14), [(0.72, 0.33), (0.64, 0.9)]],
}


def _segments(glyph: list[list[tuple[float, float]]]) -> np.ndarray:
    segs = [(p, q) for line in glyph for p, q in zip(line[:-1], line[1:])]
    return np.array(segs, dtype=np.float64)  # S, 2, 2


def render_glyph(digit: int, size: int, gen: np.random.Generator) -> np.ndarray:
    """Anti-aliased coverage mask in [0, 1] (H, W) for a jittered digit."""
    segs = _segments(GLYPHS[digit]) - 0.5
    scale = size * gen.uniform(0.62, 0.78)
    theta = math.radians(gen.uniform(-8.0, 8.0))
    shear = gen.uniform(-0.15, 0.15)
    c, s = math.cos(theta), math.sin(theta)
    A = scale * np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]])
    centre = size / 2.0 + gen.uniform(-1.5, 1.5, size=2)
    pts = segs @ A.T + centre  # pixel coordinates (x, y)
    width = gen.uniform(2.2, 3.4)

    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    p = np.stack([xs.ravel(), ys.ravel()], axis=1)[:, None, :]  # P, 1, 2
    a, b = pts[None, :, 0], pts[None, :, 1]
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=2) / np.maximum(np.sum(ab * ab, axis=2), 1e-12), 0.0, 1.0)
    d = np.linalg.norm(p - (a + t[..., None] * ab), axis=2).min(axis=1)
    return np.clip(width / 2.0 - d + 0.5, 0.0, 1.0).reshape(size, size)


def render_digit_set(n: int = 1000, size: int = IMAGE_SIZE, seed: int = 0) -> DomainDataset:
    """The bundled synthetic digit set: warm strokes on a dark, nearly grey background.

    Class counts are balanced (n // 10 each, remainder spread over the first
    classes) and item order is a seeded shuffle. Fully determined by the seed.
    """
    if n < 1:
        raise DataError("render_digit_set needs n >= 1")
    order = np.random.default_rng(derive_seed(seed, "order")).permutation(n)
    labels = order % N_DIGIT_CLASSES
    images = []
    for i, label in enumerate(labels):
        gen = np.random.default_rng(derive_seed(seed, "digit", i))
        mask = render_glyph(int(label), size, gen)
        fg = color.hsv2rgb(np.array([[[gen.uniform(0.02, 0.1), gen.uniform(0.75, 0.95), gen.uniform(0.85, 1.0)]]]))
        bg = color.hsv2rgb(np.array([[[gen.uniform(0, 1), gen.uniform(0.0, 0.2), gen.uniform(0.04, 0.14)]]]))
        rgb = mask[..., None] * fg + (1.0 - mask[..., None]) * bg
        px = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8).transpose(2, 0, 1)
        images.append(LabeledImage(px, int(label), f"d{i:04d}.ppm"))
    return DomainDataset("digits", tuple(images), N_DIGIT_CLASSES, {"generator": "render_digit_set", "seed": seed})


# -- bias transforms -----------------------------------------------------------------

BACKGROUNDS = ("none", "texture1", "texture2")


@dataclass(frozen=True)
class BiasSpec:
    """Low-level, label-preserving appearance change applied to every image of a domain."""

    hue_shift: float = 0.0
    noise_sigma: float = 0.0
    background: str = "none"
    contrast: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if self.contrast <= 0:
            raise DataError("contrast must be > 0")
        if self.background not in BACKGROUNDS:
            raise DataError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")

    @classmethod
    def parse(cls, text: str) -> "BiasSpec":
        """Parse ``hue_shift=180,noise_sigma=8,background=texture1,contrast=0.8,seed=2``."""
        kw: dict = {}
        text = text.strip()
        if text in ("", "none", "identity"):
            return cls()
        types = {"hue_shift": float, "noise_sigma": float, "background": str, "contrast": float, "seed": int}
        for part in text.split(","):
            key, sep, val = part.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise DataError(f"malformed bias spec item {part!r}; expected key=value with key in {sorted(types)}")
            try:
                kw[key] = types[key](val.strip())
            except ValueError as e:
                raise DataError(f"bias spec {key}: cannot parse {val!r}") from e
        return cls(**kw)

    def to_string(self) -> str:
        return (f"hue_shift={self.hue_shift:g},noise_sigma={self.noise_sigma:g},background={self.background},"
                f"contrast={self.contrast:g},seed={self.seed}")

    @property
    def is_identity(self) -> bool:
        return self.hue_shift % 360 == 0 and self.noise_sigma == 0 and self.background == "none" and self.contrast == 1


def _texture(kind: str, h: int, w: int, gen: np.random.Generator) -> np.ndarray:
    """H, W, 3 pattern in [0, 1]."""
    if kind == "texture1":
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        phi = gen.uniform(0, math.pi)
        period = gen.uniform(5.0, 9.0)
        v = 0.5 + 0.5 * np.sin(2 * math.pi * (xs * math.cos(phi) + ys * math.sin(phi)) / period + gen.uniform(0, 6.3))
    else:
        v = ndimage.gaussian_filter(gen.normal(size=(h, w)), 2.0, mode="wrap")
        v = (v - v.min()) / max(v.max() - v.min(), 1e-12)
    tint = color.hsv2rgb(np.array([[[gen.uniform(0.55, 0.7), 0.5, 1.0]]]))[0, 0]
    return v[..., None] * tint


def apply_bias(pixels: np.ndarray, spec: BiasSpec, item_seed: int) -> np.ndarray:
    """Apply hue rotation, contrast, background texture and noise; returns uint8 C,H,W.

    Texture is blended in where the original image is dark, so glyph strokes
    keep their colour and the label is untouched.
    """
    rgb = np.asarray(pixels, dtype=np.float64).transpose(1, 2, 0) / 255.0
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    gen = np.random.default_rng(item_seed)
    alpha = rgb.max(axis=2, keepdims=True)
    out = rgb
    if spec.hue_shift % 360:
        hsv = color.rgb2hsv(out)
        hsv[..., 0] = (hsv[..., 0] + spec.hue_shift / 360.0) % 1.0
        out = color.hsv2rgb(hsv)
    if spec.contrast != 1.0:
        out = 0.5 + spec.contrast * (out - 0.5)
    if spec.background != "none":
        out = out + (1.0 - alpha) * TEXTURE_AMPLITUDE * _texture(spec.background, *out.shape[:2], gen)
    out = out * 255.0
    if spec.noise_sigma > 0:
        out = out + gen.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(np.round(out), 0, 255).astype(np.uint8).transpose(2, 0, 1)


def _apply_all(images: Sequence[LabeledImage], spec: BiasSpec, workers: int) -> list[LabeledImage]:
    def one(im: LabeledImage) -> LabeledImage:
        out = replace(im, pixels=apply_bias(im.pixels, spec, derive_seed(spec.seed, im.id)))
        assert out.label == im.label
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, images))
    return [one(im) for im in images]


def synth_biased_pair(base: DomainDataset, spec_source: BiasSpec, spec_target: BiasSpec,
                      workers: int = 1) -> tuple[DomainDataset, DomainDataset]:
    """Split ``base`` into disjoint, class-stratified halves and bias each one.

    Image ids are kept, so the ground-truth correspondence to ``base`` is the id
    itself; ``meta["base"]`` records the base dataset name.
    """
    if spec_source == spec_target:
        raise DataError("source and target bias specs are identical")
    hist = base.label_histogram()
    present = hist[hist > 0]
    if len(present) == 0 or present.min() < 2:
        raise DataError("dataset too small: every class needs at least 2 images to split")
    gen = np.random.default_rng(derive_seed(spec_source.seed, spec_target.seed, "split"))
    labels = base.labels
    to_x = np.zeros(len(base), dtype=bool)
    flip = 0
    for c in range(base.n_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        idx = gen.permutation(idx)
        k = len(idx) // 2 + (len(idx) % 2) * flip
        flip ^= len(idx) % 2
        to_x[idx[:k]] = True
    xi, yi = np.flatnonzero(to_x), np.flatnonzero(~to_x)
    meta = {"base": base.name}
    x = DomainDataset("X", tuple(_apply_all([base.images[i] for i in xi], spec_source, workers)), base.n_classes,
                      {**meta, "bias": spec_source.to_string()})
    y = DomainDataset("Y", tuple(_apply_all([base.images[i] for i in yi], spec_target, workers)), base.n_classes,
                      {**meta, "bias": spec_target.to_string()})
    return x, y


# -- preprocessing --------------------------------------------------------------------

def sample_augmentation(gen: np.random.Generator) -> tuple[float, bool]:
    """Rotation angle uniform in [-10, 10] degrees and a fair horizontal-flip coin."""
    return float(gen.uniform(-ROTATION_DEG, ROTATION_DEG)), bool(gen.random() < 0.5)


def preprocess(img: LabeledImage, train_mode: bool, rng: RngState | np.random.Generator | None = None,
               size: int = IMAGE_SIZE) -> LabeledImage:
    """Resize to ``size`` and make 3-channel; train mode adds rotation and horizontal flip.

    Rotation is bilinear with black fill outside the rotated frame.
    """
    px = np.asarray(img.pixels, dtype=np.float64)
    if px.shape[0] == 1:
        px = np.repeat(px, 3, axis=0)
    elif px.shape[0] == 4:
        px = px[:3]
    if px.shape[1:] != (size, size):
        px = transform.resize(px, (px.shape[0], size, size), order=1, preserve_range=True, anti_aliasing=False)
    if train_mode:
        gen = rng.generator() if isinstance(rng, RngState) else (rng or np.random.default_rng())
        angle, flip = sample_augmentation(gen)
        px = ndimage.rotate(px, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
        if flip:
            px = px[:, :, ::-1]
    return LabeledImage(np.clip(px, 0, 255).astype(np.float32), img.label, img.id)


def preprocess_all(images: Sequence[LabeledImage], train_mode: bool, seed: int, size: int = IMAGE_SIZE,
                   workers: int = 1) -> np.ndarray:
    """Preprocess a list of images into an N,3,size,size float32 array.

    Each item draws from its own generator seeded by (seed, id), so results do
    not depend on ``workers``.
    """
    def one(im: LabeledImage) -> np.ndarray:
        gen = np.random.default_rng(derive_seed(seed, im.id))
        return preprocess(im, train_mode, gen, size).pixels

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, images))
    else:
        out = [one(im) for im in images]
    return np.stack(out) if out else np.zeros((0, 3, size, size), np.float32)


def batches(ds: DomainDataset, batch_size: int, rng: RngState, shuffle: bool = True
            ) -> Iterator[tuple[Tensor, np.ndarray, list[str]]]:
    """One epoch of (pixels N,C,H,W, labels, ids); the final partial batch is emitted."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = rng.generator().permutation(len(ds)) if shuffle else np.arange(len(ds))
    for lo in range(0, len(ds), batch_size):
        idx = order[lo:lo + batch_size]
        ims = [ds.images[i] for i in idx]
        yield (Tensor(np.stack([im.pixels for im in ims]).astype(np.float32)),
               np.array([im.label for im in ims], dtype=np.int64), [im.id for im in ims])


# -- file I/O -----------------------------------------------------------------------

def write_ppm(path: Path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels)
    if px.shape[0] == 1:
        px = np.repeat(px, 3, axis=0)
    px = np.clip(np.round(px), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = px.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    """Binary PPM (P6) or PGM (P5) with maxval 255 -> uint8 C,H,W."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P6", b"P5") or maxval != 255:
        raise DataError(f"{path}: unsupported image format {magic!r} maxval {maxval}")
    c = 3 if magic == b"P6" else 1
    body = data[pos + 1:]
    if len(body) < w * h * c:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(body[:w * h * c], dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1).copy()


def save_dataset(ds: DomainDataset, out_dir: Path, extra_columns: dict[str, Sequence] | None = None) -> None:
    """Write ``images/<id>`` PPM files and ``labels.csv`` (filename,label)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for im in ds.images:
        write_ppm(out_dir / "images" / im.id, im.pixels)
    with open(out_dir / "labels.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["filename", "label"])
        for im in ds.images:
            w.writerow([im.id, im.label])


def load_dataset(path: Path, n_classes: int | None = None, name: str | None = None) -> DomainDataset:
    """Read a directory holding ``labels.csv`` and ``images/`` (files may also sit beside the CSV)."""
    path = Path(path)
    csv_path = path / "labels.csv"
    if not csv_path.exists():
        raise DataError(f"{path}: labels.csv not found")
    with open(csv_path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if rows and rows[0][:2] == ["filename", "label"]:
        rows = rows[1:]
    images = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) < 2:
            raise DataError(f"labels.csv row {lineno}: expected filename,label")
        fname, label_s = row[0], row[1]
        try:
            label = int(label_s)
        except ValueError:
            raise DataError(f"labels.csv row {lineno} ({fname}): bad label {label_s!r}") from None
        if label < 0 or (n_classes is not None and label >= n_classes):
            raise DataError(f"labels.csv row {lineno} ({fname}): label {label} out of range")
        candidates = [path / "images" / fname, path / fname]
        file = next((c for c in candidates if c.is_file()), None)
        if file is None:
            raise DataError(f"labels.csv row {lineno}: missing file {fname}")
        try:
            px = read_ppm(file)
        except (DataError, ValueError, IndexError) as e:
            raise DataError(f"labels.csv row {lineno}: unreadable image {fname}: {e}") from None
        images.append(LabeledImage(px, label, fname))
    k = n_classes if n_classes is not None else (max((im.label for im in images), default=-1) + 1)
    return DomainDataset(name or path.name, tuple(images), k)
