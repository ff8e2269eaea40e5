"""Image loading, resizing, patch tokenization, and synthetic data.

Supported on-disk formats are binary PPM (P6), binary PGM (P5, replicated
to three channels), and a raw float64 container used by the synthetic
dataset (magic ``EMCIMG1``, then little-endian u32 height/width/channels,
then the row-major float64 pixel block).

Pixel values are feature-scaled per image: after loading, every image
spans [0, 1] (constant images are clipped into the range unchanged).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, ImageFormatError, TokenizationError
from .rng import substream

RAW_MAGIC = b"EMCIMG1"


@dataclass
class Image:
    """Row-major HWC pixel array with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3:
            raise ImageFormatError(f"expected HWC pixels, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class PatchSequence:
    """Flattened non-overlapping patches of one image, row-major patch order."""

    n_patches: int
    patch_size: int
    flat: np.ndarray  # (n_patches, patch_size**2 * channels)


@dataclass
class DatasetManifest:
    classes: list[str]
    entries: list[tuple[str, int]]  # (path, label index)
    splits: dict[str, list[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "entries": [{"path": p, "label": l} for p, l in self.entries],
            "splits": self.splits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            classes=list(d["classes"]),
            entries=[(e["path"], int(e["label"])) for e in d["entries"]],
            splits={k: list(map(int, v)) for k, v in d.get("splits", {}).items()},
        )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))


def load_manifest(path: str | Path) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads(Path(path).read_text()))


def _rescale(pixels: np.ndarray) -> np.ndarray:
    lo, hi = pixels.min(), pixels.max()
    if hi > lo:
        return (pixels - lo) / (hi - lo)
    return np.clip(pixels, 0.0, 1.0)


def _read_pnm_header(buf: bytes, offset: int, n_fields: int) -> tuple[list[int], int]:
    """Parse whitespace/comment-separated ASCII integers after the magic."""
    fields: list[int] = []
    i = offset
    while len(fields) < n_fields:
        if i >= len(buf):
            raise ImageFormatError("truncated header")
        c = buf[i : i + 1]
        if c == b"#":
            while i < len(buf) and buf[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        elif c.isdigit():
            j = i
            while j < len(buf) and buf[j : j + 1].isdigit():
                j += 1
            fields.append(int(buf[i:j]))
            i = j
        else:
            raise ImageFormatError(f"unexpected byte {c!r} in header")
    if i >= len(buf) or not buf[i : i + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    return fields, i + 1


def load_image(path: str | Path) -> Image:
    """Load a P5/P6/EMCIMG1 file and feature-scale it to [0, 1]."""
    buf = Path(path).read_bytes()
    if buf.startswith(RAW_MAGIC):
        header_len = len(RAW_MAGIC) + 12
        if len(buf) < header_len:
            raise ImageFormatError(f"{path}: truncated raw header")
        h, w, c = struct.unpack("<III", buf[len(RAW_MAGIC) : header_len])
        expected = h * w * c * 8
        payload = buf[header_len:]
        if len(payload) < expected:
            raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
        pixels = np.frombuffer(payload[:expected], dtype="<f8").reshape(h, w, c)
        return Image(_rescale(pixels.copy()))
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unknown magic {magic!r}")
    (w, h, maxval), data_start = _read_pnm_header(buf, 2, 3)
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval}, want 255)")
    channels = 3 if magic == b"P6" else 1
    expected = h * w * channels
    payload = buf[data_start:]
    if len(payload) < expected:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    pixels = np.frombuffer(payload[:expected], dtype=np.uint8).astype(np.float64)
    pixels = pixels.reshape(h, w, channels)
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return Image(_rescale(pixels))


def save_raw_image(img: Image, path: str | Path) -> None:
    px = np.ascontiguousarray(img.pixels, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<III", img.height, img.width, img.channels))
        fh.write(px.tobytes())


def ensure_rgb(img: Image) -> Image:
    if img.channels == 3:
        return img
    if img.channels == 1:
        return Image(np.repeat(img.pixels, 3, axis=2))
    raise ImageFormatError(f"cannot promote {img.channels}-channel image to RGB")


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    """Corner-aligned bilinear resampling; output stays in [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise TokenizationError(f"invalid output size {out_h}x{out_w}")
    h, w = img.height, img.width
    if (out_h, out_w) == (h, w):
        return Image(img.pixels.copy())
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    p = img.pixels
    top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
    bot = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
    return Image(top * (1 - fy) + bot * fy)


def patchify(img: Image, patch_size: int) -> PatchSequence:
    """Cut the image into non-overlapping patches, left-to-right then top-to-bottom."""
    h, w, c = img.pixels.shape
    if h % patch_size or w % patch_size:
        raise TokenizationError(
            f"image {h}x{w} not divisible into {patch_size}x{patch_size} patches"
        )
    gh, gw = h // patch_size, w // patch_size
    blocks = img.pixels.reshape(gh, patch_size, gw, patch_size, c)
    flat = blocks.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * c)
    return PatchSequence(n_patches=gh * gw, patch_size=patch_size, flat=np.ascontiguousarray(flat))


def unpatchify(seq: PatchSequence, height: int, width: int, channels: int) -> Image:
    """Inverse of :func:`patchify`; bit-exact round trip."""
    p = seq.patch_size
    gh, gw = height // p, width // p
    blocks = seq.flat.reshape(gh, gw, p, p, channels).transpose(0, 2, 1, 3, 4)
    return Image(np.ascontiguousarray(blocks.reshape(height, width, channels)))


# ---------------------------------------------------------------------------
# synthetic dataset


def _texture_blobs(rng: np.random.Generator, side: int, variant: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    out = np.zeros((side, side))
    for _ in range(6 + 3 * variant):
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.05, 0.12) / (1 + variant)
        out += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return out


def _texture_stripes(rng: np.random.Generator, side: int, variant: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3.0, 5.0) * (1 + variant)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def _texture_grid(rng: np.random.Generator, side: int, variant: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    freq = rng.integers(3, 6) * (1 + variant)
    phase_y, phase_x = rng.uniform(0, 2 * np.pi, 2)
    return np.sign(np.sin(2 * np.pi * freq * yy + phase_y)) * np.sign(
        np.sin(2 * np.pi * freq * xx + phase_x)
    )


def _texture_wires(rng: np.random.Generator, side: int, variant: int) -> np.ndarray:
    # smooth random-walk curves with a gaussian cross-section
    yy, xx = np.mgrid[0:side, 0:side]
    out = np.zeros((side, side))
    for _ in range(3 + variant):
        n_pts = 24
        pos = np.empty((n_pts, 2))
        pos[0] = rng.uniform(0, side, 2)
        heading = rng.uniform(0, 2 * np.pi)
        step = side / 10.0
        for i in range(1, n_pts):
            heading += rng.normal(0, 0.4)
            pos[i] = pos[i - 1] + step * np.array([np.sin(heading), np.cos(heading)])
        pos = np.clip(pos, 0, side - 1)
        width = rng.uniform(0.8, 1.6)
        for cy, cx in pos:
            out += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return out


_TEXTURES = [
    ("blobs", _texture_blobs),
    ("stripes", _texture_stripes),
    ("grid", _texture_grid),
    ("wires", _texture_wires),
]


def _class_names(n_classes: int) -> list[str]:
    names = []
    for c in range(n_classes):
        base, _ = _TEXTURES[c % len(_TEXTURES)]
        variant = c // len(_TEXTURES)
        names.append(base if variant == 0 else f"{base}{variant + 1}")
    return names


def generate_synthetic_dataset(
    n_classes: int,
    per_class: int,
    side: int,
    seed: int,
    out_dir: str | Path,
) -> DatasetManifest:
    """Write a deterministic labeled texture dataset and its manifest.

    Each class is a distinct texture family so that even a nearest-centroid
    baseline on raw pixels beats chance. Images are single-channel EMCIMG1
    files; paths in the manifest are relative to ``out_dir``.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if per_class < 1:
        raise EmptyInputError("per_class must be at least 1; refusing to write an empty manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = substream(seed, "synth")
    classes = _class_names(n_classes)
    entries: list[tuple[str, int]] = []
    for c in range(n_classes):
        _, texture = _TEXTURES[c % len(_TEXTURES)]
        variant = c // len(_TEXTURES)
        for i in range(per_class):
            px = texture(rng, side, variant)
            px = px + rng.normal(0.0, 0.05, size=px.shape)
            px = _rescale(px)
            name = f"{classes[c]}_{i:04d}.emcimg"
            save_raw_image(Image(px), out_dir / name)
            entries.append((name, c))

    # stratified contiguous split per class: ~70/15/15 with train never empty
    splits: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for c in range(n_classes):
        idx = [k for k, (_, lbl) in enumerate(entries) if lbl == c]
        n = len(idx)
        n_test = max(1, n * 15 // 100) if n >= 3 else 0
        n_val = max(1, n * 15 // 100) if n >= 3 else 0
        n_train = n - n_val - n_test
        splits["train"] += idx[:n_train]
        splits["val"] += idx[n_train : n_train + n_val]
        splits["test"] += idx[n_train + n_val :]

    manifest = DatasetManifest(classes=classes, entries=entries, splits=splits)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def load_dataset(
    manifest: DatasetManifest, root: str | Path, image_side: int | None = None
) -> tuple[list[Image], np.ndarray]:
    """Load every manifest entry, promote to RGB, optionally resize."""
    root = Path(root)
    images, labels = [], []
    for rel_path, label in manifest.entries:
        img = ensure_rgb(load_image(root / rel_path))
        if image_side is not None and (img.height, img.width) != (image_side, image_side):
            img = resize_bilinear(img, image_side, image_side)
        images.append(img)
        labels.append(label)
    return images, np.asarray(labels, dtype=np.intp)
