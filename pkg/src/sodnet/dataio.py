"""Binary PPM/PGM IO, training augmentation, and a seeded synthetic dataset."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import interp_matrix

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DataError(Exception):
    pass


class ParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float in [0, 1], or normalised
    mask: np.ndarray  # (H, W) bool
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise DataError(f"{self.id}: mask {self.mask.shape} does not match image {self.image.shape[1:]}")


# ---------------------------------------------------------------------------
# PNM


_WS = b" \t\n\r\v\f"
_INT = re.compile(rb"\d+")


def _header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    """Parse a P5/P6 header; returns (width, height, payload offset)."""
    if buf[:2] != magic:
        raise ParseError(f"expected magic {magic.decode()}, found {buf[:2]!r}", 0)
    pos = 2
    vals = []
    while len(vals) < 3:
        if pos >= len(buf):
            raise ParseError("truncated header", pos)
        ch = buf[pos : pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated header comment", pos)
            pos = end + 1
        elif ch and ch in _WS:
            pos += 1
        else:
            m = _INT.match(buf, pos)
            if m is None:
                raise ParseError(f"expected a decimal header field, found {ch!r}", pos)
            vals.append(int(m.group()))
            pos = m.end()
            if pos < len(buf) and buf[pos : pos + 1] not in _WS and buf[pos : pos + 1] != b"#":
                raise ParseError("malformed header field", pos)
    w, h, maxval = vals
    if pos >= len(buf) or buf[pos : pos + 1] not in _WS:
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    if maxval != 255:
        raise ParseError(f"only 8-bit files (maxval 255) are supported, got {maxval}", pos - 1)
    if w < 1 or h < 1:
        raise ParseError(f"invalid dimensions {w}x{h}", pos - 1)
    return w, h, pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode P5 (gray) to (H, W) or P6 (RGB) to (H, W, 3) uint8."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}", 0)
    w, h, off = _header(buf, magic)
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(buf) - off < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(buf) - off}", len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + arr.tobytes()


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def load_pgm(path) -> np.ndarray:
    """Gray map in [0, 1]."""
    arr = decode_pnm(_read(path))
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a P5 graymap")
    return arr.astype(np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    arr = decode_pnm(_read(path))
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a P5 graymap")
    return arr >= 128


def load_ppm(path) -> np.ndarray:
    """RGB image as (3, H, W) in [0, 1]."""
    arr = decode_pnm(_read(path))
    if arr.ndim != 3:
        raise DataError(f"{path}: expected a P6 pixmap")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def quantize(v: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(v, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_pgm(m: np.ndarray, path) -> None:
    """Write a [0, 1] map (bool masks allowed) as round(255 v)."""
    Path(path).write_bytes(encode_pnm(quantize(m)))


def save_ppm(image: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_pnm(quantize(np.asarray(image).transpose(1, 2, 0))))


# ---------------------------------------------------------------------------
# datasets on disk


def write_dataset(samples: list[Sample], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_ppm(s.image, root / "images" / f"{s.id}.ppm")
        save_pgm(s.mask, root / "masks" / f"{s.id}.pgm")


def list_stems(directory, suffix: str) -> list[str]:
    if not os.path.isdir(directory):
        raise DataError(f"not a directory: {directory}")
    return sorted(p.stem for p in Path(directory).iterdir() if p.suffix == suffix)


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    stems = list_stems(root / "images", ".ppm")
    mask_stems = set(list_stems(root / "masks", ".pgm"))
    missing = [s for s in stems if s not in mask_stems]
    if missing:
        raise DataError(f"images without masks: {', '.join(missing[:5])}")
    return [Sample(load_ppm(root / "images" / f"{s}.ppm"), load_mask(root / "masks" / f"{s}.pgm"), s)
            for s in stems]


# ---------------------------------------------------------------------------
# augmentation


def normalize_image(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=image.dtype)[:, None, None]
    s = np.asarray(std, dtype=image.dtype)[:, None, None]
    return (image - m) / s


def bilinear_resize(a: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes with half-pixel-centred bilinear weights."""
    h, w = a.shape[-2:]
    if (h, w) == tuple(out_hw):
        return a
    ry = interp_matrix(h, out_hw[0], np.float64)
    rx = interp_matrix(w, out_hw[1], np.float64)
    return ry @ a @ rx.T


def nearest_resize(a: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = a.shape[-2:]
    ho, wo = out_hw
    ys = np.minimum(((np.arange(ho) + 0.5) * h / ho).astype(int), h - 1)
    xs = np.minimum(((np.arange(wo) + 0.5) * w / wo).astype(int), w - 1)
    return a[..., ys[:, None], xs[None, :]]


def augment(sample: Sample, rng: np.random.Generator, crop_fraction: float = 0.9, rotate: bool = True,
            normalize: bool = True) -> Sample:
    """Random 90-degree rotation, random crop resized back, then channel normalisation.

    Image and mask are transformed jointly; the mask is resized with nearest
    neighbour so it stays binary.
    """
    img, mask = sample.image, sample.mask
    H, W = mask.shape
    if rotate:
        k = int(rng.integers(0, 4))
        img = np.rot90(img, k, axes=(1, 2))
        mask = np.rot90(mask, k)
    if crop_fraction < 1.0:
        h, w = mask.shape
        ch, cw = max(1, round(h * crop_fraction)), max(1, round(w * crop_fraction))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        img = img[:, y0 : y0 + ch, x0 : x0 + cw]
        mask = mask[y0 : y0 + ch, x0 : x0 + cw]
    if img.shape[1:] != (H, W):
        img = bilinear_resize(img, (H, W))
        mask = nearest_resize(mask, (H, W))
    img = np.ascontiguousarray(img)
    if normalize:
        img = normalize_image(img)
    return Sample(img, np.ascontiguousarray(mask), sample.id)


# ---------------------------------------------------------------------------
# synthetic data


def _texture(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Smooth colour field plus fine grain, values in [0, 1]."""
    base = rng.uniform(0.15, 0.85, size=3)
    gh, gw = max(2, H // 8), max(2, W // 8)
    coarse = rng.normal(0.0, 0.12, size=(3, gh, gw))
    field = bilinear_resize(coarse, (H, W))
    grain = rng.normal(0.0, 0.1, size=(3, H, W))
    return np.clip(base[:, None, None] + field + grain, 0.0, 1.0), base


def _shape_mask(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    ry = rng.uniform(0.12, 0.35) * H
    rx = rng.uniform(0.12, 0.35) * W
    cy = rng.uniform(ry * 0.5, H - ry * 0.5)
    cx = rng.uniform(rx * 0.5, W - rx * 0.5)
    if rng.random() < 0.5:
        return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy + 0.5 - cy) <= ry) & (np.abs(xx + 0.5 - cx) <= rx)


def _fill_color(rng: np.random.Generator, avoid: list[np.ndarray], min_dist: float = 0.35) -> np.ndarray:
    while True:
        c = rng.uniform(0.0, 1.0, size=3)
        if all(np.linalg.norm(c - a) >= min_dist for a in avoid):
            return c


def synth_sample(rng: np.random.Generator, H: int, W: int, idx: int, fg_band=(0.05, 0.6)) -> Sample:
    while True:
        n_shapes = int(rng.integers(1, 4))
        shapes = [_shape_mask(rng, H, W) for _ in range(n_shapes)]
        mask = np.logical_or.reduce(shapes)
        frac = mask.mean()
        if fg_band[0] < frac < fg_band[1]:
            break
    img, base = _texture(rng, H, W)
    colors: list[np.ndarray] = [base]
    for shp in shapes:
        c = _fill_color(rng, colors)
        colors.append(c)
        img = np.where(shp[None], c[:, None, None], img)
    # store at 8-bit precision so in-memory and on-disk datasets agree exactly
    img = quantize(img).astype(np.float64) / 255.0
    return Sample(img, mask, f"{idx:05d}")


def gen_synthetic(n: int, H: int, W: int, seed: int, fg_band=(0.05, 0.6)) -> list[Sample]:
    """``n`` images with 1-3 coloured ellipses/rectangles on textured noise; mask = union of shapes."""
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, H, W, i, fg_band) for i in range(n)]
