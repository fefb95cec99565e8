"""8-bit grayscale images, binary PGM I/O and CLAHE.

CLAHE algorithm, stated precisely because golden outputs depend on it:

1. If the image size is not a multiple of the tile grid, it is padded on the
   bottom/right by mirror reflection (edge pixel not repeated) for the
   purpose of building tile histograms only.
2. Each tile gets a 256-bin histogram. The clip ceiling is
   ``max(int(clip_limit * tile_area / 256), 1)``. Counts above it are cut;
   the total excess is spread evenly over all bins (integer division) and
   the remainder is added one count at a time to bins ``0, step, 2*step, ...``
   with ``step = max(256 // remainder, 1)``.
3. The tile mapping is ``round(cumsum * (255 / tile_area))`` evaluated in
   float32 and rounded half to even, saturated to [0, 255].
4. Every output pixel bilinearly blends the mappings of the four nearest tile
   centres (float32 arithmetic). Tile indices beyond the grid are clamped to
   the edge tile.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadDimensions, BadMagic, ImageTooSmall, Truncated, ValidationError

BINS = 256


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Row-major uint8 image; ``data`` has shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValidationError(f"expected a 2-D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValidationError("intensities must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class ClaheConfig:
    clip_limit: float = 2.0
    grid_x: int = 8
    grid_y: int = 8
    bins: int = BINS

    def __post_init__(self):
        if self.clip_limit < 1.0:
            raise ValidationError(f"clip_limit must be >= 1, got {self.clip_limit}")
        if self.grid_x < 1 or self.grid_y < 1:
            raise ValidationError("tile grid dimensions must be >= 1")
        if self.bins != BINS:
            raise ValidationError("only 256 bins are supported")


def _reflect101_pad(img: np.ndarray, pad_y: int, pad_x: int) -> np.ndarray:
    if pad_y == 0 and pad_x == 0:
        return img
    return np.pad(img, ((0, pad_y), (0, pad_x)), mode="reflect")


def _clip_histogram(hist: np.ndarray, ceiling: int) -> np.ndarray:
    hist = hist.copy()
    excess = int(np.maximum(hist - ceiling, 0).sum())
    np.minimum(hist, ceiling, out=hist)
    batch, residual = divmod(excess, BINS)
    hist += batch
    if residual:
        step = max(BINS // residual, 1)
        i = 0
        while i < BINS and residual > 0:
            hist[i] += 1
            i += step
            residual -= 1
    return hist


def tile_mappings(img: GrayImage, cfg: ClaheConfig) -> tuple[np.ndarray, int, int]:
    """Per-tile lookup tables, shape (grid_y, grid_x, 256), plus tile width/height."""
    src = img.data
    h, w = src.shape
    pad_y = (cfg.grid_y - h % cfg.grid_y) % cfg.grid_y
    pad_x = (cfg.grid_x - w % cfg.grid_x) % cfg.grid_x
    ext = _reflect101_pad(src, pad_y, pad_x)
    th, tw = ext.shape[0] // cfg.grid_y, ext.shape[1] // cfg.grid_x
    area = th * tw
    ceiling = max(int(cfg.clip_limit * area / BINS), 1)
    scale = np.float32(BINS - 1) / np.float32(area)
    luts = np.empty((cfg.grid_y, cfg.grid_x, BINS), dtype=np.uint8)
    for ty in range(cfg.grid_y):
        for tx in range(cfg.grid_x):
            tile = ext[ty * th:(ty + 1) * th, tx * tw:(tx + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=BINS).astype(np.int64)
            hist = _clip_histogram(hist, ceiling)
            cdf = np.cumsum(hist).astype(np.float32)
            luts[ty, tx] = np.clip(np.rint(cdf * scale), 0, 255).astype(np.uint8)
    return luts, tw, th


def _interp_axis(n: int, tile: int, tiles: int):
    pos = np.arange(n, dtype=np.float32) * (np.float32(1.0) / np.float32(tile)) - np.float32(0.5)
    lo = np.floor(pos).astype(np.int64)
    frac = (pos - lo.astype(np.float32)).astype(np.float32)
    hi = np.minimum(lo + 1, tiles - 1)
    lo = np.maximum(lo, 0)
    return lo, hi, frac, (np.float32(1.0) - frac).astype(np.float32)


def clahe(img: GrayImage, cfg: ClaheConfig | None = None) -> GrayImage:
    """Contrast-limited adaptive histogram equalisation; output has the input's shape."""
    cfg = cfg or ClaheConfig()
    if img.data.size == 0 or img.width < cfg.grid_x or img.height < cfg.grid_y:
        raise ImageTooSmall(
            f"{img.width}x{img.height} image is smaller than the {cfg.grid_x}x{cfg.grid_y} grid")
    luts, tw, th = tile_mappings(img, cfg)
    x1, x2, xa, xa1 = _interp_axis(img.width, tw, cfg.grid_x)
    y1, y2, ya, ya1 = _interp_axis(img.height, th, cfg.grid_y)
    src = img.data.astype(np.int64)
    f32 = luts.astype(np.float32)
    top_l = f32[y1[:, None], x1[None, :], src]
    top_r = f32[y1[:, None], x2[None, :], src]
    bot_l = f32[y2[:, None], x1[None, :], src]
    bot_r = f32[y2[:, None], x2[None, :], src]
    top = top_l * xa1[None, :] + top_r * xa[None, :]
    bot = bot_l * xa1[None, :] + bot_r * xa[None, :]
    res = top * ya1[:, None] + bot * ya[:, None]
    return GrayImage(np.clip(np.rint(res), 0, 255).astype(np.uint8))


def _parse_pgm(blob: bytes, path) -> tuple[int, int, int, bytes]:
    if blob[:2] != b"P5":
        raise BadMagic(f"{path}: expected binary PGM magic P5, got {blob[:2]!r}")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            eol = blob.find(b"\n", pos)
            pos = len(blob) if eol < 0 else eol + 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise BadDimensions(f"{path}: unreadable PGM header")
        tokens.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise Truncated(f"{path}: PGM header not terminated")
    width, height, maxval = tokens
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise BadDimensions(f"{path}: invalid size {width}x{height} or maxval {maxval}")
    return width, height, maxval, blob[pos + 1:]


def load_pgm(path) -> GrayImage:
    """Read an 8-bit binary PGM (P5, maxval <= 255)."""
    blob = Path(path).read_bytes()
    width, height, maxval, payload = _parse_pgm(blob, path)
    if maxval > 255:
        raise BadDimensions(f"{path}: maxval {maxval} is not 8-bit; use recon.load_depth for 16-bit maps")
    need = width * height
    if len(payload) < need:
        raise Truncated(f"{path}: header declares {need} bytes, payload has {len(payload)}")
    data = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width)
    return GrayImage(data.copy())


def load_pgm16(path) -> np.ndarray:
    """Read a 16-bit (big-endian) P5 PGM as a float64 array."""
    blob = Path(path).read_bytes()
    width, height, maxval, payload = _parse_pgm(blob, path)
    dtype = ">u2" if maxval > 255 else np.uint8
    need = width * height * (2 if maxval > 255 else 1)
    if len(payload) < need:
        raise Truncated(f"{path}: header declares {need} bytes, payload has {len(payload)}")
    return np.frombuffer(payload[:need], dtype=dtype).reshape(height, width).astype(np.float64)


def save_pgm(img: GrayImage, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.data.tobytes())


def save_pgm16(values: np.ndarray, path) -> None:
    values = np.asarray(values)
    if values.ndim != 2 or values.min() < 0 or values.max() > 65535:
        raise ValidationError("16-bit PGM needs a 2-D array with values in [0, 65535]")
    h, w = values.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + values.astype(">u2").tobytes())
