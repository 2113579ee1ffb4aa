"""Synthetic phantoms, PGM raster I/O, dataset splits and batching."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import DTYPE, Rng, ShapeError, Tensor


class PGMError(ValueError):
    pass


class BadMagicError(PGMError):
    pass


class TruncatedPayloadError(PGMError):
    pass


class NonBinaryMaskError(PGMError):
    pass


class UnsupportedMaxvalError(PGMError):
    pass


class PhantomGenerationError(RuntimeError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    mask: np.ndarray  # [1, H, W] in {0, 1}
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=DTYPE)
        self.mask = np.asarray(self.mask, dtype=DTYPE)
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.mask.ndim == 2:
            self.mask = self.mask[None]
        if self.image.shape != self.mask.shape or self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ShapeError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} "
                             "must both be [1,H,W]")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise NonBinaryMaskError(f"sample {self.id}: mask is not binary")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    min_axis_frac: float = 1 / 8
    max_axis_frac: float = 1 / 3
    center_jitter_frac: float = 1 / 6
    max_lobes: int = 2
    offset_range: tuple[float, float] = (0.25, 0.45)
    base_range: tuple[float, float] = (0.2, 0.4)
    noise_sigma: float = 0.05
    blur_width: int = 3
    min_fraction: float = 0.02
    max_fraction: float = 0.6
    max_tries: int = 20

    def __post_init__(self):
        if self.size < 4 or self.size % 4:
            raise ValueError(f"phantom size must be a positive multiple of 4, got {self.size}")
        if not 0 < self.min_axis_frac <= self.max_axis_frac:
            raise ValueError("axis range is not well ordered")
        for lo, hi in (self.offset_range, self.base_range, (self.min_fraction, self.max_fraction)):
            if lo > hi:
                raise ValueError(f"range ({lo}, {hi}) is not well ordered")
        if self.max_lobes < 1 or self.blur_width < 1 or self.noise_sigma < 0:
            raise ValueError("max_lobes and blur_width must be >= 1, noise_sigma >= 0")


def _ellipse(size: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def box_blur(img: np.ndarray, width: int) -> np.ndarray:
    """Mean filter with edge replication; width 1 is the identity."""
    if width <= 1:
        return img.copy()
    lo = width // 2
    hi = width - 1 - lo
    padded = np.pad(img, ((lo, hi), (lo, hi)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (width, width))
    return win.mean(axis=(-1, -2))


def phantom_mask(rng: Rng, cfg: PhantomConfig) -> np.ndarray:
    n = cfg.size
    lo, hi = n * cfg.min_axis_frac, n * cfg.max_axis_frac
    jitter = n * cfg.center_jitter_frac
    cy, cx = n / 2 + rng.uniform(-jitter, jitter), n / 2 + rng.uniform(-jitter, jitter)
    lobes = int(rng.integers(1, cfg.max_lobes + 1))
    mask = np.zeros((n, n), dtype=bool)
    for k in range(lobes):
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        theta = rng.uniform(0.0, math.pi)
        if k:
            # secondary lobes overlap the first one
            ang = rng.uniform(0.0, 2 * math.pi)
            dist = rng.uniform(0.3, 0.8) * lo * 2
            oy, ox = cy + dist * math.sin(ang), cx + dist * math.cos(ang)
        else:
            oy, ox = cy, cx
        mask |= _ellipse(n, oy, ox, a, b, theta)
    return mask


def generate_phantom(rng: Rng, cfg: PhantomConfig = PhantomConfig(), sample_id: str = "phantom") -> Sample:
    """A 1-2 lobe elliptical organ on a flat background with blur and noise.

    Masks whose foreground fraction falls outside the configured bounds are
    redrawn, up to ``max_tries`` times.
    """
    n = cfg.size
    for _ in range(cfg.max_tries):
        mask = phantom_mask(rng, cfg)
        frac = mask.mean()
        if cfg.min_fraction <= frac <= cfg.max_fraction:
            break
    else:
        raise PhantomGenerationError(f"no mask within foreground bounds after {cfg.max_tries} tries")
    base = rng.uniform(*cfg.base_range)
    offset = rng.uniform(*cfg.offset_range)
    image = base + offset * mask.astype(DTYPE)
    image = box_blur(image, cfg.blur_width)
    if cfg.noise_sigma > 0:
        noise = np.clip(rng.normal(0.0, cfg.noise_sigma, (n, n)), -3 * cfg.noise_sigma, 3 * cfg.noise_sigma)
        image = image + noise
    image = np.clip(image, 0.0, 1.0)
    return Sample(image[None], mask.astype(DTYPE)[None], sample_id)


def generate_phantoms(count: int, seed: int, cfg: PhantomConfig = PhantomConfig()) -> list[Sample]:
    root = Rng(seed)
    return [generate_phantom(root.derive(i), cfg, f"{i:04d}") for i in range(count)]


# ---------------------------------------------------------------------------
# PGM


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_header(raw: bytes) -> tuple[int, int, int, int]:
    pos, tokens = 0, []
    while len(tokens) < 4:
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise TruncatedPayloadError("PGM header is incomplete")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise BadMagicError(f"expected binary PGM magic 'P5', got {tokens[0][:8]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMError("malformed PGM header") from exc
    # exactly one whitespace byte separates the header from the raster
    return w, h, maxval, pos + 1


def read_pgm_raw(path) -> tuple[np.ndarray, int]:
    """Return the integer raster and its maxval."""
    raw = Path(path).read_bytes()
    w, h, maxval, start = _read_header(raw)
    if maxval not in (255, 65535):
        raise UnsupportedMaxvalError(f"maxval must be 255 or 65535, got {maxval}")
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    payload = raw[start : start + need]
    if len(payload) < need or w < 1 or h < 1:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w), maxval


def load_pgm(path, mask: bool = False) -> np.ndarray:
    """Load a P5 PGM as float64 in [0, 1]; masks must contain only 0 and maxval."""
    ints, maxval = read_pgm_raw(path)
    if mask and not np.isin(ints, (0, maxval)).all():
        bad = sorted(set(np.unique(ints).tolist()) - {0, maxval})[:3]
        raise NonBinaryMaskError(f"{path}: mask contains values {bad} other than 0/{maxval}")
    return ints.astype(DTYPE) / maxval


def save_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a [H, W] (or [1, H, W]) array in [0, 1] as binary PGM."""
    if maxval not in (255, 65535):
        raise UnsupportedMaxvalError(f"maxval must be 255 or 65535, got {maxval}")
    img = np.asarray(image, dtype=DTYPE)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ShapeError(f"save_pgm expects a 2D image, got {img.shape}")
    ints = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = ">u1" if maxval == 255 else ">u2"
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(ints.astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# dataset layout, splits, batching


@dataclass
class DatasetSplit:
    train: list[str]
    test: list[str]


def split_dataset(ids: Sequence[str], train_fraction: float, seed: int) -> DatasetSplit:
    """Seeded shuffle, then the first ceil(fraction * n) ids go to training."""
    ids = list(ids)
    n = len(ids)
    if n < 2:
        raise ValueError(f"need at least 2 ids to split, got {n}")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    # tolerance keeps 95/131 * 131 from rounding up to 96
    k = math.ceil(train_fraction * n - 1e-9)
    k = min(max(k, 1), n - 1)
    perm = Rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    return DatasetSplit(shuffled[:k], shuffled[k:])


def write_split(path, split: DatasetSplit) -> None:
    lines = ["[train]", *split.train, "", "[test]", *split.test, ""]
    Path(path).write_text("\n".join(lines))


def read_split(path) -> DatasetSplit:
    sections: dict[str, list[str]] = {"train": [], "test": []}
    current = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line in ("[train]", "[test]"):
            current = line[1:-1]
        elif current is None:
            raise ValueError(f"{path}: id before any section header")
        else:
            sections[current].append(line)
    return DatasetSplit(sections["train"], sections["test"])


def save_dataset(root, samples: Sequence[Sample], split: DatasetSplit | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_pgm(root / "images" / f"{s.id}.pgm", s.image)
        save_pgm(root / "masks" / f"{s.id}.pgm", s.mask)
    if split is not None:
        write_split(root / "split.txt", split)


def load_sample(root, sample_id: str) -> Sample:
    root = Path(root)
    image = load_pgm(root / "images" / f"{sample_id}.pgm")
    mask = load_pgm(root / "masks" / f"{sample_id}.pgm", mask=True)
    return Sample(image[None], mask[None], sample_id)


def dataset_ids(root) -> list[str]:
    return sorted(p.stem for p in (Path(root) / "images").glob("*.pgm"))


def load_dataset(root, ids: Sequence[str] | None = None) -> list[Sample]:
    ids = dataset_ids(root) if ids is None else ids
    return [load_sample(root, i) for i in ids]


def iterations_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def epoch_order(n: int, rng: Rng, epoch: int) -> np.ndarray:
    return rng.derive(epoch).permutation(n)


def make_batch(samples: Sequence[Sample]) -> tuple[Tensor, Tensor]:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"cannot batch samples of different sizes: {sorted(shapes)}")
    return (Tensor(np.stack([s.image for s in samples])),
            Tensor(np.stack([s.mask for s in samples])))


def unbatch(image: Tensor, mask: Tensor, ids: Sequence[str]) -> list[Sample]:
    return [Sample(image.data[i], mask.data[i], sid) for i, sid in enumerate(ids)]


def batches(samples: Sequence[Sample], batch_size: int, rng: Rng,
            epoch: int = 0) -> Iterator[tuple[Tensor, Tensor]]:
    """Seeded epoch permutation; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len({s.image.shape for s in samples}) > 1:
        raise ShapeError("samples have heterogeneous sizes; resize them before batching")
    order = epoch_order(len(samples), rng, epoch)
    for start in range(0, len(samples), batch_size):
        yield make_batch([samples[i] for i in order[start : start + batch_size]])
