"""Thresholding, largest-component clean-up, overlap metrics, overlays and CSV reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .tensor import ShapeError

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
EIGHT_CONNECTED = ndimage.generate_binary_structure(2, 2)

TP_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)


class NonBinaryError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class SampleMetrics:
    id: str
    dice: float
    precision: float
    recall: float
    counts: ConfusionCounts


def threshold(probs: np.ndarray, t: float = 0.5) -> np.ndarray:
    if not 0 < t < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return (np.asarray(probs) >= t).astype(np.uint8)


def _binary(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise NonBinaryError(f"{name} is not a binary mask")
    return x.astype(bool)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def scores(c: ConfusionCounts) -> tuple[float, float, float]:
    """(dice, precision, recall). Both masks empty scores 1/1/1; any other
    zero denominator scores that metric 0."""
    if c.tp + c.fp + c.fn == 0:
        return 1.0, 1.0, 1.0
    dice = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return dice, precision, recall


def metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float, ConfusionCounts]:
    c = confusion(pred, gt)
    return (*scores(c), c)


def fill_holes(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Flip background components that do not touch the image border."""
    m = np.asarray(mask).astype(bool)
    structure = FOUR_CONNECTED if connectivity == 4 else EIGHT_CONNECTED
    labels, n = ndimage.label(~m, structure=structure)
    if n == 0:
        return m.astype(np.uint8)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    holes = ~np.isin(labels, border) & (labels > 0)
    return (m | holes).astype(np.uint8)


def largest_component(mask: np.ndarray, connectivity: int = 4, fill: bool = False) -> np.ndarray:
    """Keep the largest foreground component (ties: first in raster order),
    optionally filling enclosed holes afterwards."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    m = _binary(mask, "mask")
    if m.ndim != 2:
        raise ShapeError(f"largest_component expects a 2D mask, got {m.shape}")
    structure = FOUR_CONNECTED if connectivity == 4 else EIGHT_CONNECTED
    labels, n = ndimage.label(m, structure=structure)
    if n == 0:
        return np.zeros(m.shape, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    keep = (labels == int(np.argmax(sizes)) + 1).astype(np.uint8)
    return fill_holes(keep, connectivity) if fill else keep


def postprocess(mask: np.ndarray, largest: bool = True, fill: bool = False, connectivity: int = 4) -> np.ndarray:
    m = np.asarray(mask).astype(np.uint8)
    if largest:
        m = largest_component(m, connectivity)
    if fill:
        m = fill_holes(m, connectivity)
    return m


def overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RGB uint8 raster: grayscale image with TP green, FP red, FN blue."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    p, g = p.reshape(p.shape[-2:]) if p.ndim == 3 else p, g.reshape(g.shape[-2:]) if g.ndim == 3 else g
    if not img.shape == p.shape == g.shape:
        raise ShapeError(f"overlay shapes differ: image {img.shape}, pred {p.shape}, gt {g.shape}")
    gray = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    rgb[p & g] = TP_COLOR
    rgb[p & ~g] = FP_COLOR
    rgb[~p & g] = FN_COLOR
    return rgb


def save_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"save_ppm expects [H,W,3], got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# reports


def evaluate(ids: Sequence[str], preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> list[SampleMetrics]:
    rows = []
    for sid, p, g in sorted(zip(ids, preds, gts), key=lambda r: r[0]):
        d, pr, rc, c = metrics(p, g)
        rows.append(SampleMetrics(sid, d, pr, rc, c))
    return rows


def aggregate(rows: Sequence[SampleMetrics]) -> tuple[float, float, float]:
    """Unweighted per-sample means of (dice, precision, recall)."""
    if not rows:
        raise ValueError("no samples to aggregate")
    return (float(np.mean([r.dice for r in rows])),
            float(np.mean([r.precision for r in rows])),
            float(np.mean([r.recall for r in rows])))


def write_report(rows: Sequence[SampleMetrics], path) -> tuple[float, float, float]:
    """CSV with one row per sample and a final MEAN row (counts summed)."""
    mean = aggregate(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "dice", "precision", "recall", "tp", "fp", "fn", "tn"])
        for r in rows:
            c = r.counts
            w.writerow([r.id, f"{r.dice:.4f}", f"{r.precision:.4f}", f"{r.recall:.4f}", c.tp, c.fp, c.fn, c.tn])
        tot = [sum(getattr(r.counts, k) for r in rows) for k in ("tp", "fp", "fn", "tn")]
        w.writerow(["MEAN", *(f"{v:.4f}" for v in mean), *tot])
    return mean


def write_method_table(rows: Sequence[tuple[str, float, float, float]], path) -> None:
    """Method-level comparison: method, dice, precision, recall (4 decimals)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "dice", "precision", "recall"])
        for name, d, p, r in rows:
            w.writerow([name, f"{d:.4f}", f"{p:.4f}", f"{r:.4f}"])
