"""Pixel-level error metrics over sets of 8-bit depth images.

Every metric averages over all colour channels of all pixels in the whole
set (not per image). Images may be H x W (one channel) or C x H x W.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidConfigError

# log(256 - d) for every 8-bit code; natural log
_LOG_TABLE = np.log(256.0 - np.arange(256, dtype=np.float64))


def as_depth_image(img) -> np.ndarray:
    """Validate an 8-bit depth image and return it as a C x H x W uint8 array."""
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DimensionMismatchError(f"depth image must be HxW or CxHxW, got {a.shape}", "image")
    if a.dtype != np.uint8:
        if np.issubdtype(a.dtype, np.floating) and not np.all(a == np.round(a)):
            raise InvalidConfigError("depth image values must be integers")
        if a.size and (a.min() < 0 or a.max() > 255):
            raise InvalidConfigError("depth image values must lie in [0, 255]")
        a = a.astype(np.uint8)
    return a


def is_grayscale(img) -> bool:
    a = as_depth_image(img)
    return bool(np.all(a == a[:1]))


@dataclass
class MetricsReport:
    mse: float
    ae: float
    rmsle: float
    n_pixels: int
    n_channels: int
    n_images: int

    def to_dict(self):
        return asdict(self)


class _Accumulator:
    """Single pass over image pairs; integer sums are exact."""

    def __init__(self):
        self.sq = 0
        self.abs = 0
        self.log_sq = 0.0
        self.n_values = 0
        self.n_pixels = 0
        self.n_channels = None
        self.n_images = 0

    def add(self, real, pred):
        r, p = as_depth_image(real), as_depth_image(pred)
        if r.shape != p.shape:
            raise DimensionMismatchError(f"image shapes differ: {r.shape} vs {p.shape}", "image")
        if self.n_channels is None:
            self.n_channels = r.shape[0]
        elif self.n_channels != r.shape[0]:
            raise DimensionMismatchError("channel count varies across the set", "channels")
        d = r.astype(np.int64) - p.astype(np.int64)
        self.sq += int((d * d).sum())
        self.abs += int(np.abs(d).sum())
        ld = _LOG_TABLE[r] - _LOG_TABLE[p]
        self.log_sq += float((ld * ld).sum())
        self.n_values += d.size
        self.n_pixels += r.shape[1] * r.shape[2]
        self.n_images += 1

    def report(self):
        if self.n_values == 0:
            raise InvalidConfigError("cannot evaluate an empty image set")
        n = self.n_values
        return MetricsReport(self.sq / n, self.abs / n, float(np.sqrt(self.log_sq / n)),
                             self.n_pixels, self.n_channels, self.n_images)


def _pairs(real, pred):
    real, pred = list(real), list(pred)
    if len(real) != len(pred):
        raise DimensionMismatchError(f"{len(real)} real images vs {len(pred)} predictions", "set")
    return zip(real, pred)


def evaluate(real, pred) -> MetricsReport:
    acc = _Accumulator()
    for r, p in _pairs(real, pred):
        acc.add(r, p)
    return acc.report()


def mse(real, pred) -> float:
    return evaluate(real, pred).mse


def ae(real, pred) -> float:
    return evaluate(real, pred).ae


def rmsle(real, pred) -> float:
    return evaluate(real, pred).rmsle


def write_report(report: MetricsReport, json_path=None, csv_path=None, extra=None):
    data = report.to_dict()
    if extra:
        data.update(extra)
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in report.to_dict().items():
                w.writerow([k, v])
    return data
