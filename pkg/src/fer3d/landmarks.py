"""Facial-landmark weight maps.

Each video frame carries 66 landmark points in source-image pixel
coordinates. For a feature map of some resolution the points are rescaled
onto the grid and a weight raster is built around them: a landmark cell
weighs exactly 1.0 and weights fall off linearly with Manhattan distance
(1 - slope * d, floored at 0) inside an odd-sized window centred on each
landmark. Cells covered by several windows take the maximum contribution;
cells outside every window take a configurable background weight
(default 0, which suppresses the residual shortcut away from the face's
expressive components).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import netpbm
from .errors import ContractError, DataError

NUM_LANDMARK_POINTS = 66


@dataclass(frozen=True)
class LandmarkFrame:
    """66 (x, y) landmark points for one frame, clamped inside the source image."""

    points: np.ndarray          # [66, 2] float64, columns (x, y)
    source_size: tuple[int, int]  # (height, width)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARK_POINTS, 2):
            raise ContractError(
                f"expected {NUM_LANDMARK_POINTS} (x, y) points, got shape {pts.shape}")
        h, w = self.source_size
        if h < 1 or w < 1:
            raise ContractError(f"invalid source size {self.source_size}")
        clamped = pts.copy()
        clamped[:, 0] = np.clip(pts[:, 0], 0.0, np.nextafter(float(w), 0.0))
        clamped[:, 1] = np.clip(pts[:, 1], 0.0, np.nextafter(float(h), 0.0))
        clamped.flags.writeable = False
        object.__setattr__(self, "points", clamped)
        object.__setattr__(self, "source_size", (int(h), int(w)))


@dataclass(frozen=True)
class WeightMap:
    """Per-frame 2-D weight raster, every cell in [0, 1]."""

    grid: np.ndarray  # [H', W'] float64

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid.shape


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


def rescale_landmarks(frame: LandmarkFrame, target: tuple[int, int]) -> np.ndarray:
    """Map landmark points onto a target grid; returns [66, 2] int (row, col).

    Coordinates scale by the extent ratio, round half-up to a cell, and
    clamp into the grid. Duplicate cells after rounding are retained.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ContractError(f"target resolution must be positive, got {target}")
    sh, sw = frame.source_size
    cols = _round_half_up(frame.points[:, 0] * (tw / sw))
    rows = _round_half_up(frame.points[:, 1] * (th / sh))
    return np.stack([np.clip(rows, 0, th - 1), np.clip(cols, 0, tw - 1)], axis=1)


def rasterize_weight_map(points: np.ndarray, resolution: tuple[int, int],
                         window: int = 7, slope: float = 0.1,
                         background: float = 0.0) -> WeightMap:
    """Build the weight raster for grid-space landmark ``points`` (row, col).

    Within a window, weight = max(0, 1 - slope * manhattan_distance); when
    windows overlap, the per-cell maximum over contributing landmarks wins.
    """
    window = int(window)
    if window < 1 or window % 2 == 0:
        raise ContractError(f"window must be odd and >= 1, got {window}")
    h, w = int(resolution[0]), int(resolution[1])
    if h < 1 or w < 1:
        raise ContractError(f"resolution must be positive, got {resolution}")
    if not 0.0 <= background <= 1.0:
        raise ContractError(f"background weight must lie in [0, 1], got {background}")
    grid = np.full((h, w), float(background), dtype=np.float64)
    half = window // 2
    offsets = np.abs(np.arange(-half, half + 1))
    taper = np.maximum(0.0, 1.0 - slope * np.add.outer(offsets, offsets))
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    for r, c in pts:
        r0, r1 = max(r - half, 0), min(r + half, h - 1)
        c0, c1 = max(c - half, 0), min(c + half, w - 1)
        block = taper[r0 - r + half: r1 - r + half + 1,
                      c0 - c + half: c1 - c + half + 1]
        np.maximum(grid[r0:r1 + 1, c0:c1 + 1], block,
                   out=grid[r0:r1 + 1, c0:c1 + 1])
    return WeightMap(grid=grid)


def temporal_frame_map(t_out: int, t_in: int) -> list[int]:
    """Map feature-map step i' to input frame floor(i' * T / T')."""
    if t_in < 1 or t_out < 1:
        raise ContractError(f"frame counts must be positive: {t_in} -> {t_out}")
    return [(i * t_in) // t_out for i in range(t_out)]


def mask_for_feature_map(frames: Sequence[LandmarkFrame],
                         feature_shape: tuple,
                         window: int = 7, slope: float = 0.1,
                         background: float = 0.0,
                         dtype=np.float32) -> np.ndarray:
    """Stack per-frame weight rasters for a [T', H', W', C] feature map.

    Returns [T', H', W', 1]; the trailing singleton axis broadcasts one mask
    across every channel.
    """
    t_out, h, w = int(feature_shape[0]), int(feature_shape[1]), int(feature_shape[2])
    if len(frames) == 0:
        raise ContractError("mask_for_feature_map needs at least one landmark frame")
    mapping = (range(t_out) if len(frames) == t_out
               else temporal_frame_map(t_out, len(frames)))
    slabs = []
    for i in mapping:
        pts = rescale_landmarks(frames[i], (h, w))
        wm = rasterize_weight_map(pts, (h, w), window=window, slope=slope,
                                  background=background)
        slabs.append(wm.grid.astype(dtype))
    return np.stack(slabs, axis=0)[..., None]


class MaskCache:
    """Memoises rasterized masks per (landmark content, resolution, taper)."""

    def __init__(self):
        self._store: dict[tuple, np.ndarray] = {}

    @staticmethod
    def _digest(frames: Sequence[LandmarkFrame]) -> bytes:
        h = hashlib.sha1()
        for f in frames:
            h.update(np.asarray(f.source_size, dtype=np.int64).tobytes())
            h.update(f.points.tobytes())
        return h.digest()

    def get(self, frames: Sequence[LandmarkFrame], feature_shape: tuple,
            window: int, slope: float, background: float,
            dtype=np.float32) -> np.ndarray:
        key = (self._digest(frames), tuple(int(s) for s in feature_shape[:3]),
               int(window), float(slope), float(background), np.dtype(dtype).str)
        mask = self._store.get(key)
        if mask is None:
            mask = mask_for_feature_map(frames, feature_shape, window=window,
                                        slope=slope, background=background,
                                        dtype=dtype)
            self._store[key] = mask
        return mask


def read_landmarks_csv(path) -> np.ndarray:
    """Read one landmark CSV (row = frame_index, x0, y0, ..., x65, y65).

    A header row is auto-detected. Returns [n_frames, 66, 2] ordered by
    frame index, which must cover 0..n-1 exactly once.
    """
    path = Path(path)
    rows: dict[int, np.ndarray] = {}
    with open(path, newline="") as fp:
        for lineno, row in enumerate(csv.reader(fp)):
            cells = [c.strip() for c in row if c.strip() != ""]
            if not cells:
                continue
            try:
                values = [float(c) for c in cells]
            except ValueError:
                if lineno == 0:
                    continue  # header
                raise DataError(f"{path}:{lineno + 1}: non-numeric cell")
            if len(values) != 1 + 2 * NUM_LANDMARK_POINTS:
                raise DataError(
                    f"{path}:{lineno + 1}: expected {1 + 2 * NUM_LANDMARK_POINTS} "
                    f"columns, got {len(values)}")
            idx = int(values[0])
            if idx in rows:
                raise DataError(f"{path}: duplicate frame index {idx}")
            rows[idx] = np.asarray(values[1:], dtype=np.float64).reshape(
                NUM_LANDMARK_POINTS, 2)
    if not rows:
        raise DataError(f"{path}: no landmark rows")
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise DataError(f"{path}: frame indices must cover 0..{n - 1}")
    return np.stack([rows[i] for i in range(n)], axis=0)


def write_landmarks_csv(path, tracks: np.ndarray) -> None:
    tracks = np.asarray(tracks)
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        header = ["frame"]
        for i in range(NUM_LANDMARK_POINTS):
            header += [f"x{i}", f"y{i}"]
        writer.writerow(header)
        for idx, frame in enumerate(tracks):
            writer.writerow([idx] + [f"{v:.4f}" for v in frame.reshape(-1)])


def write_mask_pgm(path, weight_map: WeightMap) -> None:
    """Export a weight raster as 8-bit grayscale PGM (weight 1.0 -> 255)."""
    img = np.clip(np.round(weight_map.grid * 255.0), 0, 255).astype(np.uint8)
    netpbm.write_image(path, img)
