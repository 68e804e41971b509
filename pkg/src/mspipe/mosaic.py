"""Snapshot-mosaic sensor model: raw frames, band layout, demosaicing.

The sensor covers its pixels with a repeating 4x4 tile of spectral filters,
so one raw frame carries 16 spectral bands at quarter spatial resolution.
Demosaicing here is a pure rearrangement (one sample per band per 4x4
super-pixel, no interpolation), which makes it exactly invertible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import Rect

MOSAIC_PERIOD = 4
N_BANDS = MOSAIC_PERIOD * MOSAIC_PERIOD


@dataclass(frozen=True)
class MosaicLayout:
    """Assignment of the 16 band indices to cells of the 4x4 mosaic tile.

    ``band_of_cell[r][c]`` is the band index sensed by pixels at
    (row mod 4, col mod 4) == (r, c). The grid must be a bijection onto
    0..15; the physical assignment is vendor data, so it is loaded from a
    JSON file rather than hard-coded.
    """

    band_of_cell: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.band_of_cell, dtype=np.int64)
        if grid.shape != (MOSAIC_PERIOD, MOSAIC_PERIOD):
            raise ValueError(f"band_of_cell must be 4x4, got {grid.shape}")
        if sorted(grid.ravel().tolist()) != list(range(N_BANDS)):
            raise ValueError("band_of_cell must map the 16 cells onto bands 0..15")
        object.__setattr__(self, "band_of_cell", grid)

    @classmethod
    def row_major(cls) -> "MosaicLayout":
        """Default layout: cell (r, c) senses band 4r + c."""
        return cls(np.arange(N_BANDS).reshape(MOSAIC_PERIOD, MOSAIC_PERIOD))

    @classmethod
    def from_json(cls, path) -> "MosaicLayout":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            grid = doc["band_of_cell"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: missing 'band_of_cell' key") from exc
        return cls(np.asarray(grid))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"band_of_cell": self.band_of_cell.tolist()}, fh, indent=2)
            fh.write("\n")

    @property
    def cell_of_band(self) -> np.ndarray:
        """Flat cell index (4r + c) holding each band; inverse of band_of_cell."""
        return np.argsort(self.band_of_cell.ravel())


def band_index(layout: MosaicLayout, row: int, col: int, bounds=None) -> int:
    """Band sensed at pixel (row, col); 4-periodic in both axes.

    ``bounds`` is an optional (height, width) pair; coordinates outside it
    (or negative ones) raise IndexError.
    """
    if row < 0 or col < 0:
        raise IndexError(f"negative pixel coordinate ({row}, {col})")
    if bounds is not None:
        height, width = bounds
        if row >= height or col >= width:
            raise IndexError(
                f"pixel ({row}, {col}) outside frame {height}x{width}"
            )
    return int(layout.band_of_cell[row % MOSAIC_PERIOD, col % MOSAIC_PERIOD])


@dataclass
class RawMosaicFrame:
    """One raw sensor snapshot: a (height, width) grid of 16-bit counts."""

    pixels: np.ndarray
    bit_depth: int = 10
    timestamp: float = 0.0
    exposure_time_us: float = 0.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint16:
            raise ValueError(f"pixels must be uint16, got {self.pixels.dtype}")
        h, w = self.pixels.shape
        if h % MOSAIC_PERIOD or w % MOSAIC_PERIOD:
            raise DataError(
                f"frame dimensions {w}x{h} not divisible by the mosaic period {MOSAIC_PERIOD}"
            )
        full_scale = 1 << self.bit_depth
        if self.pixels.size and int(self.pixels.max()) >= full_scale:
            raise DataError(
                f"pixel value {int(self.pixels.max())} exceeds {self.bit_depth}-bit range"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def full_scale(self) -> int:
        """Largest representable count, 2^bit_depth - 1."""
        return (1 << self.bit_depth) - 1

    def band_at(self, row: int, col: int, layout: MosaicLayout) -> int:
        return band_index(layout, row, col, bounds=self.pixels.shape)


@dataclass
class BandCube:
    """Demosaiced image cube: (n_rows, n_cols, 16) band values."""

    data: np.ndarray
    timestamp: float = 0.0
    bit_depth: int = 10

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != N_BANDS:
            raise ValueError(
                f"cube must be (rows, cols, {N_BANDS}), got shape {self.data.shape}"
            )

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]

    @property
    def n_bands(self) -> int:
        return self.data.shape[2]


def demosaic(frame: RawMosaicFrame, layout: MosaicLayout) -> BandCube:
    """Rearrange a raw mosaic frame into a (h/4, w/4, 16) band cube.

    Each 4x4 super-pixel contributes exactly one sample per band; no
    interpolation across super-pixels, so the operation is invertible by
    :func:`remosaic`.
    """
    h, w = frame.pixels.shape
    n, m = h // MOSAIC_PERIOD, w // MOSAIC_PERIOD
    tiles = (
        frame.pixels.reshape(n, MOSAIC_PERIOD, m, MOSAIC_PERIOD)
        .transpose(0, 2, 1, 3)
        .reshape(n, m, N_BANDS)
    )
    data = np.ascontiguousarray(tiles[:, :, layout.cell_of_band])
    return BandCube(data, timestamp=frame.timestamp, bit_depth=frame.bit_depth)


def remosaic(cube: BandCube, layout: MosaicLayout, exposure_time_us: float = 0.0) -> RawMosaicFrame:
    """Exact inverse of :func:`demosaic`: scatter bands back onto the mosaic."""
    data = cube.data
    if data.dtype != np.uint16:
        if np.issubdtype(data.dtype, np.floating):
            if not np.all(np.isfinite(data)):
                raise DataError("cube contains non-finite values")
            if data.size and (data.min() < 0 or data.max() > (1 << cube.bit_depth) - 1):
                raise DataError("cube values outside the frame bit-depth range")
        data = data.astype(np.uint16)
    n, m = data.shape[:2]
    tiles = data[:, :, layout.band_of_cell.ravel()]
    pixels = (
        tiles.reshape(n, m, MOSAIC_PERIOD, MOSAIC_PERIOD)
        .transpose(0, 2, 1, 3)
        .reshape(n * MOSAIC_PERIOD, m * MOSAIC_PERIOD)
    )
    return RawMosaicFrame(
        np.ascontiguousarray(pixels),
        bit_depth=cube.bit_depth,
        timestamp=cube.timestamp,
        exposure_time_us=exposure_time_us,
    )


@dataclass
class ExposureReport:
    """Per-band counts of pixels outside the usable exposure range."""

    under: np.ndarray
    over: np.ndarray
    low: float
    high: float
    roi: Rect
    passed: bool = field(init=False)

    def __post_init__(self):
        self.under = np.asarray(self.under, dtype=np.int64)
        self.over = np.asarray(self.over, dtype=np.int64)
        self.passed = bool(self.under.sum() == 0 and self.over.sum() == 0)


def check_exposure(cube: BandCube, roi: Rect, low: float, high: float) -> ExposureReport:
    """Count under-/over-exposed pixels per band inside ``roi``.

    Passes only if no pixel of any band falls below ``low`` or above
    ``high``. Widening the [low, high] interval can never turn a pass into
    a fail.
    """
    if low >= high:
        raise ValueError(f"low threshold {low} must be below high threshold {high}")
    if not roi.within(cube.n_rows, cube.n_cols):
        raise ValueError(
            f"roi {roi} outside cube bounds {cube.n_rows}x{cube.n_cols}"
        )
    region = cube.data[roi.slices]
    under = (region < low).sum(axis=(0, 1))
    over = (region > high).sum(axis=(0, 1))
    return ExposureReport(under=under, over=over, low=low, high=high, roi=roi)


def default_exposure_thresholds(bit_depth: int) -> tuple[float, float]:
    """Default usable range: [1%, 99%] of full scale."""
    full = (1 << bit_depth) - 1
    return 0.01 * full, 0.99 * full
