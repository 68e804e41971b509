"""White/dark reflectance normalization and ROI spectrum extraction.

Per pixel and band, raw counts I are converted to reflectance-like values
(I - D) / (W - D) against a white reference W and dark reference D. ROI
spectra are then per-band medians, normalized to unit L1 norm so that
illumination intensity and working-distance changes cancel.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, DataError, DegenerateSpectrumError
from .geometry import Rect
from .mosaic import BandCube, MosaicLayout, N_BANDS
from .msraw import MsrawReader

# Values outside [-EPS, 1+EPS] after normalization are counted as suspect
# (specular highlights, noise) but kept: clipping would bias the medians.
OUT_OF_RANGE_EPS = 0.05


@dataclass
class CalibrationPair:
    """White and dark reference cubes, stored at demosaiced resolution."""

    white: BandCube
    dark: BandCube
    target_note: str = ""
    _inv_range: np.ndarray | None = field(default=None, repr=False)
    _dark64: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.white.data.shape != self.dark.data.shape:
            raise DataError(
                f"white {self.white.data.shape} and dark {self.dark.data.shape} "
                "references have different dimensions"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.white.data.shape

    def inverse_range(self) -> np.ndarray:
        """1 / (W - D), validated strictly positive; cached after first call."""
        if self._inv_range is None:
            w = self.white.data.astype(np.float64, copy=False)
            d = self.dark.data.astype(np.float64, copy=False)
            rng = w - d
            if rng.size and rng.min() <= 0:
                idx = np.unravel_index(int(np.argmin(rng)), rng.shape)
                i, j, k = (int(v) for v in idx)
                raise CalibrationError(
                    f"white - dark is {rng[idx]:g} <= 0 at pixel ({i}, {j}) band {k}",
                    index=(i, j, k),
                )
            self._inv_range = 1.0 / rng
            self._dark64 = d
        return self._inv_range

    def dark_float(self) -> np.ndarray:
        self.inverse_range()
        return self._dark64


@dataclass
class NormalizedCube:
    """Reflectance-like cube from white/dark normalization.

    ``out_of_range`` counts values outside [-0.05, 1.05]; they are kept
    unclipped and only reported.
    """

    data: np.ndarray
    timestamp: float = 0.0
    out_of_range: int = 0

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]

    @property
    def n_bands(self) -> int:
        return self.data.shape[2]


def normalize_white_dark(cube: BandCube, cal: CalibrationPair) -> NormalizedCube:
    """Convert raw counts to reflectance-like values, (I - D) / (W - D).

    Purely per-pixel, per-band; no spatial mixing. Raises CalibrationError
    naming the first offending pixel if W - D is not strictly positive.
    """
    if cube.data.shape != cal.shape:
        raise DataError(
            f"cube shape {cube.data.shape} does not match calibration {cal.shape}"
        )
    inv = cal.inverse_range()
    data = (cube.data.astype(np.float64, copy=False) - cal.dark_float()) * inv
    oor = int(np.count_nonzero(data < -OUT_OF_RANGE_EPS)) + int(
        np.count_nonzero(data > 1.0 + OUT_OF_RANGE_EPS)
    )
    return NormalizedCube(data, timestamp=cube.timestamp, out_of_range=oor)


def median_spectrum(cube: NormalizedCube | BandCube, roi: Rect) -> np.ndarray:
    """Per-band median over the ROI pixels (independent medians per band)."""
    data = cube.data
    if not roi.within(data.shape[0], data.shape[1]):
        raise ValueError(
            f"roi {roi} outside cube bounds {data.shape[0]}x{data.shape[1]}"
        )
    region = data[roi.slices]
    return np.median(region.reshape(-1, data.shape[2]), axis=0)


def l1_normalize(spectrum: np.ndarray) -> np.ndarray:
    """Scale a spectrum to unit L1 norm.

    Negative components (possible from noise after normalization) are
    clamped to zero before summing so downstream distances stay on
    non-negative vectors. An all-zero result raises
    DegenerateSpectrumError.
    """
    vec = np.asarray(spectrum, dtype=np.float64)
    vec = np.where(vec > 0.0, vec, 0.0)
    total = vec.sum()
    if total <= 0.0:
        raise DegenerateSpectrumError("spectrum is all zero: dark or occluded ROI")
    return vec / total


@dataclass
class SpectrumSample:
    """One L1-normalized 16-band ROI spectrum at a point in time."""

    bands: np.ndarray
    timestamp: float
    phase: str

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float64)
        if self.bands.shape != (N_BANDS,):
            raise ValueError(f"expected {N_BANDS} bands, got shape {self.bands.shape}")


@dataclass
class SpectrumSeries:
    """Time-ordered spectrum samples with phase labels."""

    samples: list[SpectrumSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def append(self, sample: SpectrumSample) -> None:
        self.samples.append(sample)

    def matrix(self) -> np.ndarray:
        return np.stack([s.bands for s in self.samples]) if self.samples else np.empty((0, N_BANDS))

    def timestamps(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.samples])

    def phases(self) -> list[str]:
        return [s.phase for s in self.samples]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "phase"] + [f"b{k:02d}" for k in range(N_BANDS)])
            for s in self.samples:
                writer.writerow(
                    [f"{s.timestamp:.9f}", s.phase] + [f"{v:.17g}" for v in s.bands]
                )

    @classmethod
    def from_csv(cls, path) -> "SpectrumSeries":
        series = cls()
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:2] != ["timestamp", "phase"]:
                raise DataError(f"{path}: not a spectrum series CSV")
            for row in reader:
                series.append(
                    SpectrumSample(
                        bands=np.array([float(v) for v in row[2:]]),
                        timestamp=float(row[0]),
                        phase=row[1],
                    )
                )
        return series


def _load_reference_cube(path, layout: MosaicLayout) -> BandCube:
    """Average all frames of a reference recording, then demosaic.

    Averaging over several frames suppresses shot noise; averaging before
    demosaicing is equivalent to averaging cubes since demosaic is a pure
    rearrangement.
    """
    with MsrawReader(path) as reader:
        if len(reader) == 0:
            raise DataError(f"{path}: reference recording has no frames")
        bit_depth = reader.header.bit_depth
        acc = np.zeros((reader.header.height, reader.header.width), dtype=np.float64)
        for frame in reader:
            acc += frame.pixels
        acc /= len(reader)
    h, w = acc.shape
    n, m = h // 4, w // 4
    tiles = acc.reshape(n, 4, m, 4).transpose(0, 2, 1, 3).reshape(n, m, 16)
    data = np.ascontiguousarray(tiles[:, :, layout.cell_of_band])
    return BandCube(data, timestamp=0.0, bit_depth=bit_depth)


def load_calibration(manifest_path, layout: MosaicLayout) -> CalibrationPair:
    """Load a white/dark pair from a JSON manifest.

    Manifest schema: {"white": path, "dark": path, "target_note": str};
    relative paths resolve against the manifest location.
    """
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read calibration manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed calibration manifest {manifest_path}: {exc}") from exc
    base = os.path.dirname(os.fspath(manifest_path))
    try:
        white_path = os.path.join(base, doc["white"])
        dark_path = os.path.join(base, doc["dark"])
    except (KeyError, TypeError) as exc:
        raise DataError(
            f"{manifest_path}: manifest must contain 'white' and 'dark' paths"
        ) from exc
    return CalibrationPair(
        white=_load_reference_cube(white_path, layout),
        dark=_load_reference_cube(dark_path, layout),
        target_note=str(doc.get("target_note", "")),
    )


def save_calibration(manifest_path, cal: CalibrationPair, layout: MosaicLayout, fps: float = 25.0) -> None:
    """Write a pair as two single-frame .msraw files plus the JSON manifest."""
    from .mosaic import remosaic
    from .msraw import write_sequence

    base = os.path.dirname(os.fspath(manifest_path)) or "."
    white_name, dark_name = "white.msraw", "dark.msraw"
    write_sequence(
        os.path.join(base, white_name),
        [remosaic(cal.white, layout)],
        bit_depth=cal.white.bit_depth,
        fps=fps,
    )
    write_sequence(
        os.path.join(base, dark_name),
        [remosaic(cal.dark, layout)],
        bit_depth=cal.dark.bit_depth,
        fps=fps,
    )
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(
            {"white": white_name, "dark": dark_name, "target_note": cal.target_note},
            fh,
            indent=2,
        )
        fh.write("\n")
