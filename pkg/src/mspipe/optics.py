"""Spectral chain model: filter responses, transmissions, RGB reconstruction.

Models every spectral factor between the light source and the sensor: the
16 per-band filter responses (including the spurious low-wavelength
"second order" peaks of Fabry-Perot filters), the band-pass filter that
attenuates the red end where tissue reflects strongly, the scope and
adapter transmissions, and the illuminant. Measured curves are not bundled;
parametric stand-ins ship instead and real data can be loaded from CSV.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .mosaic import N_BANDS

DEFAULT_GRID_NM = (400.0, 1000.0, 1.0)
BANDPASS_RANGE_NM = (335.0, 610.0)
RGB_CENTERS_NM = (600.0, 550.0, 470.0)
RGB_SIGMA_NM = 40.0


def default_grid() -> np.ndarray:
    lo, hi, step = DEFAULT_GRID_NM
    return np.arange(lo, hi + step / 2, step)


@dataclass(frozen=True)
class SpectralCurve:
    """Sampled spectrum: strictly ascending wavelength grid (nm) + values."""

    wavelengths: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        if wl.ndim != 1 or wl.shape != vals.shape:
            raise ValueError("wavelengths and values must be matching 1-D arrays")
        if wl.size < 2 or np.any(np.diff(wl) <= 0):
            raise ValueError("wavelength grid must be strictly ascending")
        if not np.all(np.isfinite(vals)):
            raise ValueError("curve values must be finite")
        object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "values", vals)

    @property
    def support(self) -> tuple[float, float]:
        return float(self.wavelengths[0]), float(self.wavelengths[-1])


def resample(curve: SpectralCurve, grid: np.ndarray) -> SpectralCurve:
    """Linear interpolation onto ``grid``; queries outside the support give 0."""
    grid = np.asarray(grid, dtype=np.float64)
    values = np.interp(grid, curve.wavelengths, curve.values, left=0.0, right=0.0)
    return SpectralCurve(grid, values)


def load_curve_csv(path) -> SpectralCurve:
    """Read a "wavelength_nm,value" CSV curve."""
    wavelengths, values = [], []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["wavelength_nm", "value"]:
            raise DataError(f"{path}: expected 'wavelength_nm,value' header")
        for row in reader:
            wavelengths.append(float(row[0]))
            values.append(float(row[1]))
    return SpectralCurve(np.array(wavelengths), np.array(values))


def save_curve_csv(path, curve: SpectralCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wavelength_nm", "value"])
        for wl, v in zip(curve.wavelengths, curve.values):
            writer.writerow([f"{wl:.6g}", f"{v:.9g}"])


@dataclass(frozen=True)
class FilterBank:
    """One spectral response per band plus the nominal band centers (nm)."""

    responses: tuple
    band_centers: np.ndarray

    def __post_init__(self):
        if len(self.responses) != N_BANDS:
            raise ValueError(f"need {N_BANDS} responses, got {len(self.responses)}")
        centers = np.asarray(self.band_centers, dtype=np.float64)
        if centers.shape != (N_BANDS,):
            raise ValueError(f"need {N_BANDS} band centers, got {centers.shape}")
        for k, resp in enumerate(self.responses):
            if np.any(resp.values < 0):
                raise ValueError(f"band {k} response has negative values")
            peak = resp.values.max()
            if peak <= 0 or np.count_nonzero(resp.values == peak) != 1:
                raise ValueError(f"band {k} response lacks a unique primary peak")
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(self, "band_centers", centers)

    @property
    def grid(self) -> np.ndarray:
        return self.responses[0].wavelengths


@dataclass(frozen=True)
class OpticalChain:
    """Transmissions and illuminant between the light source and the sensor."""

    bandpass: SpectralCurve
    scope: SpectralCurve
    cmount: SpectralCurve
    illuminant: SpectralCurve

    def factors(self) -> tuple[SpectralCurve, ...]:
        return (self.bandpass, self.scope, self.cmount, self.illuminant)


def _gaussian(grid: np.ndarray, center: float, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((grid - center) / sigma) ** 2)


SECOND_ORDER_THRESHOLD_NM = 650.0


def default_filter_bank(
    band_centers=None,
    grid=None,
    second_order_amplitude: float = 0.3,
) -> FilterBank:
    """Parametric stand-in for the sensor filter responses.

    Each band is a primary Gaussian (sigma 12 nm) at its center; bands whose
    primary center exceeds 650 nm additionally carry a second-order Gaussian
    (sigma 10 nm) at 0.75x the center wavelength, mimicking Fabry-Perot
    second-order transmission. The 0.3 amplitude default is a stand-in, not
    a measured value.
    """
    if grid is None:
        grid = default_grid()
    if band_centers is None:
        band_centers = np.linspace(470.0, 630.0, N_BANDS)
    band_centers = np.asarray(band_centers, dtype=np.float64)
    responses = []
    for center in band_centers:
        values = _gaussian(grid, center, 12.0)
        if center > SECOND_ORDER_THRESHOLD_NM:
            values = values + second_order_amplitude * _gaussian(grid, 0.75 * center, 10.0)
        responses.append(SpectralCurve(grid, values))
    return FilterBank(tuple(responses), band_centers)


def _smooth_edge(grid: np.ndarray, start: float, stop: float) -> np.ndarray:
    """Half-cosine ramp: 0 before ``start``, 1 after ``stop``."""
    t = np.clip((grid - start) / (stop - start), 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def default_optical_chain(grid=None) -> OpticalChain:
    """Stand-in transmissions for band-pass filter, scope, adapter, illuminant.

    The band-pass stand-in transmits in 335-610 nm with 10 nm cosine edges
    fully inside the pass region, so transmission outside it is exactly zero.
    The illuminant is flat with a mild UV roll-off, as for a Xenon arc.
    """
    if grid is None:
        grid = default_grid()
    lo, hi = BANDPASS_RANGE_NM
    passband = _smooth_edge(grid, lo, lo + 10.0) * (1.0 - _smooth_edge(grid, hi - 10.0, hi))
    bandpass = SpectralCurve(grid, 0.92 * passband)
    scope = SpectralCurve(grid, 0.85 * _smooth_edge(grid, 360.0, 420.0))
    cmount = SpectralCurve(grid, 0.95 - 5e-5 * (grid - 400.0))
    illuminant = SpectralCurve(grid, 1.0 / (1.0 + np.exp(-(grid - 410.0) / 15.0)))
    return OpticalChain(bandpass=bandpass, scope=scope, cmount=cmount, illuminant=illuminant)


def _common_grid(bank: FilterBank, chain: OpticalChain) -> np.ndarray:
    """Bank grid restricted to the overlap of every chain factor's support."""
    lo, hi = bank.grid[0], bank.grid[-1]
    for factor in chain.factors():
        flo, fhi = factor.support
        lo, hi = max(lo, flo), min(hi, fhi)
    grid = bank.grid[(bank.grid >= lo) & (bank.grid <= hi)]
    if grid.size < 2:
        raise DataError("filter bank and optical chain have no wavelength overlap")
    return grid


def effective_response(bank: FilterBank, chain: OpticalChain) -> FilterBank:
    """Pointwise product of each band response with every chain factor."""
    grid = _common_grid(bank, chain)
    chain_product = np.ones_like(grid)
    for factor in chain.factors():
        chain_product = chain_product * resample(factor, grid).values
    responses = []
    for resp in bank.responses:
        responses.append(SpectralCurve(grid, resample(resp, grid).values * chain_product))
    return FilterBank(tuple(responses), bank.band_centers)


def forward_camera_signal(reflectance: SpectralCurve, eff: FilterBank) -> np.ndarray:
    """Band counts for a reflectance spectrum: trapezoidal band integrals.

    Linear and monotone in the reflectance.
    """
    if np.any(reflectance.values < 0):
        raise ValueError("reflectance must be non-negative")
    grid = eff.grid
    refl = resample(reflectance, grid).values
    signal = np.empty(N_BANDS)
    for k, resp in enumerate(eff.responses):
        signal[k] = np.trapz(refl * resp.values, grid)
    return signal


def rgb_weights(band_centers: np.ndarray) -> np.ndarray:
    """(3, 16) non-negative weights, Gaussian in band center around 600/550/470 nm.

    Each row sums to 1, so a constant cube maps to equal R = G = B.
    """
    centers = np.asarray(band_centers, dtype=np.float64)
    weights = np.empty((3, centers.size))
    for c, mu in enumerate(RGB_CENTERS_NM):
        weights[c] = _gaussian(centers, mu, RGB_SIGMA_NM)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def reconstruct_rgb(cube, bank: FilterBank | None = None, weights: np.ndarray | None = None) -> np.ndarray:
    """Render a 16-band cube to an 8-bit RGB image.

    Per pixel, channels are fixed weighted sums of the band values (see
    :func:`rgb_weights`), followed by a channel-wise 1st-99th percentile
    stretch to 8 bits. The stretch makes the image invariant to positive
    scaling of the input. A channel with no spread maps to black.
    """
    data = cube.data if hasattr(cube, "data") else np.asarray(cube)
    if data.ndim != 3 or data.shape[2] != N_BANDS:
        raise ValueError(f"expected (rows, cols, {N_BANDS}) cube, got {data.shape}")
    if weights is None:
        if bank is None:
            raise ValueError("either a filter bank or precomputed weights is required")
        weights = rgb_weights(bank.band_centers)
    flat = data.reshape(-1, N_BANDS).astype(np.float64, copy=False)
    channels = flat @ weights.T
    out = np.empty((data.shape[0], data.shape[1], 3), dtype=np.uint8)
    for c in range(3):
        ch = channels[:, c]
        p1, p99 = np.percentile(ch, (1.0, 99.0))
        if p99 > p1:
            stretched = np.clip((ch - p1) / (p99 - p1), 0.0, 1.0)
        else:
            stretched = np.zeros_like(ch)
        out[:, :, c] = np.round(stretched * 255.0).astype(np.uint8).reshape(data.shape[:2])
    return out


def load_filter_bank(manifest_path) -> FilterBank:
    """Load a bank from a JSON manifest listing 16 curve CSVs and band centers."""
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read filter bank manifest {manifest_path}: {exc}") from exc
    base = os.path.dirname(os.fspath(manifest_path))
    try:
        curve_paths = doc["curves"]
        centers = doc["band_centers"]
    except (KeyError, TypeError) as exc:
        raise DataError(
            f"{manifest_path}: manifest needs 'curves' and 'band_centers'"
        ) from exc
    responses = tuple(load_curve_csv(os.path.join(base, p)) for p in curve_paths)
    return FilterBank(responses, np.asarray(centers, dtype=np.float64))
