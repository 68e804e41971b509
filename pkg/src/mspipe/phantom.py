"""Synthetic perfused/ischemic tissue sequences with ground-truth labels.

In place of clinical recordings, this module renders raw mosaic sequences
of a flat tissue patch whose reflectance follows a single-layer diffuse
approximation: absorption from an oxy/deoxy hemoglobin mixture, power-law
reduced scattering, and R = exp(-mu_a / mu_s'). The approximation is not a
light-transport simulation; it exists to produce physically ordered
oxygenation contrast with known ground truth, at milliseconds per spectrum.

Rendering inverts the white/dark normalization (I = R_band * (W - D) + D),
then adds translation, exposure drift, and sensor noise before quantizing
and re-mosaicking to raw frames. Every frame is generated independently
from (script, seed, frame index), so rendering is order-independent.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import gaussian_filter

from .calibration import CalibrationPair, save_calibration
from .errors import ConfigError, DataError
from .geometry import Rect
from .mosaic import BandCube, MosaicLayout, N_BANDS, remosaic
from .msraw import MsrawWriter
from .optics import (
    FilterBank,
    OpticalChain,
    SpectralCurve,
    default_filter_bank,
    default_grid,
    default_optical_chain,
    effective_response,
    forward_camera_signal,
    load_curve_csv,
    resample,
    save_curve_csv,
)

LN10 = math.log(10.0)
# Typical adult blood hemoglobin concentration and molar mass; standard
# physiological values, used to convert extinction to absorption.
TOTAL_HEMOGLOBIN_G_PER_L = 150.0
HEMOGLOBIN_MOLAR_MASS_G_PER_MOL = 64500.0
HEMOGLOBIN_MOL_PER_L = TOTAL_HEMOGLOBIN_G_PER_L / HEMOGLOBIN_MOLAR_MASS_G_PER_MOL

REFERENCE_SCATTER_NM = 500.0

# Anchor tables for the bundled stand-in extinction curves, 1/(cm*mol/L).
# Smooth interpolation through these reproduces the characteristic features:
# the oxyhemoglobin double peak near 542/577 nm, the deoxyhemoglobin single
# peak near 555 nm, and the steep oxyhemoglobin drop above 590 nm. They are
# plausibility anchors, not measured data; drop real tabulated curves into
# the CSV fixtures to replace them.
_HBO2_ANCHORS_NM = (
    (400.0, 230000.0), (414.0, 470000.0), (430.0, 110000.0), (450.0, 44000.0),
    (470.0, 33000.0), (490.0, 23000.0), (506.0, 18000.0), (522.0, 24000.0),
    (542.0, 54000.0), (560.0, 33000.0), (577.0, 56000.0), (586.0, 32000.0),
    (592.0, 12000.0), (600.0, 3200.0), (615.0, 1200.0), (630.0, 700.0),
    (660.0, 350.0), (700.0, 290.0), (760.0, 550.0), (800.0, 820.0),
    (850.0, 1060.0), (900.0, 1200.0), (950.0, 1300.0), (1000.0, 1100.0),
)
_HB_ANCHORS_NM = (
    (400.0, 180000.0), (420.0, 260000.0), (432.0, 350000.0), (450.0, 110000.0),
    (470.0, 16200.0), (490.0, 19000.0), (510.0, 25000.0), (530.0, 39000.0),
    (545.0, 48000.0), (556.0, 54000.0), (570.0, 45000.0), (577.0, 40000.0),
    (590.0, 25000.0), (600.0, 14700.0), (615.0, 10500.0), (630.0, 5150.0),
    (660.0, 3200.0), (690.0, 2100.0), (730.0, 1400.0), (760.0, 1650.0),
    (780.0, 1350.0), (800.0, 880.0), (850.0, 780.0), (900.0, 900.0),
    (950.0, 700.0), (1000.0, 600.0),
)


def synthesize_extinction_curve(kind: str, grid=None) -> SpectralCurve:
    """Generate a stand-in extinction curve ("oxy" or "deoxy") on ``grid``."""
    if grid is None:
        grid = default_grid()
    anchors = {"oxy": _HBO2_ANCHORS_NM, "deoxy": _HB_ANCHORS_NM}.get(kind)
    if anchors is None:
        raise ValueError(f"unknown extinction curve kind {kind!r}")
    wl = np.array([a[0] for a in anchors])
    eps = np.array([a[1] for a in anchors])
    spline = PchipInterpolator(wl, eps)
    grid = np.asarray(grid, dtype=np.float64)
    values = spline(np.clip(grid, wl[0], wl[-1]))
    return SpectralCurve(grid, np.maximum(values, 0.0))


_EXTINCTION_FILES = {"oxy": "hbo2_extinction.csv", "deoxy": "hb_extinction.csv"}


@lru_cache(maxsize=4)
def load_extinction(kind: str, path=None) -> SpectralCurve:
    """Load an extinction curve from CSV; defaults to the bundled fixtures."""
    if path is None:
        try:
            name = _EXTINCTION_FILES[kind]
        except KeyError:
            raise ValueError(f"unknown extinction curve kind {kind!r}") from None
        ref = resources.files("mspipe").joinpath("data", name)
        if not ref.is_file():
            raise ConfigError(f"bundled extinction curve {name} is missing")
        with resources.as_file(ref) as real_path:
            return load_curve_csv(real_path)
    return load_curve_csv(path)


def write_extinction_fixtures(out_dir) -> None:
    """Regenerate the bundled extinction CSVs from the anchor tables."""
    os.makedirs(out_dir, exist_ok=True)
    for kind, name in _EXTINCTION_FILES.items():
        save_curve_csv(os.path.join(out_dir, name), synthesize_extinction_curve(kind))


@dataclass(frozen=True)
class TissueState:
    """Optical tissue parameters driving the reflectance model."""

    sao2: float
    vhb: float
    scatter_a: float = 20.0
    scatter_b: float = 1.3

    def __post_init__(self):
        if not 0.0 <= self.sao2 <= 1.0:
            raise ValueError(f"sao2 must be in [0, 1], got {self.sao2}")
        if not 0.0 < self.vhb <= 0.3:
            raise ValueError(f"vhb must be in (0, 0.3], got {self.vhb}")
        if self.scatter_a <= 0.0:
            raise ValueError(f"scatter_a must be positive, got {self.scatter_a}")
        if self.scatter_b < 0.0:
            raise ValueError(f"scatter_b must be non-negative, got {self.scatter_b}")


def tissue_reflectance(state: TissueState, grid=None, extinction=None) -> SpectralCurve:
    """Diffuse reflectance spectrum of a tissue state.

    mu_a = ln(10) * vhb * c_hb * (sao2 * eps_oxy + (1 - sao2) * eps_deoxy),
    mu_s' = scatter_a * (lambda / 500 nm)^(-scatter_b),
    R = exp(-mu_a / mu_s'). Continuous and monotone decreasing in vhb at
    every wavelength; values lie in (0, 1].
    """
    if grid is None:
        grid = default_grid()
    grid = np.asarray(grid, dtype=np.float64)
    if extinction is None:
        extinction = (load_extinction("oxy"), load_extinction("deoxy"))
    eps_oxy = resample(extinction[0], grid).values
    eps_deoxy = resample(extinction[1], grid).values
    mix = state.sao2 * eps_oxy + (1.0 - state.sao2) * eps_deoxy
    mu_a = LN10 * state.vhb * HEMOGLOBIN_MOL_PER_L * mix
    mu_s = state.scatter_a * (grid / REFERENCE_SCATTER_NM) ** (-state.scatter_b)
    return SpectralCurve(grid, np.exp(-mu_a / mu_s))


@dataclass(frozen=True)
class PhaseStep:
    """Schedule entry: from ``start_s`` on, the scene is in ``state``."""

    start_s: float
    state: TissueState
    label: str


@dataclass
class SceneScript:
    """Full description of a synthetic recording."""

    duration_s: float
    fps: float
    schedule: list[PhaseStep]
    width: int = 512
    height: int = 272
    bit_depth: int = 10
    motion_amplitude_px: float = 0.0
    motion_period_s: float = 4.0
    noise_sigma: float = 0.0
    exposure_drift_amplitude: float = 0.0
    exposure_drift_period_s: float = 11.0
    vhb_variation: float = 0.10

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.duration_s <= 0:
            raise ValueError(f"duration must be positive, got {self.duration_s}")
        if not self.schedule:
            raise ValueError("schedule must contain at least one phase")
        starts = [step.start_s for step in self.schedule]
        if starts != sorted(starts):
            raise ValueError("schedule start times must be ascending")
        if starts[0] != 0.0:
            raise ValueError("first schedule entry must start at t=0")
        if starts[-1] >= self.duration_s:
            raise ValueError("schedule start times must lie within the duration")
        if self.width % 4 or self.height % 4:
            raise ValueError("frame dimensions must be divisible by 4")
        if not 0.0 <= self.vhb_variation < 1.0:
            raise ValueError("vhb_variation must be in [0, 1)")

    @property
    def n_frames(self) -> int:
        """Frames at t = 0, 1/fps, ...: floor(duration * fps) + 1."""
        return int(math.floor(self.duration_s * self.fps)) + 1

    def schedule_index_at(self, t: float) -> int:
        current = 0
        for idx in range(1, len(self.schedule)):
            if self.schedule[idx].start_s <= t:
                current = idx
            else:
                break
        return current

    def state_at(self, t: float) -> PhaseStep:
        return self.schedule[self.schedule_index_at(t)]

    def to_json(self, path) -> None:
        doc = {
            "duration_s": self.duration_s,
            "fps": self.fps,
            "width": self.width,
            "height": self.height,
            "bit_depth": self.bit_depth,
            "motion_amplitude_px": self.motion_amplitude_px,
            "motion_period_s": self.motion_period_s,
            "noise_sigma": self.noise_sigma,
            "exposure_drift_amplitude": self.exposure_drift_amplitude,
            "exposure_drift_period_s": self.exposure_drift_period_s,
            "vhb_variation": self.vhb_variation,
            "schedule": [
                {
                    "start_s": step.start_s,
                    "label": step.label,
                    "state": {
                        "sao2": step.state.sao2,
                        "vhb": step.state.vhb,
                        "scatter_a": step.state.scatter_a,
                        "scatter_b": step.state.scatter_b,
                    },
                }
                for step in self.schedule
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "SceneScript":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scene script {path}: {exc}") from exc
        try:
            schedule = [
                PhaseStep(
                    start_s=float(entry["start_s"]),
                    label=str(entry["label"]),
                    state=TissueState(**entry["state"]),
                )
                for entry in doc["schedule"]
            ]
            return cls(
                duration_s=float(doc["duration_s"]),
                fps=float(doc["fps"]),
                schedule=schedule,
                width=int(doc.get("width", 512)),
                height=int(doc.get("height", 272)),
                bit_depth=int(doc.get("bit_depth", 10)),
                motion_amplitude_px=float(doc.get("motion_amplitude_px", 0.0)),
                motion_period_s=float(doc.get("motion_period_s", 4.0)),
                noise_sigma=float(doc.get("noise_sigma", 0.0)),
                exposure_drift_amplitude=float(doc.get("exposure_drift_amplitude", 0.0)),
                exposure_drift_period_s=float(doc.get("exposure_drift_period_s", 11.0)),
                vhb_variation=float(doc.get("vhb_variation", 0.10)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scene script {path}: {exc}") from exc


def make_flat_calibration(
    width: int,
    height: int,
    bit_depth: int = 10,
    seed: int = 0,
    white_level: float = 0.75,
    dark_level: float = 0.06,
    band_gain_spread: float = 0.06,
) -> CalibrationPair:
    """Synthetic white/dark reference pair at cube resolution.

    The white reference carries per-band gain variation and a mild radial
    falloff; the dark reference is a near-flat pedestal with small per-band
    offsets. Values are integer counts so that a file round trip is lossless.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    n, m = height // 4, width // 4
    full = (1 << bit_depth) - 1
    gains = 1.0 + band_gain_spread * rng.uniform(-1.0, 1.0, N_BANDS)
    yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, m), indexing="ij")
    falloff = 1.0 - 0.10 * (xx**2 + yy**2)
    white = np.round(full * white_level * falloff[:, :, None] * gains[None, None, :])
    dark_offsets = rng.integers(0, 3, N_BANDS)
    dark = np.round(full * dark_level + dark_offsets[None, None, :] * np.ones((n, m, 1)))
    return CalibrationPair(
        white=BandCube(white.astype(np.uint16), bit_depth=bit_depth),
        dark=BandCube(dark.astype(np.uint16), bit_depth=bit_depth),
        target_note="synthetic flat-field reference",
    )


def _variation_field(n: int, m: int, seed: int) -> np.ndarray:
    """Smooth random field in [-1, 1], periodic so translations wrap cleanly."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 102]))
    noise = rng.standard_normal((n, m))
    smooth = gaussian_filter(noise, sigma=max(2.0, min(n, m) / 10.0), mode="wrap")
    peak = np.abs(smooth).max()
    return smooth / peak if peak > 0 else smooth


def band_reflectance(
    state: TissueState, bank: FilterBank, chain: OpticalChain, extinction=None
) -> np.ndarray:
    """16-band reflectance of a tissue state as seen through the full chain.

    Normalized by the signal of a perfect reflector, so the white/dark
    normalization of a rendered frame recovers exactly these values.
    """
    eff = effective_response(bank, chain)
    refl = tissue_reflectance(state, grid=eff.grid, extinction=extinction)
    signal = forward_camera_signal(refl, eff)
    white_signal = forward_camera_signal(
        SpectralCurve(eff.grid, np.ones_like(eff.grid)), eff
    )
    return signal / white_signal


@dataclass
class RenderResult:
    sequence_path: str
    labels_path: str
    motion_path: str
    n_frames: int
    overexposed_pixels: int
    fps: float


def render_sequence(
    script: SceneScript,
    bank: FilterBank,
    chain: OpticalChain,
    cal: CalibrationPair,
    seed: int,
    layout: MosaicLayout,
    out_path,
    labels_path=None,
    motion_path=None,
) -> RenderResult:
    """Render a scene script to a .msraw sequence plus ground-truth tracks.

    Deterministic for a fixed seed: the per-frame noise stream is keyed by
    (seed, frame index), so frames may be generated in any order. Signals
    that exceed full scale are clipped and counted as synthetic
    overexposure in the result.
    """
    n, m = script.height // 4, script.width // 4
    if cal.shape != (n, m, N_BANDS):
        raise DataError(
            f"calibration shape {cal.shape} does not match script cube "
            f"dimensions ({n}, {m}, {N_BANDS})"
        )
    out_path = os.fspath(out_path)
    if labels_path is None:
        labels_path = out_path + ".labels.csv"
    if motion_path is None:
        motion_path = out_path + ".motion.csv"

    eff = effective_response(bank, chain)
    white_signal = forward_camera_signal(
        SpectralCurve(eff.grid, np.ones_like(eff.grid)), eff
    )
    field = _variation_field(n, m, seed)
    full_scale = (1 << script.bit_depth) - 1
    white = cal.white.data.astype(np.float64)
    dark = cal.dark.data.astype(np.float64)
    w_minus_d = white - dark

    # Per schedule entry, tabulate band reflectance over the vhb range the
    # spatial variation can reach, then interpolate per pixel.
    base_cubes = []
    for step in script.schedule:
        state = step.state
        amp = script.vhb_variation
        if amp > 0:
            vgrid = state.vhb * np.linspace(1.0 - amp, 1.0 + amp, 65)
        else:
            vgrid = np.array([state.vhb])
        table = np.empty((vgrid.size, N_BANDS))
        for vi, v in enumerate(vgrid):
            refl = tissue_reflectance(
                TissueState(state.sao2, v, state.scatter_a, state.scatter_b),
                grid=eff.grid,
            )
            table[vi] = forward_camera_signal(refl, eff) / white_signal
        vhb_map = state.vhb * (1.0 + amp * field)
        base = np.empty((n, m, N_BANDS))
        if vgrid.size == 1:
            base[:] = table[0]
        else:
            flat = vhb_map.ravel()
            for k in range(N_BANDS):
                base[:, :, k] = np.interp(flat, vgrid, table[:, k]).reshape(n, m)
        base_cubes.append(base)

    overexposed = 0
    two_pi = 2.0 * math.pi
    with MsrawWriter(
        out_path, script.width, script.height, bit_depth=script.bit_depth, fps=script.fps
    ) as writer, open(labels_path, "w", newline="", encoding="utf-8") as lab_fh, open(
        motion_path, "w", newline="", encoding="utf-8"
    ) as mot_fh:
        labels = csv.writer(lab_fh)
        labels.writerow(["frame_index", "time_s", "label"])
        motion = csv.writer(mot_fh)
        motion.writerow(["frame_index", "dx_px", "dy_px"])
        for i in range(script.n_frames):
            t = i / script.fps
            sched_idx = script.schedule_index_at(t)
            step = script.schedule[sched_idx]
            base = base_cubes[sched_idx]
            if script.motion_amplitude_px > 0:
                dx = int(
                    round(
                        script.motion_amplitude_px
                        * math.sin(two_pi * t / script.motion_period_s)
                    )
                )
            else:
                dx = 0
            dy = 0
            shifted = np.roll(base, (dy, dx), axis=(0, 1)) if (dx or dy) else base
            gain = 1.0
            if script.exposure_drift_amplitude > 0:
                gain += script.exposure_drift_amplitude * math.sin(
                    two_pi * t / script.exposure_drift_period_s
                )
            counts = dark + gain * shifted * w_minus_d
            if script.noise_sigma > 0:
                rng = np.random.default_rng(np.random.SeedSequence([seed, 2, i]))
                counts = counts + rng.normal(0.0, script.noise_sigma, counts.shape)
            overexposed += int(np.count_nonzero(counts > full_scale))
            quantized = np.clip(np.round(counts), 0, full_scale).astype(np.uint16)
            cube = BandCube(quantized, timestamp=t, bit_depth=script.bit_depth)
            writer.append(remosaic(cube, layout))
            labels.writerow([i, f"{t:.6f}", step.label])
            motion.writerow([i, dx, dy])

    return RenderResult(
        sequence_path=out_path,
        labels_path=labels_path,
        motion_path=motion_path,
        n_frames=script.n_frames,
        overexposed_pixels=overexposed,
        fps=script.fps,
    )


BEFORE_STATE = TissueState(sao2=0.9, vhb=0.04)
DURING_STATE = TissueState(sao2=0.3, vhb=0.02)


@dataclass
class ClampingStudy:
    """Paths to a rendered two-phase perfusion study."""

    before: RenderResult
    during: RenderResult
    calibration_manifest: str
    layout_path: str
    roi: Rect
    fps: float


def default_clamping_study(
    out_dir,
    seed: int = 0,
    width: int = 512,
    height: int = 272,
    fps: float = 26.67,
    duration_s: float = 45.0,
    motion_amplitude_px: float = 2.0,
    noise_sigma: float = 2.0,
    exposure_drift_amplitude: float = 0.05,
) -> ClampingStudy:
    """Render the two-phase reference study: perfused, then artery clamped.

    Two sequences of ``duration_s`` at ``fps``: well-perfused oxygenated
    tissue first, then hypoxic low-blood-volume tissue, with motion, drift,
    and noise defaults and ground-truth labels attached. Also writes the
    synthetic calibration pair and mosaic layout needed to process them,
    plus a suggested centered ROI.
    """
    os.makedirs(out_dir, exist_ok=True)
    layout = MosaicLayout.row_major()
    layout_path = os.path.join(out_dir, "layout.json")
    layout.to_json(layout_path)

    cal = make_flat_calibration(width, height, seed=seed)
    manifest = os.path.join(out_dir, "calibration.json")
    save_calibration(manifest, cal, layout, fps=fps)

    bank = default_filter_bank()
    chain = default_optical_chain()

    common = dict(
        duration_s=duration_s,
        fps=fps,
        width=width,
        height=height,
        motion_amplitude_px=motion_amplitude_px,
        noise_sigma=noise_sigma,
        exposure_drift_amplitude=exposure_drift_amplitude,
    )
    before_script = SceneScript(
        schedule=[PhaseStep(0.0, BEFORE_STATE, "before")], **common
    )
    during_script = SceneScript(
        schedule=[PhaseStep(0.0, DURING_STATE, "during")], **common
    )
    before = render_sequence(
        before_script, bank, chain, cal, seed, layout, os.path.join(out_dir, "before.msraw")
    )
    during = render_sequence(
        during_script, bank, chain, cal, seed + 1, layout, os.path.join(out_dir, "during.msraw")
    )

    n, m = height // 4, width // 4
    roi = Rect(m // 2 - 16, n // 2 - 16, 32, 32)
    return ClampingStudy(
        before=before,
        during=during,
        calibration_manifest=manifest,
        layout_path=layout_path,
        roi=roi,
        fps=fps,
    )


def read_labels_csv(path) -> list[tuple[int, float, str]]:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows.append((int(row[0]), float(row[1]), row[2]))
    return rows


def read_motion_csv(path) -> np.ndarray:
    """(n_frames, 2) array of applied (dx, dy) shifts."""
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows.append((int(row[1]), int(row[2])))
    return np.asarray(rows, dtype=np.int64)
