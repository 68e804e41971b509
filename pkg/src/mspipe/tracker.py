"""Correlation-filter ROI tracker with channel and spatial reliability.

Tracks a user-selected region across reconstructed RGB frames. The filter
is the frequency-domain ridge solution per feature channel, masked by a
spatial reliability map derived from foreground/background color
statistics; per-channel responses are blended by reliability weights.
Translation only: the optical working distance is near constant and the
downstream L1 spectrum normalization absorbs residual distance changes.

Feature extraction is pluggable through ``FEATURE_EXTRACTORS``; the default
stacks grayscale with 8 gradient-orientation magnitude planes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Roi
from .mosaic import check_exposure


def _gray(rgb: np.ndarray) -> np.ndarray:
    return (
        0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    ) / 255.0


def gray_grad8_features(patch: np.ndarray) -> np.ndarray:
    """Default features: zero-mean grayscale + 8 orientation magnitude planes."""
    gray = _gray(patch.astype(np.float64))
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / (np.pi / 8.0)).astype(np.int64), 7)
    planes = np.empty((9,) + gray.shape)
    planes[0] = gray - gray.mean()
    for b in range(8):
        planes[1 + b] = np.where(bins == b, mag, 0.0)
    return planes


FEATURE_EXTRACTORS = {"gray_grad8": gray_grad8_features}


def register_feature_extractor(name: str, fn) -> None:
    FEATURE_EXTRACTORS[name] = fn


@dataclass(frozen=True)
class TrackerConfig:
    learning_rate: float = 0.02
    reg_lambda: float = 0.01
    padding: float = 2.0
    output_sigma_factor: float = 0.1
    hist_bins: int = 16
    jump_threshold: float = 0.5
    confidence_floor: float = 0.15
    psr_scale: float = 10.0
    use_window: bool = True
    subpixel: bool = False
    features: str = "gray_grad8"
    mask_min_area_frac: float = 0.2

    def extractor(self):
        try:
            return FEATURE_EXTRACTORS[self.features]
        except KeyError:
            raise ValueError(f"unknown feature extractor {self.features!r}") from None

    @classmethod
    def from_json(cls, path) -> "TrackerConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


@dataclass
class FeatureStack:
    """Same-size 2-D feature planes extracted from an RGB patch."""

    channels: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3:
            raise ValueError("feature stack must be (channels, rows, cols)")
        if not np.all(np.isfinite(self.channels)):
            raise ValueError("feature stack contains non-finite values")


def extract_patch(image: np.ndarray, center: tuple[float, float], size: tuple[int, int]) -> np.ndarray:
    """Crop a (h, w) patch around ``center``, replicating edge pixels."""
    h, w = size
    cx, cy = center
    ys = np.clip(int(round(cy)) - h // 2 + np.arange(h), 0, image.shape[0] - 1)
    xs = np.clip(int(round(cx)) - w // 2 + np.arange(w), 0, image.shape[1] - 1)
    return image[np.ix_(ys, xs)]


def fft_correlate(patch: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Circular cross-correlation via FFT.

    Output index (u, v) holds sum of patch[(y+u) % H, (x+v) % W] *
    template[y, x]; a patch equal to the template shifted by (u, v) peaks
    exactly there.
    """
    return np.real(np.fft.ifft2(np.fft.fft2(patch) * np.conj(np.fft.fft2(template))))


def _gaussian_label(shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Gaussian response target, rolled so the peak sits at index (0, 0)."""
    h, w = shape
    ys = np.arange(h) - h // 2
    xs = np.arange(w) - w // 2
    g = np.exp(-0.5 * (ys[:, None] ** 2 + xs[None, :] ** 2) / sigma**2)
    return np.roll(g, (-(h // 2), -(w // 2)), axis=(0, 1))


def _hann_window(shape: tuple[int, int]) -> np.ndarray:
    return np.outer(np.hanning(shape[0]), np.hanning(shape[1]))


def _color_histogram(patch: np.ndarray, mask: np.ndarray, bins: int) -> np.ndarray:
    """Joint RGB histogram (bins^3,) over masked pixels, normalized."""
    scaled = (patch.astype(np.int64) * bins) >> 8
    flat = (scaled[:, :, 0] * bins + scaled[:, :, 1]) * bins + scaled[:, :, 2]
    hist = np.bincount(flat[mask].ravel(), minlength=bins**3).astype(np.float64)
    total = hist.sum()
    return hist / total if total > 0 else hist


def _location_prior(window_shape: tuple[int, int], roi_size: tuple[int, int]) -> np.ndarray:
    """Center-weighted foreground prior (Epanechnikov profile) in [0.5, 0.9]."""
    h, w = window_shape
    target = min(roi_size)
    k = 1.0 / (0.5 * target * 1.4142 + 1.0)
    ys = (np.arange(h) - (h - 1) / 2.0) * k
    xs = (np.arange(w) - (w - 1) / 2.0) * k
    profile = np.maximum(0.0, 1.0 - (ys[:, None] ** 2 + xs[None, :] ** 2))
    peak = profile.max()
    if peak > 0:
        profile /= peak
    return np.clip(profile, 0.5, 0.9)


def _reliability_mask(
    patch: np.ndarray,
    roi_size: tuple[int, int],
    fg_hist: np.ndarray,
    bg_hist: np.ndarray,
    bins: int,
    min_area_frac: float,
) -> np.ndarray:
    """Thresholded foreground posterior over the template window.

    Combines color likelihoods with a center-weighted location prior and
    the foreground/background area prior; the posterior is lightly smoothed
    for spatial coherence before thresholding at 0.5. A result covering too
    little of the target means the color statistics are uninformative, in
    which case the centered target rectangle is used instead.
    """
    h, w = patch.shape[:2]
    rh, rw = roi_size
    scaled = (patch.astype(np.int64) * bins) >> 8
    flat = (scaled[:, :, 0] * bins + scaled[:, :, 1]) * bins + scaled[:, :, 2]
    prior = _location_prior((h, w), roi_size)
    p_fg = (rh * rw) / float(h * w)
    like_fg = p_fg * prior * fg_hist[flat]
    like_bg = (1.0 - p_fg) * (1.0 - prior) * bg_hist[flat]
    posterior = like_fg / (like_fg + like_bg + 1e-12)
    posterior = gaussian_filter(posterior, 1.5)
    rect = _center_rect_mask((h, w), roi_size)
    mask = (posterior > 0.5).astype(np.float64) * rect
    if mask.sum() < min_area_frac * rh * rw:
        return rect
    return mask


def _center_rect_mask(window_shape: tuple[int, int], roi_size: tuple[int, int]) -> np.ndarray:
    h, w = window_shape
    rh, rw = roi_size
    mask = np.zeros((h, w))
    y0 = (h - rh) // 2
    x0 = (w - rw) // 2
    mask[y0 : y0 + rh, x0 : x0 + rw] = 1.0
    return mask


@dataclass
class TrackerState:
    """Learned filter, reliabilities, and current target location."""

    filters: np.ndarray
    channel_weights: np.ndarray
    spatial_map: np.ndarray
    label_fft: np.ndarray
    window: np.ndarray | None
    center: tuple[float, float]
    size: tuple[int, int]
    template_shape: tuple[int, int]
    fg_hist: np.ndarray
    bg_hist: np.ndarray
    config: TrackerConfig
    image_shape: tuple[int, int]
    low_confidence: bool = False


def _features_for(state_cfg: TrackerConfig, patch: np.ndarray, window) -> np.ndarray:
    feats = state_cfg.extractor()(patch)
    if window is not None:
        feats = feats * window[None, :, :]
    return feats


def _train_filters(
    feats: np.ndarray, label_fft: np.ndarray, mask: np.ndarray, reg_lambda: float
) -> np.ndarray:
    """Per-channel frequency-domain ridge filter, masked by reliability."""
    f_hat = np.fft.fft2(feats, axes=(1, 2))
    num = f_hat * np.conj(label_fft)[None, :, :]
    den = f_hat * np.conj(f_hat) + reg_lambda
    h_spatial = np.fft.ifft2(num / den, axes=(1, 2)) * mask[None, :, :]
    return np.fft.fft2(h_spatial, axes=(1, 2))


def _channel_responses(feats: np.ndarray, filters: np.ndarray) -> np.ndarray:
    f_hat = np.fft.fft2(feats, axes=(1, 2))
    return np.real(np.fft.ifft2(f_hat * np.conj(filters), axes=(1, 2)))


def _channel_weights(responses: np.ndarray) -> np.ndarray:
    peaks = responses.reshape(responses.shape[0], -1).max(axis=1)
    peaks = np.maximum(peaks, 0.0)
    total = peaks.sum()
    if total <= 0:
        return np.full(responses.shape[0], 1.0 / responses.shape[0])
    return peaks / total


def _clamp_center(cx: float, cy: float, size: tuple[int, int], image_shape) -> tuple[float, float]:
    w, h = size
    cx = min(max(cx, w / 2.0), image_shape[1] - w / 2.0)
    cy = min(max(cy, h / 2.0), image_shape[0] - h / 2.0)
    return cx, cy


def init_tracker(frame: np.ndarray, roi: Roi, config: TrackerConfig | None = None) -> TrackerState:
    """Train the initial filter on the first frame.

    The filter is the closed-form ridge solution per feature channel, the
    spatial reliability map comes from foreground-vs-ring color likelihood,
    and channel weights follow each channel's training-patch peak response.
    """
    if config is None:
        config = TrackerConfig()
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError("expected an RGB frame")
    if not roi.within(frame.shape[0], frame.shape[1]):
        raise ValueError(f"roi {roi} not fully inside frame {frame.shape[:2]}")

    th = int(round(roi.h * config.padding))
    tw = int(round(roi.w * config.padding))
    template_shape = (th, tw)
    center = (roi.cx, roi.cy)

    patch = extract_patch(frame, center, template_shape)
    fg_region = _center_rect_mask(template_shape, (roi.h, roi.w)).astype(bool)
    fg_hist = _color_histogram(patch, fg_region, config.hist_bins)
    bg_hist = _color_histogram(patch, ~fg_region, config.hist_bins)
    mask = _reliability_mask(
        patch, (roi.h, roi.w), fg_hist, bg_hist, config.hist_bins, config.mask_min_area_frac
    )

    sigma = config.output_sigma_factor * np.sqrt(roi.w * roi.h)
    label_fft = np.fft.fft2(_gaussian_label(template_shape, sigma))
    window = _hann_window(template_shape) if config.use_window else None

    feats = _features_for(config, patch, window)
    filters = _train_filters(feats, label_fft, mask, config.reg_lambda)
    weights = _channel_weights(_channel_responses(feats, filters))

    return TrackerState(
        filters=filters,
        channel_weights=weights,
        spatial_map=mask,
        label_fft=label_fft,
        window=window,
        center=center,
        size=(roi.w, roi.h),
        template_shape=template_shape,
        fg_hist=fg_hist,
        bg_hist=bg_hist,
        config=config,
        image_shape=frame.shape[:2],
    )


def blended_response(state: TrackerState, feats: np.ndarray) -> np.ndarray:
    """Reliability-weighted sum of per-channel correlation responses."""
    responses = _channel_responses(feats, state.filters)
    return np.tensordot(state.channel_weights, responses, axes=(0, 0))


def _peak_to_sidelobe(response: np.ndarray, peak_idx: tuple[int, int]) -> float:
    h, w = response.shape
    rolled = np.roll(response, (h // 2 - peak_idx[0], w // 2 - peak_idx[1]), axis=(0, 1))
    peak = rolled[h // 2, w // 2]
    guard = np.ones_like(response, dtype=bool)
    y0, x0 = max(0, h // 2 - 5), max(0, w // 2 - 5)
    guard[y0 : h // 2 + 6, x0 : w // 2 + 6] = False
    side = rolled[guard]
    std = side.std()
    if std <= 0:
        return float("inf")
    return float((peak - side.mean()) / std)


def _subpixel_offset(p_minus: float, p_center: float, p_plus: float) -> float:
    denom = 2.0 * p_center - p_plus - p_minus
    if denom == 0 or not np.isfinite(denom):
        return 0.0
    delta = 0.5 * (p_plus - p_minus) / denom
    return float(np.clip(delta, -1.0, 1.0))


def _decode_displacement(response: np.ndarray, subpixel: bool) -> tuple[float, float]:
    h, w = response.shape
    py, px = np.unravel_index(int(np.argmax(response)), response.shape)
    dy = py - h if py > h // 2 else py
    dx = px - w if px > w // 2 else px
    if subpixel:
        dy += _subpixel_offset(
            response[(py - 1) % h, px], response[py, px], response[(py + 1) % h, px]
        )
        dx += _subpixel_offset(
            response[py, (px - 1) % w], response[py, px], response[py, (px + 1) % w]
        )
    return dx, dy


def track_step(state: TrackerState, frame: np.ndarray) -> tuple[Roi, float, TrackerState]:
    """Locate the target in the next frame and update the model.

    Returns the new ROI, a confidence in [0, 1] from the peak-to-sidelobe
    ratio, and the updated state. A response below the confidence floor
    keeps the previous ROI, flags the state, and skips the model update.
    """
    if frame.shape[:2] != state.image_shape:
        raise ValueError(
            f"frame shape {frame.shape[:2]} differs from init {state.image_shape}"
        )
    cfg = state.config
    patch = extract_patch(frame, state.center, state.template_shape)
    feats = _features_for(cfg, patch, state.window)
    response = blended_response(state, feats)

    peak_idx = np.unravel_index(int(np.argmax(response)), response.shape)
    psr = _peak_to_sidelobe(response, peak_idx)
    confidence = 1.0 if np.isinf(psr) else max(0.0, psr) / (max(0.0, psr) + cfg.psr_scale)

    w, h = state.size
    if confidence < cfg.confidence_floor:
        state.low_confidence = True
        roi = Roi(state.center[0], state.center[1], w, h)
        return roi, confidence, state

    state.low_confidence = False
    dx, dy = _decode_displacement(response, cfg.subpixel)
    cx, cy = _clamp_center(state.center[0] + dx, state.center[1] + dy, state.size, state.image_shape)
    state.center = (cx, cy)

    new_patch = extract_patch(frame, state.center, state.template_shape)
    mask = _reliability_mask(
        new_patch, (h, w), state.fg_hist, state.bg_hist, cfg.hist_bins, cfg.mask_min_area_frac
    )
    new_feats = _features_for(cfg, new_patch, state.window)
    new_filters = _train_filters(new_feats, state.label_fft, mask, cfg.reg_lambda)
    new_weights = _channel_weights(_channel_responses(new_feats, new_filters))

    eta = cfg.learning_rate
    state.filters = (1.0 - eta) * state.filters + eta * new_filters
    blended = (1.0 - eta) * state.channel_weights + eta * new_weights
    state.channel_weights = blended / blended.sum()
    state.spatial_map = mask

    roi = Roi(cx, cy, w, h)
    return roi, confidence, state


@dataclass
class TrackPoint:
    frame_index: int
    roi: Roi
    confidence: float
    flags: list[str] = field(default_factory=list)


@dataclass
class QualityReport:
    """Automated stand-in for frame-by-frame visual track inspection."""

    n_frames: int
    jump_frames: list[int]
    low_confidence_spans: list[tuple[int, int]]
    exposure_fail_frames: list[int]

    @property
    def clean(self) -> bool:
        return not (self.jump_frames or self.low_confidence_spans or self.exposure_fail_frames)

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "jump_frames": self.jump_frames,
            "low_confidence_spans": [list(s) for s in self.low_confidence_spans],
            "exposure_fail_frames": self.exposure_fail_frames,
            "clean": self.clean,
        }


def _spans(indices: list[int]) -> list[tuple[int, int]]:
    spans = []
    for idx in indices:
        if spans and idx == spans[-1][1] + 1:
            spans[-1] = (spans[-1][0], idx)
        else:
            spans.append((idx, idx))
    return spans


def track_sequence(
    frames,
    roi0: Roi,
    config: TrackerConfig | None = None,
    cubes=None,
    exposure_thresholds: tuple[float, float] | None = None,
) -> tuple[list[TrackPoint], QualityReport]:
    """Track an ROI across a frame sequence with automated quality checks.

    Flags sudden center jumps (more than jump_threshold * min(w, h) in one
    frame), low-confidence frames, and, when the matching band cubes are
    supplied, per-frame exposure failures inside the tracked ROI.
    """
    if config is None:
        config = TrackerConfig()
    frames = iter(frames)
    cubes = iter(cubes) if cubes is not None else None
    try:
        first = next(frames)
    except StopIteration:
        raise ValueError("empty frame sequence") from None

    state = init_tracker(first, roi0, config)
    points = [TrackPoint(0, roi0, 1.0)]
    low_conf_frames: list[int] = []
    jump_frames: list[int] = []
    exposure_frames: list[int] = []
    jump_limit = config.jump_threshold * min(roi0.w, roi0.h)

    def exposure_check(index: int, roi: Roi, cube) -> None:
        if cube is None:
            return
        low, high = exposure_thresholds or (None, None)
        if low is None or high is None:
            from .mosaic import default_exposure_thresholds

            low, high = default_exposure_thresholds(cube.bit_depth)
        if not check_exposure(cube, roi.rect, low, high).passed:
            exposure_frames.append(index)
            points[index].flags.append("exposure")

    if cubes is not None:
        exposure_check(0, roi0, next(cubes, None))

    prev_center = (roi0.cx, roi0.cy)
    for index, frame in enumerate(frames, start=1):
        roi, confidence, state = track_step(state, frame)
        point = TrackPoint(index, roi, confidence)
        points.append(point)
        if state.low_confidence:
            low_conf_frames.append(index)
            point.flags.append("low_confidence")
        displacement = float(np.hypot(roi.cx - prev_center[0], roi.cy - prev_center[1]))
        if displacement > jump_limit:
            jump_frames.append(index)
            point.flags.append("jump")
        prev_center = (roi.cx, roi.cy)
        if cubes is not None:
            exposure_check(index, roi, next(cubes, None))

    report = QualityReport(
        n_frames=len(points),
        jump_frames=jump_frames,
        low_confidence_spans=_spans(low_conf_frames),
        exposure_fail_frames=exposure_frames,
    )
    return points, report


def write_track_csv(path, points: list[TrackPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "cx", "cy", "w", "h", "confidence", "flags"])
        for p in points:
            writer.writerow(
                [
                    p.frame_index,
                    f"{p.roi.cx:.3f}",
                    f"{p.roi.cy:.3f}",
                    p.roi.w,
                    p.roi.h,
                    f"{p.confidence:.4f}",
                    ";".join(p.flags),
                ]
            )
