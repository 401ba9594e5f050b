"""Range/slow-time maps, slow-time STFT and MDS image rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .aspc import correct_iq_imbalance, process_chirp
from .signal_model import FormatError, IqCube, RadarConfig, parse_key_values

PIPELINES = ("conventional", "proposed")

# 5-anchor colormap at 0, .25, .5, .75, 1: dark blue, cyan, green, orange, dark red
COLORMAP_ANCHORS = np.array([
    [0, 0, 139],
    [0, 255, 255],
    [0, 200, 0],
    [255, 165, 0],
    [139, 0, 0],
], dtype=float)


@dataclass
class RangeSlowTimeMap:
    data: np.ndarray  # complex, [range bin k, chirp m]
    pipeline: str

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}")


@dataclass
class MdsImage:
    pixels: np.ndarray  # uint8 [row, col, rgb]
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError(f"expected uint8 [H, W, 3] pixels, got {self.pixels.dtype} {self.pixels.shape}")


def build_map(cube: IqCube, config: RadarConfig, pipeline: str = "proposed") -> RangeSlowTimeMap:
    """Range FFT of every chirp after the per-chirp stage of ``pipeline``.

    The two pipelines differ only here: ``conventional`` keeps the
    IQ-corrected complex chirp, ``proposed`` runs the full SPC chain and
    keeps its real output. Window and FFT length are shared.
    """
    if pipeline not in PIPELINES:
        raise ValueError(f"pipeline must be one of {PIPELINES}")
    data = cube.data
    if data.shape != (config.samples_per_chirp, config.chirps_per_image):
        raise ValueError("cube does not match config")
    if not np.any(data):
        return RangeSlowTimeMap(np.zeros((config.range_fft_len, data.shape[1]), complex), pipeline)
    if pipeline == "proposed":
        chirps = process_chirp(data, config).data
    else:
        chirps = correct_iq_imbalance(data, config.fast_time_window)
    w = get_window(config.fast_time_window, data.shape[0], fftbins=True)
    rows = np.ascontiguousarray(chirps.T) * w
    spectra = np.fft.fft(rows, n=config.range_fft_len, axis=1)
    return RangeSlowTimeMap(np.ascontiguousarray(spectra.T), pipeline)


def remove_dc(rmap: RangeSlowTimeMap) -> RangeSlowTimeMap:
    """Subtract each range bin's slow-time mean.

    Residuals at the rounding level of their bin are set to exactly zero,
    so a bin that is constant over slow time comes out silent instead of
    as amplified rounding noise.
    """
    if rmap.data.shape[1] < 2:
        raise ValueError("need at least 2 chirps to remove the slow-time mean")
    out = rmap.data - rmap.data.mean(axis=1, keepdims=True)
    tol = 64 * np.finfo(float).eps * np.abs(rmap.data).max(axis=1, keepdims=True)
    out[np.abs(out) <= tol] = 0
    return RangeSlowTimeMap(out, rmap.pipeline)


def select_target_bin(rmap: RangeSlowTimeMap, search: tuple[int, int] | None = None) -> int:
    """Range bin with the most slow-time energy.

    Bin 0 is never chosen and only bins below half the FFT length are
    eligible. ``search=(lo, hi)`` further limits candidates to
    ``lo <= k < hi``. Ties go to the smaller bin.
    """
    energy = np.sum(np.abs(rmap.data) ** 2, axis=1)
    lo, hi = 1, rmap.data.shape[0] // 2
    if search is not None:
        lo, hi = max(lo, int(search[0])), min(hi, int(search[1]))
    if hi <= lo:
        raise ValueError("empty range-bin search interval")
    band = energy[lo:hi]
    if not np.any(band > 0):
        raise ValueError("no energy in the eligible range bins")
    return lo + int(np.argmax(band))


def stft_at_bin(rmap: RangeSlowTimeMap, i: int, config: RadarConfig) -> np.ndarray:
    """Sliding-window STFT of range bin ``i`` along slow time.

    Returns ``[doppler, frame]`` with ``stft_fft_len`` Doppler bins,
    zero Doppler at row ``stft_fft_len // 2``, and
    ``(M - L) // hop + 1`` frames.
    """
    series = rmap.data[i]
    length, hop = config.stft_window_len, config.stft_hop
    if length > series.shape[0]:
        raise ValueError(f"STFT window {length} longer than {series.shape[0]} chirps")
    w = get_window(config.slow_time_window, length, fftbins=True)
    frames = sliding_window_view(series, length)[::hop] * w
    spec = np.fft.fft(frames, n=config.stft_fft_len, axis=1)
    return np.fft.fftshift(spec, axes=1).T


def resize_linear(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    out = np.asarray(a, dtype=float)
    for axis, new in enumerate(shape):
        old = out.shape[axis]
        if old == new:
            continue
        pos = np.clip((np.arange(new) + 0.5) * old / new - 0.5, 0, old - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, old - 1)
        frac = pos - lo
        a_lo = np.take(out, lo, axis=axis)
        a_hi = np.take(out, hi, axis=axis)
        frac = frac.reshape([-1 if k == axis else 1 for k in range(out.ndim)])
        out = a_lo * (1 - frac) + a_hi * frac
    return out


def apply_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values through the 5-anchor colormap to uint8 RGB."""
    v = np.clip(values, 0.0, 1.0)
    stops = np.linspace(0.0, 1.0, len(COLORMAP_ANCHORS))
    rgb = np.stack([np.interp(v, stops, COLORMAP_ANCHORS[:, c]) for c in range(3)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def spectrogram_levels(stft: np.ndarray, dynamic_range_db: float) -> np.ndarray:
    """Magnitude in dB clipped to the top ``dynamic_range_db`` and scaled to [0, 1]."""
    mag = np.abs(stft)
    peak_mag = mag.max()
    if peak_mag == 0:
        return np.zeros(mag.shape)
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(mag / peak_mag)
    return (np.clip(db, -dynamic_range_db, 0.0) + dynamic_range_db) / dynamic_range_db


def render_image(stft: np.ndarray, config: RadarConfig, label: str = "", meta: dict | None = None) -> MdsImage:
    """Render an STFT as an ``image_size`` square colour MDS image.

    Positive Doppler is at the top row, time runs left to right.
    """
    if stft.size == 0:
        raise ValueError("empty STFT")
    levels = spectrogram_levels(stft, config.dynamic_range_db)[::-1]
    levels = resize_linear(levels, (config.image_size, config.image_size))
    return MdsImage(apply_colormap(levels), label, dict(meta or {}))


def extract_mds(cube: IqCube, config: RadarConfig, pipeline: str = "proposed",
                target_bin: int | None = None, search: tuple[int, int] | None = None,
                label: str = "", meta: dict | None = None) -> MdsImage:
    """Cube to MDS image: map, DC removal, bin selection, STFT, render."""
    rmap = remove_dc(build_map(cube, config, pipeline))
    if target_bin is None:
        target_bin = select_target_bin(rmap, search)
    stft = stft_at_bin(rmap, target_bin, config)
    meta = dict(meta or {})
    meta.update(pipeline=pipeline, target_bin=int(target_bin))
    return render_image(stft, config, label, meta)


def write_ppm(image: MdsImage, path) -> Path:
    """Binary P6 PPM plus a ``.txt`` sidecar holding label and meta lines."""
    path = Path(path)
    h, w, _ = image.pixels.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + image.pixels.tobytes())
    lines = [f"label={image.label}"] + [f"{k}={v}" for k, v in sorted(image.meta.items())]
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    return path


def read_ppm(path) -> MdsImage:
    path = Path(path)
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{path}: only 8-bit P6 PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: pixel payload size mismatch")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
    label, meta = "", {}
    side = path.with_suffix(".txt")
    if side.exists():
        meta = parse_key_values(side.read_text())
        label = meta.pop("label", "")
    return MdsImage(pixels, label, meta)
