"""Synthetic FMCW beat-signal generator.

Produces complex fast-time x slow-time cubes holding a leakage tone with
phase noise, static point targets and rotating-blade targets, plus the
binary/text formats used to store them.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# c = 3e8 keeps 500 m <-> 2.5 MHz exact at the default sweep; SI value is 0.07 % lower.
SPEED_OF_LIGHT = 3e8

CUBE_MAGIC = b"MDSIQ1\0"

WINDOW_KINDS = ("hann", "boxcar")


class FormatError(ValueError):
    """A file does not match the expected binary or text layout."""


@dataclass(frozen=True)
class RadarConfig:
    """Radar, range-processing and spectrogram parameters for one run.

    Defaults are the inspire-style profile (256 chirps, 16-sample STFT
    window). ``RadarConfig.spark()`` gives the 1024-chirp / 32-sample one.
    """

    sample_rate_hz: float = 5e6
    samples_per_chirp: int = 1000
    sweep_period_s: float = 200e-6
    sweep_bandwidth_hz: float = 150e6
    carrier_offset_hz: float = 0.0
    nfft_leakage: int = 2**19
    chirps_per_image: int = 256
    fast_time_window: str = "hann"
    slow_time_window: str = "hann"
    stft_window_len: int = 16
    stft_overlap: int = 15
    stft_hop: int = 1
    stft_fft_len: int = 128
    range_fft_len: int = 1024
    image_size: int = 128
    dynamic_range_db: float = 40.0
    # simulator knob: centre of the 14.35-14.50 GHz sweep
    carrier_frequency_hz: float = 14.425e9

    def __post_init__(self):
        if self.samples_per_chirp < 2:
            raise ValueError("samples_per_chirp must be >= 2")
        if self.samples_per_chirp > self.nfft_leakage:
            raise ValueError("samples_per_chirp must not exceed nfft_leakage")
        if self.samples_per_chirp > self.range_fft_len:
            raise ValueError("samples_per_chirp must not exceed range_fft_len")
        if self.stft_hop < 1:
            raise ValueError("stft_hop must be >= 1")
        if self.stft_overlap != self.stft_window_len - self.stft_hop:
            raise ValueError("stft_overlap must equal stft_window_len - stft_hop")
        if self.stft_window_len > self.stft_fft_len:
            raise ValueError("stft_window_len must not exceed stft_fft_len")
        if self.chirps_per_image < 1:
            raise ValueError("chirps_per_image must be >= 1")
        for name in ("fast_time_window", "slow_time_window"):
            if getattr(self, name) not in WINDOW_KINDS:
                raise ValueError(f"{name} must be one of {WINDOW_KINDS}")
        if self.sample_rate_hz <= 0 or self.sweep_period_s <= 0 or self.sweep_bandwidth_hz <= 0:
            raise ValueError("rates, periods and bandwidths must be positive")
        if self.dynamic_range_db <= 0:
            raise ValueError("dynamic_range_db must be positive")

    @classmethod
    def inspire(cls, **overrides) -> "RadarConfig":
        return cls(**overrides)

    @classmethod
    def spark(cls, **overrides) -> "RadarConfig":
        kw = dict(chirps_per_image=1024, stft_window_len=32, stft_overlap=31)
        kw.update(overrides)
        return cls(**kw)

    def replace(self, **changes) -> "RadarConfig":
        if "stft_window_len" in changes and "stft_overlap" not in changes:
            hop = changes.get("stft_hop", self.stft_hop)
            changes["stft_overlap"] = changes["stft_window_len"] - hop
        return dataclasses.replace(self, **changes)

    @property
    def chirp_slope(self) -> float:
        """Sweep rate in Hz/s."""
        return self.sweep_bandwidth_hz / self.sweep_period_s

    @property
    def range_resolution_m(self) -> float:
        return SPEED_OF_LIGHT / (2.0 * self.sweep_bandwidth_hz)

    @property
    def max_range_m(self) -> float:
        """Range whose beat frequency reaches F_s/2."""
        return 0.5 * self.sample_rate_hz * SPEED_OF_LIGHT / (2.0 * self.chirp_slope)

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    # flat key=value text, the config sidecar format
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float):
                value = format(value, ".17g")
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict, base: "RadarConfig | None" = None) -> "RadarConfig":
        """Build a config from string or typed values; unknown keys raise KeyError."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key: {key!r}")
            kind = types[key]
            if kind is int:
                changes[key] = int(float(raw)) if isinstance(raw, str) and "e" in raw.lower() else int(raw)
            elif kind is float:
                changes[key] = float(raw)
            else:
                changes[key] = str(raw).strip()
        return base.replace(**changes)

    @classmethod
    def from_text(cls, text: str, base: "RadarConfig | None" = None) -> "RadarConfig":
        return cls.from_mapping(parse_key_values(text), base)


def parse_key_values(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def default_phase_noise_profile() -> tuple[tuple[float, float], ...]:
    # (offset Hz, dBc/Hz); low offsets are suppressed as the short leakage
    # delay decorrelates slow phase drift, the plateau is the synthesizer floor
    return ((1e2, -150.0), (1e3, -120.0), (1e4, -95.0), (1e6, -95.0), (2.5e6, -100.0))


@dataclass(frozen=True)
class LeakageSpec:
    beat_frequency_hz: float = 40e3
    amplitude: float = 1.0
    phase_noise_profile: tuple[tuple[float, float], ...] = field(default_factory=default_phase_noise_profile)
    initial_phase_rad: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("leakage amplitude must be >= 0")
        offsets = [p[0] for p in self.phase_noise_profile]
        if any(o <= 0 for o in offsets):
            raise ValueError("phase-noise offsets must be positive")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("phase-noise offsets must be strictly increasing")
        object.__setattr__(self, "phase_noise_profile",
                           tuple((float(o), float(d)) for o, d in self.phase_noise_profile))

    @classmethod
    def clean(cls, **kw) -> "LeakageSpec":
        """Leakage tone without phase noise."""
        return cls(phase_noise_profile=(), **kw)


@dataclass(frozen=True)
class TargetSpec:
    """A point target, optionally carrying rotating blades.

    ``blade_count == 0`` gives a plain point scatterer. Blade scatterers sit
    at ``blade_length_m * (s + 1) / scatterers_per_blade`` from the hub and
    each return ``amplitude * blade_amplitude``.
    """

    range_m: float
    amplitude: float = 1e-3
    body_velocity_mps: float = 0.0
    blade_count: int = 0
    blade_length_m: float = 0.0
    rotation_hz: float = 0.0
    scatterers_per_blade: int = 0
    blade_amplitude: float = 0.5
    rotor_phase_rad: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("target amplitude must be >= 0")
        if self.range_m < 0:
            raise ValueError("target range must be >= 0")
        if self.blade_count < 0 or self.scatterers_per_blade < 0:
            raise ValueError("blade_count and scatterers_per_blade must be >= 0")
        if self.blade_count > 0 and self.scatterers_per_blade == 0:
            raise ValueError("bladed targets need scatterers_per_blade >= 1")


@dataclass
class IqCube:
    """Complex beat samples ``data[n, m]``: fast time n, slow time (chirp) m."""

    data: np.ndarray
    config: RadarConfig

    def __post_init__(self):
        self.data = np.asarray(self.data)
        expected = (self.config.samples_per_chirp, self.config.chirps_per_image)
        if self.data.shape != expected:
            raise ValueError(f"cube shape {self.data.shape} does not match config {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite samples")

    @property
    def shape(self):
        return self.data.shape


def beat_frequency_for_range(range_m: float, config: RadarConfig) -> float:
    """FMCW beat frequency ``2 R BW / (c T)`` in Hz."""
    if np.any(np.asarray(range_m) < 0):
        raise ValueError("range must be >= 0")
    return 2.0 * range_m * config.chirp_slope / SPEED_OF_LIGHT


def _profile_psd(freqs: np.ndarray, profile) -> np.ndarray:
    """Two-sided phase PSD (rad^2/Hz) from a piecewise log-linear dBc/Hz profile."""
    offsets = np.array([p[0] for p in profile])
    levels = np.array([p[1] for p in profile])
    f = np.maximum(np.abs(freqs), offsets[0])
    db = np.interp(np.log10(f), np.log10(offsets), levels)
    return 10.0 ** (db / 10.0)


def synthesize_phase_noise(n_samples: int, sample_rate_hz: float, profile, rng) -> np.ndarray:
    """Real phase sequence whose PSD follows ``profile``; zeros if it is empty."""
    if not profile:
        return np.zeros(n_samples)
    white = rng.standard_normal(n_samples)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate_hz)
    spectrum *= np.sqrt(_profile_psd(freqs, profile) * sample_rate_hz)
    return np.fft.irfft(spectrum, n=n_samples)


def _target_return(target: TargetSpec, config: RadarConfig) -> np.ndarray:
    n_fast, n_slow = config.samples_per_chirp, config.chirps_per_image
    fs = config.sample_rate_hz
    n = np.arange(n_fast)
    t_fast = n / fs
    t = t_fast[:, None] + config.sweep_period_s * np.arange(n_slow)[None, :]
    k_beat = 2.0 * config.chirp_slope / SPEED_OF_LIGHT      # Hz per metre
    k_carrier = 4.0 * np.pi / config.wavelength_m           # rad per metre

    # body: phase split into a mod-2pi constant and small varying parts
    f_body = config.carrier_offset_hz + k_beat * target.range_m
    const_phase = np.mod(k_carrier * target.range_m, 2 * np.pi)
    body_phase = 2 * np.pi * f_body * t_fast[:, None] + const_phase
    if target.body_velocity_mps:
        drift = target.body_velocity_mps * t
        body_phase = body_phase + drift * (k_carrier + 2 * np.pi * k_beat * t_fast[:, None])
    carrier = np.exp(1j * body_phase)
    total = target.amplitude * carrier if target.amplitude else np.zeros((n_fast, n_slow), complex)
    if target.blade_count == 0 or target.amplitude == 0:
        return total

    # radial offset r*cos(theta) scales by this per-sample coefficient (rad/m)
    coef = (k_carrier + 2 * np.pi * k_beat * t_fast)[:, None].astype(np.float32)
    spin = np.mod(2 * np.pi * target.rotation_hz * t + target.rotor_phase_rad, 2 * np.pi)
    c_spin, s_spin = np.cos(spin), np.sin(spin)
    radii = target.blade_length_m * np.arange(1, target.scatterers_per_blade + 1) / target.scatterers_per_blade
    re = np.zeros((n_fast, n_slow), np.float32)
    im = np.zeros((n_fast, n_slow), np.float32)
    for b in range(target.blade_count):
        phi = 2 * np.pi * b / target.blade_count
        proj = (c_spin * np.cos(phi) - s_spin * np.sin(phi)).astype(np.float32) * coef
        for r in radii:
            ph = np.float32(r) * proj
            re += np.cos(ph)
            im += np.sin(ph)
    blades = (re.astype(np.float64) + 1j * im.astype(np.float64)) * carrier
    return total + target.amplitude * target.blade_amplitude * blades


def synthesize_cube(config: RadarConfig, leakage: LeakageSpec, targets: Sequence[TargetSpec] = (),
                    thermal_noise_power: float = 0.0, seed: int = 0) -> IqCube:
    """Simulate one cube of beat samples.

    The leakage phase noise is drawn once for the whole (contiguous) cube
    duration, so it is coherent across chirp boundaries. Same inputs and
    seed give bit-identical output.
    """
    if thermal_noise_power < 0:
        raise ValueError("thermal_noise_power must be >= 0")
    for tgt in targets:
        if not 0 <= tgt.range_m < config.max_range_m:
            raise ValueError(f"target range {tgt.range_m} m outside [0, {config.max_range_m:g}) m")
    n_fast, n_slow = config.samples_per_chirp, config.chirps_per_image
    pn_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))

    data = np.zeros((n_fast, n_slow), dtype=complex)
    if leakage.amplitude > 0:
        pn = synthesize_phase_noise(n_fast * n_slow, config.sample_rate_hz,
                                    leakage.phase_noise_profile, pn_rng)
        # column-major reshape: sample index runs through chirp 0, then chirp 1, ...
        pn = pn.reshape(n_slow, n_fast).T
        n = np.arange(n_fast)[:, None]
        f_leak = leakage.beat_frequency_hz + config.carrier_offset_hz
        phase = 2 * np.pi * f_leak * n / config.sample_rate_hz + leakage.initial_phase_rad + pn
        data += leakage.amplitude * np.exp(1j * phase)
    for tgt in targets:
        data += _target_return(tgt, config)
    if thermal_noise_power > 0:
        scale = np.sqrt(thermal_noise_power / 2.0)
        noise = noise_rng.standard_normal((2, n_fast, n_slow))
        data += scale * (noise[0] + 1j * noise[1])
    return IqCube(data, config)


def apply_iq_imbalance(cube, gain_ratio: float, phase_skew_rad: float):
    """Distort the quadrature branch: ``Q' = g (Q cos(p) + I sin(p))``.

    Accepts an ``IqCube`` or a complex array and returns the same kind.
    """
    if gain_ratio <= 0:
        raise ValueError("gain_ratio must be positive")
    x = cube.data if isinstance(cube, IqCube) else np.asarray(cube)
    i, q = x.real, x.imag
    q2 = gain_ratio * (q * np.cos(phase_skew_rad) + i * np.sin(phase_skew_rad))
    out = i + 1j * q2
    return IqCube(out, cube.config) if isinstance(cube, IqCube) else out


def write_cube(cube: IqCube, path) -> Path:
    """Write the MDSIQ1 binary file plus a ``.cfg`` key=value sidecar.

    Samples are stored as float32 I,Q pairs in n-major order, so a
    round trip is exact only to single precision.
    """
    path = Path(path)
    n_fast, n_slow = cube.shape
    iq = np.empty((n_fast, n_slow, 2), dtype="<f4")
    iq[..., 0] = cube.data.real
    iq[..., 1] = cube.data.imag
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<II", n_fast, n_slow))
        fh.write(iq.tobytes())
    sidecar_path(path).write_text(cube.config.to_text())
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def read_cube(path, config: RadarConfig | None = None) -> IqCube:
    path = Path(path)
    if config is None:
        side = sidecar_path(path)
        config = RadarConfig.from_text(side.read_text()) if side.exists() else RadarConfig()
    raw = path.read_bytes()
    header = len(CUBE_MAGIC) + 8
    if len(raw) < header or raw[:len(CUBE_MAGIC)] != CUBE_MAGIC:
        raise FormatError(f"{path}: not an MDSIQ1 cube file")
    n_fast, n_slow = struct.unpack("<II", raw[len(CUBE_MAGIC):header])
    body = np.frombuffer(raw, dtype="<f4", offset=header)
    if body.size != 2 * n_fast * n_slow:
        raise FormatError(f"{path}: payload holds {body.size} floats, expected {2 * n_fast * n_slow}")
    iq = body.reshape(n_fast, n_slow, 2).astype(np.float64)
    if (n_fast, n_slow) != (config.samples_per_chirp, config.chirps_per_image):
        config = config.replace(samples_per_chirp=n_fast, chirps_per_image=n_slow)
    return IqCube(iq[..., 0] + 1j * iq[..., 1], config)
