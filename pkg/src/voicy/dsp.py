"""Signal-processing kernels: framing, STFT/iSTFT, mel filterbank, log-mel
features and Griffin-Lim reconstruction.

Framing never pads the input: frame ``t`` covers samples
``[t * hop, t * hop + win)`` and the frame count is
``1 + (len(x) - win) // hop``.  All routines work in float64.

Mel scale (HTK convention)::

    mel = 2595 * log10(1 + hz / 700)
    hz = 700 * (10 ** (mel / 2595) - 1)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 24000
NORM_FLOOR = 1e-3


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DspError(f"waveform must be mono (1-D), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DspError("waveform contains NaN or Inf samples")
        if self.sample_rate_hz <= 0:
            raise DspError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    win_size: int = 1024
    hop_size: int = 256
    window: str = "hann"

    def __post_init__(self):
        if min(self.fft_size, self.win_size, self.hop_size) <= 0:
            raise DspError("STFT sizes must be positive")
        if self.win_size > self.fft_size:
            raise DspError("win_size must not exceed fft_size")
        if self.hop_size > self.win_size:
            raise DspError("hop_size must not exceed win_size")
        if self.window != "hann":
            raise DspError(f"unsupported window {self.window!r}; only 'hann' is available")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def is_cola(self) -> bool:
        return self.win_size % self.hop_size == 0

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_size:
            raise DspError(
                f"input too short: {n_samples} samples < window of {self.win_size}"
            )
        return 1 + (n_samples - self.win_size) // self.hop_size

    def synthesis_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_size + self.win_size


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    f_min_hz: float = 50.0
    f_max_hz: float = 12000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels <= 0:
            raise DspError("n_mels must be positive")
        if not 0 <= self.f_min_hz < self.f_max_hz:
            raise DspError("need 0 <= f_min_hz < f_max_hz")
        if self.log_floor <= 0:
            raise DspError("log_floor must be positive")


@dataclass(frozen=True)
class ComplexSpectrogram:
    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 2 or values.shape[1] != self.config.n_bins:
            raise DspError(
                f"spectrogram must be n_frames x {self.config.n_bins}, got {values.shape}"
            )
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray
    hop_size: int = 256
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DspError(f"mel spectrogram must be 2-D, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, win_size: int, hop_size: int) -> np.ndarray:
    n_frames = 1 + (len(samples) - win_size) // hop_size
    windows = np.lib.stride_tricks.sliding_window_view(samples, win_size)
    return windows[: n_frames * hop_size : hop_size]


def stft(wave: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    cfg.n_frames(len(wave))
    frames = frame_signal(wave.samples, cfg.win_size, cfg.hop_size) * hann_window(cfg.win_size)
    return ComplexSpectrogram(np.fft.rfft(frames, n=cfg.fft_size, axis=1), cfg)


def istft(spec: ComplexSpectrogram, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Least-squares overlap-add inverse of :func:`stft`.

    Each frame is windowed again and the sum is divided by the summed squared
    window. That divisor is floored at ``NORM_FLOOR`` times its peak, so the
    outermost samples (where it approaches zero) are attenuated rather than
    amplified; the fully overlapped interior is exact.
    """
    cfg = spec.config
    if not cfg.is_cola:
        raise DspError(
            f"non-COLA config: win_size {cfg.win_size} is not a multiple of hop_size {cfg.hop_size}"
        )
    window = hann_window(cfg.win_size)
    frames = np.fft.irfft(spec.values, n=cfg.fft_size, axis=1)[:, : cfg.win_size] * window
    length = cfg.synthesis_length(spec.n_frames)
    out = np.zeros(length)
    norm = np.zeros(length)
    sq = window**2
    for t, frame in enumerate(frames):
        start = t * cfg.hop_size
        out[start : start + cfg.win_size] += frame
        norm[start : start + cfg.win_size] += sq
    out /= np.maximum(norm, NORM_FLOOR * norm.max())
    return Waveform(out, sample_rate_hz)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Band edges and centres: ``n_mels + 2`` points uniform on the mel scale."""
    mels = np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(
    cfg: MelConfig = MelConfig(),
    fft_size: int = 1024,
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
) -> np.ndarray:
    """Triangular filters, peak 1, shape ``(n_mels, fft_size // 2 + 1)``."""
    if cfg.f_max_hz > sample_rate_hz / 2:
        raise DspError(
            f"f_max_hz {cfg.f_max_hz} exceeds Nyquist frequency {sample_rate_hz / 2}"
        )
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate_hz / fft_size
    points = mel_center_frequencies(cfg)
    lower, center, upper = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    outside = (bin_hz < cfg.f_min_hz) | (bin_hz > cfg.f_max_hz)
    weights[:, outside] = 0.0
    return weights


def power_spectrogram(wave: Waveform, cfg: StftConfig) -> np.ndarray:
    return np.abs(stft(wave, cfg).values) ** 2


def mel_spectrogram(
    wave: Waveform,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
) -> MelSpectrogram:
    fb = mel_filterbank(mel_cfg, stft_cfg.fft_size, wave.sample_rate_hz)
    mel_power = power_spectrogram(wave, stft_cfg) @ fb.T
    values = np.log(np.maximum(mel_power, mel_cfg.log_floor))
    return MelSpectrogram(values, stft_cfg.hop_size, wave.sample_rate_hz)


def spectral_convergence(magnitude: np.ndarray, target: np.ndarray) -> float:
    return float(np.linalg.norm(magnitude - target) / max(np.linalg.norm(target), 1e-300))


def mel_to_magnitude(mel: MelSpectrogram, stft_cfg: StftConfig, mel_cfg: MelConfig) -> np.ndarray:
    """Pseudo-inverse of the filterbank, clipped to non-negative power."""
    fb = mel_filterbank(mel_cfg, stft_cfg.fft_size, mel.sample_rate_hz)
    if mel.n_mels != fb.shape[0]:
        raise DspError(f"mel has {mel.n_mels} bands, config expects {fb.shape[0]}")
    power = np.exp(mel.values) @ np.linalg.pinv(fb).T
    return np.sqrt(np.maximum(power, 0.0))


def griffin_lim(
    mel: MelSpectrogram,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    n_iters: int = 60,
    history: list | None = None,
) -> Waveform:
    """Reconstruct a waveform from a log-mel spectrogram.

    Phase starts at zero, so the result is fully deterministic. When
    ``history`` is given, the spectral convergence of every iterate is
    appended to it.
    """
    if n_iters < 1:
        raise DspError("n_iters must be >= 1")
    target = mel_to_magnitude(mel, stft_cfg, mel_cfg)
    sr = mel.sample_rate_hz
    phase = np.ones_like(target, dtype=np.complex128)
    wave = None
    for _ in range(n_iters):
        wave = istft(ComplexSpectrogram(target * phase, stft_cfg), sr)
        rebuilt = stft(wave, stft_cfg).values
        if history is not None:
            history.append(spectral_convergence(np.abs(rebuilt), target))
        magnitude = np.abs(rebuilt)
        phase = np.where(magnitude > 1e-300, rebuilt / np.maximum(magnitude, 1e-300), 1.0)
    return wave


def read_wav(path, expected_rate: int | None = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read mono 16/24/32-bit PCM or 32-bit float WAV into [-1, 1] floats."""
    rate, data = wavfile.read(str(path))
    if expected_rate is not None and rate != expected_rate:
        raise DspError(
            f"{path}: sample rate {rate} Hz does not match expected {expected_rate} Hz "
            "(resampling is not provided)"
        )
    if data.ndim != 1:
        raise DspError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit data into int32
        samples = data / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise DspError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, wave: Waveform) -> None:
    """Write as 32-bit float WAV (lossless for float32-representable data)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), wave.sample_rate_hz, wave.samples.astype(np.float32))
