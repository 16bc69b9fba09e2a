"""Time-frequency transforms, mixing, binary target masks and mask reconstruction.

All transforms work on mono float64 numpy arrays.  The STFT uses centered
frames and a weighted overlap-add inverse, so ``istft(stft(x))`` returns ``x``
up to floating point error for any window/hop pair that satisfies the
nonzero-overlap-add condition.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1022
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft < 2 or self.hop < 1:
            raise ConfigError(f"bad STFT sizes n_fft={self.n_fft} hop={self.hop}")
        if self.hop > self.n_fft:
            raise ConfigError("hop larger than the window leaves gaps between frames")
        try:
            win = self.window_array()
        except ValueError as exc:
            raise ConfigError(f"unknown window {self.window!r}") from exc
        if not signal.check_NOLA(win, self.n_fft, self.n_fft - self.hop):
            raise ConfigError(
                f"window {self.window!r} with n_fft={self.n_fft}, hop={self.hop} "
                "cannot be inverted by overlap-add"
            )

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    def window_array(self) -> np.ndarray:
        return signal.get_window(self.window, self.n_fft, fftbins=True)

    def n_frames(self, length: int) -> int:
        return 1 + length // self.hop

    def clip_length(self, n_frames: int) -> int:
        """Number of samples that yields exactly ``n_frames`` frames."""
        return (n_frames - 1) * self.hop


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError("audio clips are mono: expected a 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("audio samples must be finite")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample rate must be positive")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class Spectrogram:
    magnitude: np.ndarray
    phase: np.ndarray
    config: StftConfig
    length: int
    sample_rate: int

    @property
    def shape(self):
        return self.magnitude.shape

    @property
    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


@dataclass
class Mask:
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0) or np.any(self.values > 1) or np.any(np.isnan(self.values)):
            raise InvalidInputError("mask values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


def mix(r1: AudioClip, r2: AudioClip) -> AudioClip:
    """Plain samplewise sum. No normalisation, so the result may exceed [-1, 1]."""
    if r1.sample_rate != r2.sample_rate:
        raise InvalidInputError(f"sample rates differ: {r1.sample_rate} vs {r2.sample_rate}")
    if len(r1) != len(r2):
        raise InvalidInputError(f"clip lengths differ: {len(r1)} vs {len(r2)}")
    return AudioClip(r1.samples + r2.samples, r1.sample_rate)


def _stft_complex(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    pad = cfg.n_fft // 2
    n_frames = cfg.n_frames(len(x))
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    padded = np.zeros(total)
    padded[pad:pad + len(x)] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[::cfg.hop]
    return np.fft.rfft(frames * cfg.window_array(), axis=-1).T


def _istft_complex(spec: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    win = cfg.window_array()
    n_frames = spec.shape[1]
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=-1) * win
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        sl = slice(t * cfg.hop, t * cfg.hop + cfg.n_fft)
        out[sl] += frames[t]
        norm[sl] += win ** 2
    pad = cfg.n_fft // 2
    out = out[pad:pad + length]
    norm = norm[pad:pad + length]
    # every retained sample is covered by some frame with nonzero window (NOLA)
    return out / np.where(norm > 1e-10, norm, 1.0)


def stft(clip: AudioClip, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or StftConfig()
    if len(clip) < cfg.hop:
        raise InvalidInputError(f"clip of {len(clip)} samples is shorter than one hop ({cfg.hop})")
    z = _stft_complex(clip.samples, cfg)
    return Spectrogram(np.abs(z), np.angle(z), cfg, len(clip), clip.sample_rate)


def istft(spec: Spectrogram) -> AudioClip:
    x = _istft_complex(spec.complex, spec.config, spec.length)
    return AudioClip(x, spec.sample_rate)


def _magnitude(s) -> np.ndarray:
    return s.magnitude if isinstance(s, Spectrogram) else np.asarray(s, dtype=np.float64)


def binary_target_masks(s1, s2) -> tuple[Mask, Mask]:
    """Dominance masks: a cell belongs to a source when its share of S1+S2 exceeds one half.

    Cells where S1+S2 == 0 are assigned to neither source.
    """
    a, b = _magnitude(s1), _magnitude(s2)
    if a.shape != b.shape:
        raise InvalidInputError(f"spectrogram shapes differ: {a.shape} vs {b.shape}")
    denom = a + b
    live = denom > 0
    ratio1 = np.divide(a, denom, out=np.zeros_like(a), where=live)
    ratio2 = np.divide(b, denom, out=np.zeros_like(b), where=live)
    m1 = (live & (ratio1 > 0.5)).astype(np.float64)
    m2 = (live & (ratio2 > 0.5)).astype(np.float64)
    return Mask(m1), Mask(m2)


def apply_mask_reconstruct(spec_in: Spectrogram, mask) -> AudioClip:
    """Scale the linear magnitude by ``mask`` and invert with the input (mixture) phase."""
    values = mask.values if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float64)
    if values.shape != spec_in.shape:
        raise InvalidInputError(f"mask shape {values.shape} != spectrogram shape {spec_in.shape}")
    masked = Spectrogram(values * spec_in.magnitude, spec_in.phase, spec_in.config,
                         spec_in.length, spec_in.sample_rate)
    return istft(masked)


def log_magnitude(spec: Spectrogram) -> np.ndarray:
    """Network input scaling: log(1 + |S|)."""
    return np.log1p(spec.magnitude)


# --- file formats -----------------------------------------------------------

def read_wav(path, target_rate: int | None = None) -> AudioClip:
    """Read a PCM wave file as mono float in [-1, 1], optionally resampling."""
    rate, data = wavfile.read(str(path))
    data = np.asarray(data)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if target_rate is not None and target_rate != rate:
        g = np.gcd(int(rate), int(target_rate))
        data = signal.resample_poly(data, target_rate // g, rate // g)
        rate = target_rate
    return AudioClip(data, int(rate))


def write_wav(path, clip: AudioClip, subtype: str = "float32") -> None:
    if subtype == "float32":
        data = clip.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = (np.clip(clip.samples, -1.0, 1.0 - 1.0 / 32768) * 32768).astype(np.int16)
    else:
        raise InvalidInputError(f"unsupported wav subtype {subtype!r}")
    wavfile.write(str(path), clip.sample_rate, data)


def save_spectrogram(path, spec: Spectrogram) -> None:
    """Write magnitude/phase to ``path`` (.npz) with a JSON sidecar of the STFT settings."""
    path = Path(path)
    np.savez(path, magnitude=spec.magnitude, phase=spec.phase)
    sidecar = {"sr": spec.sample_rate, "window": spec.config.n_fft, "hop": spec.config.hop,
               "window_type": spec.config.window, "length": spec.length}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_spectrogram(path) -> Spectrogram:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arrays = np.load(path.with_suffix(".npz"))
    cfg = StftConfig(n_fft=meta["window"], hop=meta["hop"], window=meta.get("window_type", "hann"))
    return Spectrogram(arrays["magnitude"], arrays["phase"], cfg, meta["length"], meta["sr"])
